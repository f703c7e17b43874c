"""Center-based detection heads, Gaussian targets, and training losses.

The heatmap head is a single parameter set used three ways: the main
detection heatmap Q on the fused feature, and the consistency pair
(Q from the detached fused feature, Qhat from the aligned history).
Sharing one head keeps the heatmap semantics identical across uses and
lets the consistency loss push the aligned history toward whatever the
detector currently believes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParamStore, add_conv3x3, add_linear
from .scene import TruthBox

EPS_PROB = 1e-12

REG_CHANNELS = 6  # (drow, dcol, w, l, vrow, vcol)


class LossError(ArithmeticError):
    pass


@dataclass(eq=False)
class TargetMaps:
    heat: np.ndarray  # [H,W,num_classes], 1.0 exactly at center cells
    reg: np.ndarray  # [H,W,6]
    mask: np.ndarray  # [H,W] in {0,1}


class DetectionHeads:
    """Heatmap and regression branches: conv3x3, relu, 1x1 projection."""

    def __init__(self, store: ParamStore, prefix: str, c: int, num_classes: int, rng):
        self.num_classes = num_classes
        self.hk, self.hkb = add_conv3x3(store, f"{prefix}.heat.conv", c, c, rng)
        self.hw, self.hb = add_linear(store, f"{prefix}.heat.proj", c, num_classes, rng)
        self.rk, self.rkb = add_conv3x3(store, f"{prefix}.reg.conv", c, c, rng)
        self.rw, self.rb = add_linear(store, f"{prefix}.reg.proj", c, REG_CHANNELS, rng)

    def heatmap(self, feat: Tensor) -> Tensor:
        return ad.sigmoid(ad.linear(ad.relu(ad.conv3x3(feat, self.hk, self.hkb)), self.hw, self.hb))

    def regression(self, feat: Tensor) -> Tensor:
        return ad.linear(ad.relu(ad.conv3x3(feat, self.rk, self.rkb)), self.rw, self.rb)


def render_targets(gts: list[TruthBox], h: int, w: int, num_classes: int) -> TargetMaps:
    """CenterPoint-style targets: per-class Gaussian splats, max-combined."""
    heat = np.zeros((h, w, num_classes))
    reg = np.zeros((h, w, REG_CHANNELS))
    mask = np.zeros((h, w))
    rows, cols = np.indices((h, w), dtype=np.float64)
    for gt in gts:
        ci, cj = round(gt.row), round(gt.col)
        if not (0 <= ci < h and 0 <= cj < w):
            continue
        sigma = max(1.0, min(gt.w, gt.l) / 3.0)
        splat = np.exp(-((rows - ci) ** 2 + (cols - cj) ** 2) / (2.0 * sigma**2))
        np.maximum(heat[:, :, gt.class_id], splat, out=heat[:, :, gt.class_id])
        reg[ci, cj] = (gt.row - ci, gt.col - cj, gt.w, gt.l, gt.vr, gt.vc)
        mask[ci, cj] = 1.0
    return TargetMaps(heat=heat, reg=reg, mask=mask)


def focal_loss(q: Tensor, heat_target: np.ndarray) -> Tensor:
    """Penalty-reduced focal loss, normalized by the positive count."""
    pos = (heat_target == 1.0).astype(np.float64)
    neg = 1.0 - pos
    npos = max(1.0, pos.sum())
    qc = ad.clip(q, EPS_PROB, 1.0 - EPS_PROB)
    one_minus = ad.sub(Tensor(1.0), qc)
    pos_term = ad.mul(ad.mul(Tensor(pos), ad.square(one_minus)), ad.log(qc))
    neg_weight = (1.0 - heat_target) ** 4 * neg
    neg_term = ad.mul(ad.mul(Tensor(neg_weight), ad.square(qc)), ad.log(one_minus))
    loss = ad.mul(ad.add(ad.sum_all(pos_term), ad.sum_all(neg_term)), Tensor(-1.0 / npos))
    ad.assert_finite(loss, "focal loss")
    return loss


def l1_reg_loss(r: Tensor, targets: TargetMaps) -> Tensor:
    """Mean absolute error over masked center cells and channels."""
    npos = targets.mask.sum()
    if npos == 0:
        return Tensor(0.0)
    diff = ad.absolute(ad.sub(r, Tensor(targets.reg)))
    masked = ad.mul(diff, Tensor(targets.mask[:, :, None]))
    return ad.mul(ad.sum_all(masked), Tensor(1.0 / (npos * REG_CHANNELS)))


def htc_loss(h_t: Tensor, h_hat_t: Tensor, heads: DetectionHeads) -> Tensor:
    """Heatmap consistency: mean squared gap between the detached-target
    heatmap and the aligned-history heatmap, one shared head for both."""
    q_t = heads.heatmap(h_t.detach())
    q_hat = heads.heatmap(h_hat_t)
    return ad.mean_all(ad.square(ad.sub(q_t, q_hat)))


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    reg: float = 0.25
    cons: float = 2.0


def total_loss(l_cls: Tensor, l_reg: Tensor, l_cons: Tensor, weights: LossWeights = LossWeights()) -> Tensor:
    for name, part in (("cls", l_cls), ("reg", l_reg), ("cons", l_cons)):
        if float(part.data) < 0.0:
            raise LossError(f"negative {name} loss component: {float(part.data)}")
    out = ad.add(
        ad.add(ad.mul(l_cls, Tensor(weights.cls)), ad.mul(l_reg, Tensor(weights.reg))),
        ad.mul(l_cons, Tensor(weights.cons)),
    )
    ad.assert_finite(out, "total loss")
    return out
