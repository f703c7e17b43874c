"""Recurrent BEV fusion: motion-guided deformable alignment of a
single-slot feature memory against the current frame.

A fusion stack runs L layers. Each layer extracts a motion feature from
the (target, historical) query pair, predicts per-cell sampling offsets
and attention weights from it, gathers the historical query at the
offset locations (multi-head, bilinear), folds the gathered feature
back into the historical query (dropout + residual + layer norm + FFN),
and finally merges the refreshed historical query into the target query
by concat + linear + relu + layer norm. After L layers the target query
becomes the fused output H_t and the historical query its aligned twin
Hhat_t.

The memory bank stores a detached copy of H_t; reads ego-compensate it
into the current frame and return zeros at scene boundaries, so no
gradient ever crosses a time step.

The value projection inside the attention is bias-free on purpose:
out-of-bounds samples must stay exactly zero whether the map is
projected before sampling (what we compute) or each sampled vector is
projected individually (the definition the oracle tests follow).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import EgoPose, GridSpec, ego_compensate, grid_points, relative_transform
from .params import ParamStore, add_layer_norm, add_linear

MFE_MODES = ("none", "diff", "diff_cwa")


class ConfigError(ValueError):
    pass


@dataclass
class FusionConfig:
    channels: int
    layers: int = 3
    heads: int = 4
    points: int = 4
    ffn_ratio: int = 2
    cwa_ratio: int = 2  # gate bottleneck; narrower gates train erratically at small widths
    dropout: float = 0.1
    mfe_mode: str = "diff_cwa"
    offset_init: str = "zero"  # zero: identity gather at start; ring: spread star

    def __post_init__(self):
        if self.channels % self.heads != 0:
            raise ConfigError(f"channels ({self.channels}) must divide by heads ({self.heads})")
        if self.mfe_mode not in MFE_MODES:
            raise ConfigError(f"mfe_mode must be one of {MFE_MODES}")
        if self.offset_init not in ("zero", "ring"):
            raise ConfigError("offset_init must be zero or ring")
        if self.layers < 0 or self.heads < 1 or self.points < 1:
            raise ConfigError("layers must be >= 0, heads/points >= 1")


class ChannelGate:
    """Squeeze-excite gate: global average pool, two FCs, sigmoid scale."""

    def __init__(self, store: ParamStore, prefix: str, c: int, ratio: int, rng):
        hidden = max(1, c // ratio)
        self.w1, self.b1 = add_linear(store, f"{prefix}.sq", c, hidden, rng)
        self.w2, self.b2 = add_linear(store, f"{prefix}.ex", hidden, c, rng)
        # start the gate open (sigmoid ~ 0.88) so the gated path matches the
        # ungated one early on; a closed gate starves downstream predictors
        # of gradient and the gate only earns its keep by learning to shut
        # noise-dominated channels
        self.b2.data[:] = 2.0

    def __call__(self, x: Tensor) -> Tensor:
        pooled = ad.mean_axes(x, (0, 1))
        s = ad.sigmoid(ad.linear(ad.relu(ad.linear(pooled, self.w1, self.b1)), self.w2, self.b2))
        return ad.mul(x, s)


class MotionExtractor:
    """Motion feature from the query pair; the mode selects the ablation arm."""

    def __init__(self, store: ParamStore, prefix: str, cfg: FusionConfig, rng):
        self.mode = cfg.mfe_mode
        c = cfg.channels
        self.w, self.b = add_linear(store, f"{prefix}.fc", c, c, rng)
        self.gate = ChannelGate(store, f"{prefix}.cwa", c, cfg.cwa_ratio, rng) if cfg.mfe_mode == "diff_cwa" else None

    def __call__(self, q_tgt: Tensor, q_hist: Tensor) -> Tensor:
        if q_tgt.data.shape != q_hist.data.shape:
            raise ad.ShapeError("query pair shapes differ")
        base = q_tgt if self.mode == "none" else ad.sub(q_tgt, q_hist)
        m = ad.linear(base, self.w, self.b)
        return self.gate(m) if self.gate is not None else m


@dataclass
class DeformParams:
    """Per-head sampling offsets [N,K,2] and simplex weights [N,K]; N = H*W."""

    offsets: list[Tensor]
    weights: list[Tensor]

    def offsets_array(self, h: int, w: int) -> np.ndarray:
        return np.stack([o.data.reshape(h, w, -1, 2) for o in self.offsets], axis=2)

    def weights_array(self, h: int, w: int) -> np.ndarray:
        return np.stack([a.data.reshape(h, w, -1) for a in self.weights], axis=2)


def _ring_bias(head: int, heads: int, points: int) -> np.ndarray:
    """Starting offsets spread on a star around the reference point."""
    out = np.zeros((points, 2))
    for k in range(points):
        ang = 2.0 * math.pi * (head + k * heads / points) / heads
        out[k] = [(k + 1) * math.sin(ang), (k + 1) * math.cos(ang)]
    return out.reshape(-1)


class DeformAttention:
    """Motion-conditioned multi-head deformable gather over the value grid."""

    def __init__(self, store: ParamStore, prefix: str, cfg: FusionConfig, rng):
        c, self.heads, self.points = cfg.channels, cfg.heads, cfg.points
        self.head_dim = c // cfg.heads
        self.w_off, self.b_off, self.w_att, self.b_att = [], [], [], []
        for h in range(cfg.heads):
            wo, bo = add_linear(store, f"{prefix}.off{h}", c, cfg.points * 2, rng, zero=True)
            if cfg.offset_init == "ring":
                bo.data = _ring_bias(h, cfg.heads, cfg.points)
            wa, ba = add_linear(store, f"{prefix}.att{h}", c, cfg.points, rng)
            self.w_off.append(wo)
            self.b_off.append(bo)
            self.w_att.append(wa)
            self.b_att.append(ba)
        self.w_val, _ = add_linear(store, f"{prefix}.val", c, c, rng, bias=False)
        self.w_out, self.b_out = add_linear(store, f"{prefix}.out", c, c, rng)

    def predict_deform(self, m: Tensor) -> DeformParams:
        h, w, _ = m.data.shape
        n, k = h * w, self.points
        offsets, weights = [], []
        for hd in range(self.heads):
            offsets.append(ad.reshape(ad.linear(m, self.w_off[hd], self.b_off[hd]), (n, k, 2)))
            weights.append(ad.softmax(ad.reshape(ad.linear(m, self.w_att[hd], self.b_att[hd]), (n, k))))
        return DeformParams(offsets, weights)

    def __call__(self, m: Tensor, value: Tensor) -> Tensor:
        h, w, c = value.data.shape
        n, k, d = h * w, self.points, self.head_dim
        params = self.predict_deform(m)
        ref = Tensor(grid_points(h, w)[:, None, :])
        v = ad.linear(value, self.w_val)
        outs = []
        for hd in range(self.heads):
            pts = ad.reshape(ad.add(params.offsets[hd], ref), (n * k, 2))
            v_h = ad.narrow_last(v, hd * d, d)
            sampled = ad.reshape(ad.bilinear_sample_many(v_h, pts), (n, k, d))
            a = ad.reshape(params.weights[hd], (n, k, 1))
            outs.append(ad.sum_axis(ad.mul(sampled, a), axis=1))
        merged = ad.reshape(ad.concat_last(outs), (h, w, c))
        return ad.linear(merged, self.w_out, self.b_out)


class HistoricalUpdater:
    """Fold the gathered feature into the historical query, then FFN."""

    def __init__(self, store: ParamStore, prefix: str, cfg: FusionConfig, rng):
        c = cfg.channels
        hidden = cfg.ffn_ratio * c
        self.rate = cfg.dropout
        self.g1, self.bn1 = add_layer_norm(store, f"{prefix}.ln1", c)
        self.w1, self.b1 = add_linear(store, f"{prefix}.ffn1", c, hidden, rng)
        self.w2, self.b2 = add_linear(store, f"{prefix}.ffn2", hidden, c, rng)
        self.g2, self.bn2 = add_layer_norm(store, f"{prefix}.ln2", c)

    def __call__(self, q_hist: Tensor, z: Tensor, train: bool, rng=None) -> tuple[Tensor, Tensor]:
        q_hat = ad.layer_norm(ad.add(ad.dropout(z, self.rate, train, rng), q_hist), self.g1, self.bn1)
        hid = ad.relu(ad.linear(q_hat, self.w1, self.b1))
        q_next = ad.layer_norm(ad.add(q_hat, ad.linear(hid, self.w2, self.b2)), self.g2, self.bn2)
        return q_hat, q_next


class TargetFuser:
    """Merge the aligned history into the target: concat, linear, relu, norm.

    The final norm keeps the fused output on the same scale as the
    norm-bound historical stream. Without it the target query drifts in
    magnitude when the fuser sits on a recurrent path, and stacked
    layers feed the motion extractor a scale-mismatched pair.
    """

    def __init__(self, store: ParamStore, prefix: str, c: int, rng):
        self.w, self.b = add_linear(store, prefix, 2 * c, c, rng)
        self.g, self.bn = add_layer_norm(store, f"{prefix}.ln", c)

    def __call__(self, q_tgt: Tensor, q_hat: Tensor) -> Tensor:
        fused = ad.relu(ad.linear(ad.concat_last([q_tgt, q_hat]), self.w, self.b))
        return ad.layer_norm(fused, self.g, self.bn)


class _FusionLayer:
    def __init__(self, store, prefix, cfg, rng):
        self.mfe = MotionExtractor(store, f"{prefix}.mfe", cfg, rng)
        self.attn = DeformAttention(store, f"{prefix}.attn", cfg, rng)
        self.update = HistoricalUpdater(store, f"{prefix}.upd", cfg, rng)
        self.fuse = TargetFuser(store, f"{prefix}.fuse", cfg.channels, rng)


class MBFNet:
    """L-layer stack refining (target, historical) into (H_t, Hhat_t)."""

    def __init__(self, store: ParamStore, cfg: FusionConfig, rng, prefix: str = "mbf"):
        self.cfg = cfg
        self.layers = [_FusionLayer(store, f"{prefix}.l{i}", cfg, rng) for i in range(cfg.layers)]

    def __call__(self, f_t: Tensor, h_prev: Tensor, train: bool = False, rng=None) -> tuple[Tensor, Tensor]:
        if f_t.data.shape != h_prev.data.shape:
            raise ad.ShapeError("current feature and history shapes differ")
        q_tgt, q_hist = f_t, h_prev
        for layer in self.layers:
            m = layer.mfe(q_tgt, q_hist)
            z = layer.attn(m, q_hist)
            q_hat, q_hist = layer.update(q_hist, z, train, rng)
            q_tgt = layer.fuse(q_tgt, q_hat)
        return q_tgt, q_hist


@dataclass(frozen=True)
class MemoryBank:
    """Single detached slot; absent stored value means scene start."""

    stored: np.ndarray | None = None
    stored_pose: EgoPose | None = None
    scene_id: int | None = None


def memory_read(bank: MemoryBank, scene_id: int, cur_pose: EgoPose, g: GridSpec, channels: int) -> Tensor:
    if bank.stored is None or bank.scene_id != scene_id:
        return Tensor(np.zeros((g.h, g.w, channels)))
    t = relative_transform(bank.stored_pose, cur_pose, g)
    return ego_compensate(Tensor(bank.stored), t)


def memory_write(bank: MemoryBank, h_t: Tensor | np.ndarray, pose: EgoPose, scene_id: int) -> MemoryBank:
    data = h_t.data if isinstance(h_t, Tensor) else np.asarray(h_t)
    return MemoryBank(stored=data.copy(), stored_pose=pose, scene_id=scene_id)


class ParallelFusion:
    """Concat K compensated frames and mix with one linear + relu (Baseline-M)."""

    def __init__(self, store: ParamStore, prefix: str, c: int, k: int, rng):
        if k < 1:
            raise ConfigError("parallel fusion needs K >= 1")
        self.k = k
        self.w, self.b = add_linear(store, prefix, k * c, c, rng)

    def __call__(self, feats: list[Tensor]) -> Tensor:
        if len(feats) != self.k:
            raise ConfigError(f"expected exactly {self.k} feature maps, got {len(feats)}")
        return ad.relu(ad.linear(ad.concat_last(feats), self.w, self.b))
