"""Detector variants over a shared backbone substitute and heads.

The backbone is a single linear + relu per cell, enough to learn the
channel mixing our synthetic features need. What differs between arms
is the temporal path:

  baseline_s   no history, each frame on its own
  baseline_m   concat of the last K backbone outputs (detached, ego
               compensated, zero padded early in the scene)
  method_a     recurrent memory merged by one concat-linear-relu
  method_b     recurrent memory refined through the full fusion stack
  method_c     method_b; the trainer adds the consistency loss

All recurrent state is detached before storage, so gradients never
cross a frame boundary.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fusion import (
    MBFNet,
    ConfigError,
    FusionConfig,
    MemoryBank,
    ParallelFusion,
    TargetFuser,
    memory_read,
    memory_write,
)
from .geometry import GridSpec, relative_transform, ego_compensate
from .heads import DetectionHeads, LossWeights
from .params import ParamStore, add_linear
from .scene import BevFeature

METHODS = ("baseline_s", "baseline_m", "method_a", "method_b", "method_c")


@dataclass
class ModelConfig:
    channels: int
    num_classes: int
    method: str = "method_c"
    k_frames: int = 2  # baseline_m window, current frame included
    cell_size: float = 0.5
    layers: int = 3
    heads: int = 4
    points: int = 4
    dropout: float = 0.1
    mfe_mode: str = "diff_cwa"
    offset_init: str = "zero"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.method == "baseline_m" and self.k_frames < 2:
            raise ConfigError("baseline_m needs k_frames >= 2")

    def fusion(self) -> FusionConfig:
        return FusionConfig(
            channels=self.channels,
            layers=self.layers,
            heads=self.heads,
            points=self.points,
            dropout=self.dropout,
            mfe_mode=self.mfe_mode,
            offset_init=self.offset_init,
        )

    def loss_weights(self) -> LossWeights:
        # only the full method trains against the consistency target
        return LossWeights(cons=2.0 if self.method == "method_c" else 0.0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class DetectorState:
    """Per-sequence memory; a fresh instance means scene start."""

    bank: MemoryBank = MemoryBank()
    window: tuple = ()  # ((feat array, pose), ...) oldest first
    scene_id: int | None = None


@dataclass(eq=False)
class FrameOutput:
    h: Tensor  # fused feature H_t
    h_hat: Tensor | None  # aligned history, only for the full stack
    heat: Tensor
    reg: Tensor


class Detector:
    def __init__(self, store: ParamStore, cfg: ModelConfig, rng: np.random.Generator):
        c = cfg.channels
        self.cfg = cfg
        self.bw, self.bb = add_linear(store, "backbone", c, c, rng)
        if cfg.method == "baseline_m":
            self.pfuse = ParallelFusion(store, "pfuse", c, cfg.k_frames, rng)
        elif cfg.method == "method_a":
            self.tfuse = TargetFuser(store, "tfuse", c, rng)
        elif cfg.method in ("method_b", "method_c"):
            self.mbf = MBFNet(store, cfg.fusion(), rng)
        self.heads = DetectionHeads(store, "heads", c, cfg.num_classes, rng)

    def backbone(self, feat: np.ndarray) -> Tensor:
        return ad.relu(ad.linear(Tensor(feat), self.bw, self.bb))

    def initial_state(self) -> DetectorState:
        return DetectorState()

    def forward_frame(
        self,
        state: DetectorState,
        bev: BevFeature,
        train: bool = False,
        rng: np.random.Generator | None = None,
        use_fusion: bool = True,
    ) -> tuple[FrameOutput, DetectorState]:
        h_grid, w_grid, _ = bev.feat.shape
        g = GridSpec.centered(h_grid, w_grid, self.cfg.cell_size)
        f = self.backbone(bev.feat)
        h_hat = None
        method = self.cfg.method if use_fusion else "baseline_s"
        if method == "baseline_s":
            h = f
            new_state = state
        elif method == "baseline_m":
            window = state.window if state.scene_id == bev.scene_id else ()
            feats = [f]
            past = window[::-1]  # newest first
            for i in range(self.cfg.k_frames - 1):
                if i < len(past):
                    data, pose = past[i]
                    t = relative_transform(pose, bev.ego, g)
                    feats.append(ego_compensate(Tensor(data), t))
                else:
                    feats.append(Tensor(np.zeros_like(f.data)))
            h = self.pfuse(feats)
            keep = self.cfg.k_frames - 1
            new_window = (window + ((f.data.copy(), bev.ego),))[-keep:]
            new_state = DetectorState(window=new_window, scene_id=bev.scene_id)
        else:
            prev = memory_read(state.bank, bev.scene_id, bev.ego, g, self.cfg.channels)
            if method == "method_a":
                h = self.tfuse(f, prev)
            else:
                h, h_hat = self.mbf(f, prev, train=train, rng=rng)
            bank = memory_write(state.bank, h, bev.ego, bev.scene_id)
            new_state = DetectorState(bank=bank, scene_id=bev.scene_id)
        return FrameOutput(h=h, h_hat=h_hat, heat=self.heads.heatmap(h), reg=self.heads.regression(h)), new_state


_STREAM_WEIGHTS = 3  # scene generation owns streams 0..2


def build_detector(cfg: ModelConfig, seed: int) -> tuple[ParamStore, Detector]:
    """Fresh store + detector with parameters drawn from the weight stream."""
    store = ParamStore()
    rng = np.random.default_rng((seed, 0, 0, _STREAM_WEIGHTS))
    return store, Detector(store, cfg, rng)
