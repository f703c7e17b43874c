"""Synthetic BEV feature sequences with moving objects and ego motion.

Objects live in world coordinates with constant velocity; the ego
follows a constant (forward speed, yaw rate) trajectory drawn per
scene. Each frame renders, in the current ego grid, one anisotropic
Gaussian footprint per object multiplied by the object's channel
signature, plus i.i.d. background noise. Footprints are axis-aligned
with the grid (sigma per axis proportional to object size); their
position is exact under ego motion, while their orientation follows the
grid. Signatures are unit-norm, supported on a per-class channel block,
which keeps classes decodable without a learned backbone.

All randomness is keyed by (seed, scene_id, frame, stream) so identical
configs reproduce bit-identical sequences in any generation order.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .geometry import EgoPose, GridSpec, grid_points, pose_compose

_STREAM_INIT = 0
_STREAM_NOISE = 1
_STREAM_CORRUPT = 2

_PLACEMENT_ATTEMPTS = 200


class GenerationError(RuntimeError):
    """Scene constraints could not be satisfied."""


@dataclass
class GenConfig:
    h: int = 64
    w: int = 64
    cell_size: float = 0.5
    channels: int = 32
    num_classes: int = 3
    frames: int = 12
    min_objects: int = 1
    max_objects: int = 8
    noise_std: float = 0.05
    # object motion in cells/step; world sizes in meters
    speed_min: float = 0.3
    speed_max: float = 1.2
    static_frac: float = 0.25
    size_min: float = 0.8
    size_max: float = 2.0
    # ego trajectory per scene: forward m/step and yaw rad/step
    ego_speed_max: float = 0.4
    ego_yaw_max: float = 0.03
    sigma_floor: float = 0.75  # cells; keeps footprints at least a cell wide
    margin_cells: float = 3.0  # placement margin from the grid border
    blur_len: int = 5
    occ_frac: float = 0.25

    def __post_init__(self):
        if not (1 <= self.min_objects <= self.max_objects):
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.num_classes < 1 or self.channels < self.num_classes:
            raise ValueError("need at least one channel per class")
        if self.frames < 1:
            raise ValueError("frames must be positive")

    @property
    def grid(self) -> GridSpec:
        return GridSpec.centered(self.h, self.w, self.cell_size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class SceneObject:
    cx: float
    cy: float
    w: float
    l: float
    vx: float
    vy: float
    class_id: int
    signature: np.ndarray  # [C], unit norm


@dataclass(frozen=True, eq=False)
class SceneState:
    cfg: GenConfig
    objects: tuple[SceneObject, ...]
    ego: EgoPose
    ego_delta: EgoPose
    frame_index: int
    scene_id: int
    rng_seed: int


@dataclass(frozen=True, eq=False)
class BevFeature:
    feat: np.ndarray  # [H,W,C]
    scene_id: int
    frame_index: int
    ego: EgoPose


@dataclass(frozen=True)
class TruthBox:
    """One visible object in current-grid cell coordinates."""

    class_id: int
    row: float
    col: float
    w: float  # extents in cells
    l: float
    vr: float  # velocity, cells/step, in the current ego frame
    vc: float


def class_signature(rng: np.random.Generator, channels: int, num_classes: int, class_id: int) -> np.ndarray:
    """Unit-norm positive vector on the class's channel block."""
    block = channels // num_classes
    lo = class_id * block
    hi = channels if class_id == num_classes - 1 else lo + block
    v = np.zeros(channels)
    v[lo:hi] = np.abs(rng.standard_normal(hi - lo)) + 0.1
    return v / np.linalg.norm(v)


def init_scene(cfg: GenConfig, seed: int, scene_id: int = 0) -> SceneState:
    rng = np.random.default_rng((seed, scene_id, _STREAM_INIT))
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    m = cfg.margin_cells
    if cfg.h - 1 - 2 * m <= 0 or cfg.w - 1 - 2 * m <= 0:
        raise GenerationError("grid too small for the placement margin")
    g = cfg.grid
    placed_cells: list[tuple[float, float]] = []
    objects = []
    for _ in range(count):
        for _ in range(_PLACEMENT_ATTEMPTS):
            row = rng.uniform(m, cfg.h - 1 - m)
            col = rng.uniform(m, cfg.w - 1 - m)
            if all((row - r) ** 2 + (col - c) ** 2 >= 4.0 for r, c in placed_cells):
                break
        else:
            raise GenerationError(f"could not place {count} objects with 2-cell separation")
        placed_cells.append((row, col))
        cx, cy = g.cell_to_local(row, col)  # ego starts at the world origin
        if rng.random() < cfg.static_frac:
            vx = vy = 0.0
        else:
            speed = rng.uniform(cfg.speed_min, cfg.speed_max) * cfg.cell_size
            ang = rng.uniform(0.0, 2.0 * math.pi)
            vx, vy = speed * math.cos(ang), speed * math.sin(ang)
        class_id = int(rng.integers(cfg.num_classes))
        objects.append(
            SceneObject(
                cx=float(cx),
                cy=float(cy),
                w=float(rng.uniform(cfg.size_min, cfg.size_max)),
                l=float(rng.uniform(cfg.size_min, cfg.size_max)),
                vx=vx,
                vy=vy,
                class_id=class_id,
                signature=class_signature(rng, cfg.channels, cfg.num_classes, class_id),
            )
        )
    ego_delta = EgoPose(
        x=float(rng.uniform(0.0, cfg.ego_speed_max)),
        y=0.0,
        yaw=float(rng.uniform(-cfg.ego_yaw_max, cfg.ego_yaw_max)),
    )
    return SceneState(
        cfg=cfg,
        objects=tuple(objects),
        ego=EgoPose(),
        ego_delta=ego_delta,
        frame_index=0,
        scene_id=scene_id,
        rng_seed=seed,
    )


def _object_in_grid(cfg: GenConfig, obj: SceneObject, ego: EgoPose) -> tuple[float, float, float, float] | None:
    """Cell-coordinate (row, col, vr, vc) if the center is inside the grid."""
    c, s = math.cos(ego.yaw), math.sin(ego.yaw)
    dx, dy = obj.cx - ego.x, obj.cy - ego.y
    lx, ly = c * dx + s * dy, -s * dx + c * dy
    row, col = cfg.grid.local_to_cell(lx, ly)
    if not (0.0 <= row <= cfg.h - 1 and 0.0 <= col <= cfg.w - 1):
        return None
    vlx, vly = c * obj.vx + s * obj.vy, -s * obj.vx + c * obj.vy
    return float(row), float(col), vly / cfg.cell_size, vlx / cfg.cell_size


def render_frame(cfg: GenConfig, objects, ego: EgoPose) -> np.ndarray:
    """Noise-free feature map [H,W,C] of the given objects in the ego grid."""
    feat = np.zeros((cfg.h, cfg.w, cfg.channels))
    rows, cols = np.indices((cfg.h, cfg.w), dtype=np.float64)
    c, s = math.cos(ego.yaw), math.sin(ego.yaw)
    for obj in objects:
        dx, dy = obj.cx - ego.x, obj.cy - ego.y
        lx, ly = c * dx + s * dy, -s * dx + c * dy
        row, col = cfg.grid.local_to_cell(lx, ly)
        sr = max(cfg.sigma_floor, obj.l / (2.0 * cfg.cell_size))
        sc = max(cfg.sigma_floor, obj.w / (2.0 * cfg.cell_size))
        reach_r, reach_c = 5.0 * sr, 5.0 * sc
        if not (-reach_r <= row <= cfg.h - 1 + reach_r and -reach_c <= col <= cfg.w - 1 + reach_c):
            continue  # too far out to contribute; object stays in the state
        fp = np.exp(-0.5 * (((rows - row) / sr) ** 2 + ((cols - col) / sc) ** 2))
        feat += fp[:, :, None] * obj.signature
    return feat


def step_scene(state: SceneState) -> tuple[BevFeature, list[TruthBox], SceneState]:
    """Advance one step, then render the new state in the new ego frame."""
    cfg = state.cfg
    objects = tuple(replace(o, cx=o.cx + o.vx, cy=o.cy + o.vy) for o in state.objects)
    ego = pose_compose(state.ego, state.ego_delta)
    t = state.frame_index + 1
    feat = render_frame(cfg, objects, ego)
    if cfg.noise_std > 0:
        rng = np.random.default_rng((state.rng_seed, state.scene_id, t, _STREAM_NOISE))
        feat = feat + rng.normal(0.0, cfg.noise_std, size=feat.shape)
    truths = []
    for obj in objects:
        hit = _object_in_grid(cfg, obj, ego)
        if hit is not None:
            row, col, vr, vc = hit
            truths.append(
                TruthBox(
                    class_id=obj.class_id,
                    row=row,
                    col=col,
                    w=obj.w / cfg.cell_size,
                    l=obj.l / cfg.cell_size,
                    vr=vr,
                    vc=vc,
                )
            )
    bev = BevFeature(feat=feat, scene_id=state.scene_id, frame_index=t, ego=ego)
    return bev, truths, replace(state, objects=objects, ego=ego, frame_index=t)


def generate_scene(cfg: GenConfig, seed: int, scene_id: int = 0):
    """Full sequence: (frames, per-frame truth lists)."""
    state = init_scene(cfg, seed, scene_id)
    frames, truths = [], []
    for _ in range(cfg.frames):
        bev, gt, state = step_scene(state)
        frames.append(bev)
        truths.append(gt)
    return frames, truths


def corrupt(bev: BevFeature, kind: str, seed: int, cfg: GenConfig) -> BevFeature:
    """Degrade one frame's features; metadata is untouched."""
    rng = np.random.default_rng((seed, bev.scene_id, bev.frame_index, _STREAM_CORRUPT))
    h, w, c = bev.feat.shape
    if kind == "motion_blur":
        n = cfg.blur_len
        if n < 1:
            raise ValueError("blur_len must be >= 1")
        theta = rng.uniform(0.0, 2.0 * math.pi)
        u = np.array([math.sin(theta), math.cos(theta)])
        pts = grid_points(h, w)
        out = np.zeros_like(bev.feat)
        for k in range(n):
            d = (k - (n - 1) / 2.0) * u
            shifted = pts + d
            out += kernels.sample_forward(
                bev.feat, np.ascontiguousarray(shifted[:, 0]), np.ascontiguousarray(shifted[:, 1])
            ).reshape(h, w, c)
        feat = out / n
    elif kind == "occlusion":
        if not 0.0 <= cfg.occ_frac <= 1.0:
            raise ValueError("occ_frac must be in [0, 1]")
        feat = bev.feat.copy()
        if cfg.occ_frac > 0:
            rh = min(h, max(1, round(h * math.sqrt(cfg.occ_frac))))
            rw = min(w, max(1, round(w * math.sqrt(cfg.occ_frac))))
            r0 = int(rng.integers(0, h - rh + 1))
            c0 = int(rng.integers(0, w - rw + 1))
            feat[r0 : r0 + rh, c0 : c0 + rw] = 0.0
    else:
        raise ValueError(f"unknown corruption kind: {kind}")
    return replace(bev, feat=feat)
