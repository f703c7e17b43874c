"""SE(2) ego poses and ego-motion compensation of BEV feature grids.

Grids are attached to the ego frame: cell (row, col) covers the local
point (origin_x + col*cell_size, origin_y + row*cell_size); row follows
local y, col follows local x. ``relative_transform`` produces the exact
2x3 affine, in cell coordinates, that maps a cell of the current frame
to the cell of the previous frame covering the same world point, and
``ego_compensate`` applies such an affine as a backward warp (each
output cell gathers from the source via bilinear sampling, vacated
regions fill with zero).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    return math.pi - (math.pi - a) % (2.0 * math.pi)


@dataclass(frozen=True)
class EgoPose:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))


@dataclass(frozen=True)
class GridSpec:
    h: int
    w: int
    cell_size: float
    origin: tuple[float, float]  # local (x, y) of the cell (0,0) center

    def __post_init__(self):
        if self.h < 2 or self.w < 2:
            raise ValueError("grid must be at least 2x2")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")

    @classmethod
    def centered(cls, h: int, w: int, cell_size: float) -> "GridSpec":
        """Grid whose cell centers are symmetric about the ego origin."""
        return cls(h, w, cell_size, (-cell_size * (w - 1) / 2.0, -cell_size * (h - 1) / 2.0))

    def cell_to_local(self, row, col):
        ox, oy = self.origin
        return ox + np.asarray(col) * self.cell_size, oy + np.asarray(row) * self.cell_size

    def local_to_cell(self, x, y):
        ox, oy = self.origin
        return (np.asarray(y) - oy) / self.cell_size, (np.asarray(x) - ox) / self.cell_size


def pose_compose(a: EgoPose, b: EgoPose) -> EgoPose:
    """Rigid composition a∘b (b expressed in a's frame)."""
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return EgoPose(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.yaw + b.yaw)


def pose_inverse(a: EgoPose) -> EgoPose:
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return EgoPose(-(c * a.x + s * a.y), s * a.x - c * a.y, -a.yaw)


def _pose_matrix(p: EgoPose) -> np.ndarray:
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    return np.array([[c, -s, p.x], [s, c, p.y], [0.0, 0.0, 1.0]])


def identity_affine() -> np.ndarray:
    return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def compose_affine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine c with c(p) = a(b(p)); all maps are 2x3 over (row, col)."""
    a3 = np.vstack([a, [0.0, 0.0, 1.0]])
    b3 = np.vstack([b, [0.0, 0.0, 1.0]])
    return (a3 @ b3)[:2]


def apply_affine(t: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply a 2x3 affine to points [N,2] in (row, col) order."""
    return pts @ t[:, :2].T + t[:, 2]


def relative_transform(prev: EgoPose, cur: EgoPose, g: GridSpec) -> np.ndarray:
    """Cell-coordinate affine taking current-frame cells to previous-frame cells."""
    ox, oy = g.origin
    s = g.cell_size
    # (row, col, 1) -> local (x, y, 1)
    cell_to_local = np.array([[0.0, s, ox], [s, 0.0, oy], [0.0, 0.0, 1.0]])
    local_to_cell = np.array([[0.0, 1.0 / s, -oy / s], [1.0 / s, 0.0, -ox / s], [0.0, 0.0, 1.0]])
    rel = _pose_matrix(pose_inverse(prev)) @ _pose_matrix(cur)
    return (local_to_cell @ rel @ cell_to_local)[:2]


def grid_points(h: int, w: int) -> np.ndarray:
    """All cell centers as [H*W, 2] (row, col), row-major."""
    rows, cols = np.indices((h, w))
    return np.stack([rows.reshape(-1), cols.reshape(-1)], axis=1).astype(np.float64)


def ego_compensate(feat: Tensor, t: np.ndarray) -> Tensor:
    """Backward-warp feat [H,W,C] by the cell affine t; zero fill outside."""
    h, w, c = feat.data.shape
    src = apply_affine(t, grid_points(h, w))
    return ad.reshape(ad.bilinear_sample_many(feat, Tensor(src)), (h, w, c))
