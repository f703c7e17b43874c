"""Recurrent temporal fusion of bird's-eye-view feature grids.

Synthetic moving-object scenes, a small float64 autodiff core, motion
guided deformable alignment of a recurrent feature memory, center-based
detection heads, and the training/evaluation loops that tie them together.
"""

__version__ = "0.1.0"
