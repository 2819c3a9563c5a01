from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass
class Volume:
    """A (d, h, w) grid with per-axis spacing (sz, sy, sx) in mm."""

    data: np.ndarray
    spacing: tuple
    kind: str = "intensity"  # intensity | mask

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.data.ndim != 3:
            raise GeometryError(f"volume data must be 3-D, got shape {self.data.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise GeometryError(f"spacing must be three positive values, got {self.spacing}")
        if self.kind not in ("intensity", "mask"):
            raise ValueError(f"unknown volume kind {self.kind!r}")
        if self.kind == "mask":
            if not np.isin(self.data, (0, 1)).all():
                raise ValueError("mask volume must contain only 0 and 1")
            self.data = self.data.astype(np.uint8, copy=False)

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape)
