"""Box geometry and cue-vector value types."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

RESPONSE_DIM = 8
CUE_DIM = 1 + RESPONSE_DIM + 1 + 4
CUE_DIM_NO_RESPONSE = CUE_DIM - RESPONSE_DIM


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box; (x, y) is the top-left corner, all values in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box size {vals}")

    @classmethod
    def from_seq(cls, v: Sequence[float]) -> "BoundingBox":
        x, y, w, h = (float(a) for a in v)
        return cls(x, y, w, h)

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return self.x + 0.5 * self.w, self.y + 0.5 * self.h


@dataclass(frozen=True)
class FrameDims:
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"frame dims must be positive, got {self.width}x{self.height}")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def center_distance(a: BoundingBox, b: BoundingBox) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


def normalize_box(b: BoundingBox, dims: FrameDims) -> np.ndarray:
    """Frame-relative [x/W, y/H, w/W, h/H], each entry clamped to [0, 1]."""
    if not (dims.width > 0 and dims.height > 0):
        raise ValueError("frame dims must be positive")
    out = np.array([b.x / dims.width, b.y / dims.height, b.w / dims.width, b.h / dims.height])
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class CueVector:
    """Per-frame cue: confidence, response embedding, appearance distance, box."""

    confidence: float
    response_embed: tuple[float, ...]
    appearance: float
    box_norm: tuple[float, ...]

    def __post_init__(self):
        if len(self.response_embed) != RESPONSE_DIM:
            raise ValueError(f"response_embed must have {RESPONSE_DIM} entries")
        if len(self.box_norm) != 4:
            raise ValueError("box_norm must have 4 entries")
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError("cue vector has non-finite entries")

    def as_array(self, drop_response: bool = False) -> np.ndarray:
        if drop_response:
            parts = [[self.confidence], [self.appearance], self.box_norm]
        else:
            parts = [[self.confidence], self.response_embed, [self.appearance], self.box_norm]
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])

    @classmethod
    def from_array(cls, v: Sequence[float]) -> "CueVector":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (CUE_DIM,):
            raise ValueError(f"expected {CUE_DIM} entries, got shape {v.shape}")
        return cls(float(v[0]), tuple(v[1:9].tolist()), float(v[9]), tuple(v[10:14].tolist()))


@dataclass(frozen=True)
class TimeSliceWindow:
    """The last t_s cue vectors, oldest first."""

    vectors: tuple[CueVector, ...]

    def __len__(self):
        return len(self.vectors)

    def as_array(self, drop_response: bool = False) -> np.ndarray:
        return np.stack([v.as_array(drop_response) for v in self.vectors])
