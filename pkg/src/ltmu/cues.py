"""Per-frame cues (confidence, response embedding, appearance, box) and the cue window."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from typing import Protocol, Sequence

import numpy as np

from .core import RESPONSE_DIM, CueVector, TimeSliceWindow
from .nn import (ShapeError, conv2d_backward, conv2d_forward, gap_backward, gap_forward,
                 init_uniform, tanh_backward)

RESIZE_TO = 50


class NotReadyType:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "NotReady"

    def __bool__(self):
        return False


NotReady = NotReadyType()


def _as_map(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 2 or r.size == 0:
        raise ValueError(f"response map must be a non-empty 2-D array, got shape {r.shape}")
    return r


def confidence_score(r) -> float:
    return float(_as_map(r).max())


@lru_cache(maxsize=32)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # corner-aligned: output sample i sits at input coordinate i * (n_in - 1) / (n_out - 1)
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    u = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(u).astype(int), n_in - 2)
    frac = u - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    m.setflags(write=False)
    return m


def resize_bilinear(r, out: tuple[int, int] = (RESIZE_TO, RESIZE_TO)) -> np.ndarray:
    """Bilinear resize with corner alignment.  Accepts (H, W) or a stack (..., H, W)."""
    r = np.asarray(r, dtype=np.float64)
    H, W = r.shape[-2:]
    if (H, W) == tuple(out):
        return r.copy()
    ry = _interp_matrix(H, out[0])
    rx = _interp_matrix(W, out[1])
    return ry @ r @ rx.T


@dataclass
class ResponseNetParams:
    """Two 3x3 stride-2 tanh convs (1->4->8 channels) then global average pooling."""

    conv1_k: np.ndarray
    conv1_b: np.ndarray
    conv2_k: np.ndarray
    conv2_b: np.ndarray
    stride: int = 2

    def __post_init__(self):
        if self.conv2_k.shape[3] != RESPONSE_DIM:
            raise ShapeError(f"response net must emit {RESPONSE_DIM} channels")
        if self.conv1_k.shape[3] != self.conv2_k.shape[2]:
            raise ShapeError("conv1 output channels != conv2 input channels")

    @classmethod
    def init(cls, rng: np.random.Generator, hidden_channels: int = 4) -> "ResponseNetParams":
        return cls(init_uniform(rng, (3, 3, 1, hidden_channels)), np.zeros(hidden_channels),
                   init_uniform(rng, (3, 3, hidden_channels, RESPONSE_DIM)), np.zeros(RESPONSE_DIM))

    @classmethod
    def zeros(cls, hidden_channels: int = 4) -> "ResponseNetParams":
        return cls(np.zeros((3, 3, 1, hidden_channels)), np.zeros(hidden_channels),
                   np.zeros((3, 3, hidden_channels, RESPONSE_DIM)), np.zeros(RESPONSE_DIM))

    def arrays(self) -> dict[str, np.ndarray]:
        return {"conv1_k": self.conv1_k, "conv1_b": self.conv1_b,
                "conv2_k": self.conv2_k, "conv2_b": self.conv2_b}


def response_net_forward(maps: np.ndarray, p: ResponseNetParams):
    """maps (N, 50, 50) already resized -> (N, 8) and a cache."""
    x = maps[..., None]
    z1, c1 = conv2d_forward(x, p.conv1_k, p.conv1_b, p.stride)
    a1 = np.tanh(z1)
    z2, c2 = conv2d_forward(a1, p.conv2_k, p.conv2_b, p.stride)
    a2 = np.tanh(z2)
    v, cg = gap_forward(a2)
    return v, (c1, a1, c2, a2, cg)


def response_net_backward(dv: np.ndarray, cache) -> dict[str, np.ndarray]:
    if cache is None:
        raise RuntimeError("backward called before forward")
    c1, a1, c2, a2, cg = cache
    da2 = gap_backward(dv, cg)
    dz2 = tanh_backward(da2, a2)
    da1, dk2, db2 = conv2d_backward(dz2, c2)
    dz1 = tanh_backward(da1, a1)
    _, dk1, db1 = conv2d_backward(dz1, c1, need_input_grad=False)
    return {"conv1_k": dk1, "conv1_b": db1, "conv2_k": dk2, "conv2_b": db2}


def response_vector(r, p: ResponseNetParams) -> np.ndarray:
    m = resize_bilinear(_as_map(r))
    v, _ = response_net_forward(m[None], p)
    return v[0]


class EmbeddingProvider(Protocol):
    """Maps an image descriptor to a fixed-length unit vector, deterministically."""

    dim: int

    def embed(self, descriptor) -> np.ndarray: ...


def appearance_score(current, template) -> float:
    a = np.asarray(current, dtype=np.float64)
    b = np.asarray(template, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"embedding length mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def assemble_cue_vector(conf: float, respvec: Sequence[float], appear: float,
                        box_norm: Sequence[float]) -> CueVector:
    if len(respvec) != RESPONSE_DIM:
        raise ValueError(f"response vector must have {RESPONSE_DIM} entries, got {len(respvec)}")
    if len(box_norm) != 4:
        raise ValueError(f"box must have 4 entries, got {len(box_norm)}")
    return CueVector(float(conf), tuple(float(v) for v in respvec), float(appear),
                     tuple(float(v) for v in box_norm))


class CueHistory:
    """Ring buffer of the most recent ``capacity`` cue vectors."""

    def __init__(self, capacity: int = 20):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._buf: deque[CueVector] = deque(maxlen=capacity)

    def __len__(self):
        return len(self._buf)

    def clear(self):
        self._buf.clear()

    def push(self, v: CueVector):
        self._buf.append(v)

    def window(self):
        if len(self._buf) < self.capacity:
            return NotReady
        return TimeSliceWindow(tuple(self._buf))


def push_and_window(h: CueHistory, v: CueVector):
    h.push(v)
    return h.window()

