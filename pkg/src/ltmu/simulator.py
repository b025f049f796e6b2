"""Seeded synthetic world and simulated tracker components.

The simulated local tracker carries a model quality ``q`` and a model
appearance phase.  Updating on a correct frame raises ``q`` and pulls the
model phase toward the world's; updating on a wrong or target-less frame
pollutes the model; skipping an update leaves the model where it was while
the world keeps drifting.  Tracking noise, hijack risk and response peak
height all depend on ``q`` and on the phase mismatch, so whether the
tracker updates matters.

Every random draw comes from a generator keyed by (seed, sequence, frame,
component), so results do not depend on call order across sequences.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import BoundingBox, FrameDims, center_distance, iou

# sub-stream keys
_WORLD, _TRACK, _VERIFY, _REDETECT, _EMBED = range(5)

EMBED_DIM = 16


@dataclass(frozen=True)
class WorldConfig:
    frame_width: float = 640.0
    frame_height: float = 480.0
    length: int = 600
    size_min: float = 40.0
    size_max: float = 100.0
    velocity_sigma: float = 0.6
    velocity_damping: float = 0.95
    scale_sigma: float = 0.003
    disappear_count: float = 2.0
    disappear_duration: float = 40.0
    drift_rate: float = 0.001
    distractor_count: int = 3
    distractor_strength: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.frame_width <= 0 or self.frame_height <= 0:
            raise ValueError("frame dims must be positive")
        if self.length < 1:
            raise ValueError("length must be >= 1")
        if not 0 < self.size_min <= self.size_max:
            raise ValueError("need 0 < size_min <= size_max")
        if self.size_max > min(self.frame_width, self.frame_height):
            raise ValueError("targets must fit in the frame")
        for name in ("velocity_sigma", "scale_sigma", "disappear_count", "drift_rate", "distractor_strength"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.disappear_duration < 1:
            raise ValueError("disappear_duration must be >= 1")
        if self.distractor_count < 0:
            raise ValueError("distractor_count must be >= 0")

    @property
    def dims(self) -> FrameDims:
        return FrameDims(self.frame_width, self.frame_height)


@dataclass(frozen=True)
class TrackerSimConfig:
    """Behaviour of the simulated components (not part of the world)."""

    alpha: float = 0.2            # quality gain on a correct update
    beta: float = 0.4             # quality loss on a polluting update
    adapt_rate: float = 0.5       # fraction of phase gap closed per correct update
    initial_quality: float = 1.0
    base_noise: float = 0.3
    pos_noise: float = 0.1        # positional sigma per unit noise factor, relative to target size
    scale_noise: float = 0.05
    mismatch_gain: float = 5.0
    hijack_rate: float = 0.01
    search_factor: float = 2.0
    lost_drift: float = 3.0       # px per frame while following background
    absent_penalty: float = 0.3
    peak_noise: float = 0.05
    map_size: int = 25
    bump_sigma: float = 1.5       # response bump width, in map cells
    map_noise: float = 0.02
    verifier_gain: float = 4.0
    verifier_noise: float = 0.3
    detect_prob: float = 0.8
    redetect_noise: float = 0.03
    embed_noise: float = 0.05


@dataclass(frozen=True)
class GroundTruthFrame:
    index: int
    box: BoundingBox | None
    phase: float

    @property
    def present(self) -> bool:
        return self.box is not None


def _rng(seed: int, seq_id: int, frame: int, key: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, seq_id, frame, key])


def _disappearances(cfg: WorldConfig, rng: np.random.Generator) -> list[tuple[int, int]]:
    count = int(rng.poisson(cfg.disappear_count)) if cfg.disappear_count > 0 else 0
    earliest = min(50, cfg.length - 1)
    spans: list[tuple[int, int]] = []
    for _ in range(count):
        dur = max(1, int(round(rng.normal(cfg.disappear_duration, cfg.disappear_duration / 4))))
        for _attempt in range(20):
            hi = cfg.length - dur
            if hi <= earliest:
                break
            start = int(rng.integers(earliest, hi))
            # keep a visible gap between absences so each one is a separate event
            if all(start + dur + 10 <= s or e + 10 <= start for s, e in spans):
                spans.append((start, start + dur))
                break
    return sorted(spans)


def generate_sequence(cfg: WorldConfig, seq_id: int = 0) -> list[GroundTruthFrame]:
    rng = _rng(cfg.seed, seq_id, 0, _WORLD)
    W, H = cfg.frame_width, cfg.frame_height
    w = rng.uniform(cfg.size_min, cfg.size_max)
    h = float(np.clip(w * rng.uniform(0.6, 1.6), cfg.size_min, cfg.size_max))
    x = rng.uniform(0, W - w)
    y = rng.uniform(0, H - h)
    vx = vy = 0.0
    spans = _disappearances(cfg, rng)
    absent = np.zeros(cfg.length, dtype=bool)
    for s, e in spans:
        absent[s:e] = True
    frames = []
    for t in range(cfg.length):
        if t > 0:
            vx = cfg.velocity_damping * vx + rng.normal(0, cfg.velocity_sigma) if cfg.velocity_sigma else 0.0
            vy = cfg.velocity_damping * vy + rng.normal(0, cfg.velocity_sigma) if cfg.velocity_sigma else 0.0
            if cfg.scale_sigma:
                s = math.exp(rng.normal(0, cfg.scale_sigma))
                cx, cy = x + w / 2, y + h / 2
                w = float(np.clip(w * s, cfg.size_min, cfg.size_max))
                h = float(np.clip(h * s, cfg.size_min, cfg.size_max))
                x, y = cx - w / 2, cy - h / 2
            x += vx
            y += vy
            # reflect off the frame edges
            if x < 0:
                x, vx = -x, -vx
            if x > W - w:
                x, vx = 2 * (W - w) - x, -vx
            if y < 0:
                y, vy = -y, -vy
            if y > H - h:
                y, vy = 2 * (H - h) - y, -vy
            x = min(max(x, 0.0), W - w)
            y = min(max(y, 0.0), H - h)
        box = None if absent[t] else BoundingBox(x, y, w, h)
        frames.append(GroundTruthFrame(t, box, cfg.drift_rate * t))
    return frames


# ---------------------------------------------------------------------------
# embedding

@dataclass(frozen=True)
class PatchDescriptor:
    """What the simulated embedding "sees": overlap with the target and its appearance phase."""

    overlap: float
    phase: float
    noise_key: tuple[int, ...] = ()


class SimEmbedding:
    """Target patches lie on a slow great-circle curve indexed by appearance phase;
    background patches sit near a fixed orthogonal direction."""

    dim = EMBED_DIM

    def __init__(self, noise: float = 0.05):
        self.noise = noise

    @staticmethod
    def target_direction(phase: float) -> np.ndarray:
        v = np.zeros(EMBED_DIM)
        v[0], v[1] = math.cos(phase), math.sin(phase)
        return v

    @staticmethod
    def background_direction() -> np.ndarray:
        v = np.zeros(EMBED_DIM)
        v[2] = 1.0
        return v

    def embed(self, d: PatchDescriptor) -> np.ndarray:
        wt = min(1.0, max(0.0, d.overlap / 0.5))
        v = wt * self.target_direction(d.phase) + (1.0 - wt) * self.background_direction()
        if self.noise > 0 and d.noise_key:
            v = v + np.random.default_rng(list(d.noise_key)).normal(0, self.noise, EMBED_DIM)
        return v / np.linalg.norm(v)


def sim_embedding(overlap: float, phase: float, cfg: TrackerSimConfig, noise_key: tuple[int, ...] = ()) -> np.ndarray:
    return SimEmbedding(cfg.embed_noise).embed(PatchDescriptor(overlap, phase, noise_key))


# ---------------------------------------------------------------------------
# tracker components

@dataclass
class SimTrackerState:
    quality: float
    model_phase: float
    estimate: BoundingBox

    def __post_init__(self):
        self.quality = min(1.0, max(0.0, self.quality))


def noise_factor(state: SimTrackerState, world_phase: float, cfg: TrackerSimConfig) -> float:
    mismatch = abs(state.model_phase - world_phase)
    return cfg.base_noise + (1.0 - state.quality) + cfg.mismatch_gain * mismatch


def _clip_box(b: BoundingBox, dims: FrameDims) -> BoundingBox:
    w = min(max(b.w, 1.0), dims.width)
    h = min(max(b.h, 1.0), dims.height)
    x = min(max(b.x, 0.0), dims.width - w)
    y = min(max(b.y, 0.0), dims.height - h)
    return BoundingBox(x, y, w, h)


def _far_box(ref: BoundingBox, dims: FrameDims, rng: np.random.Generator, avoid: BoundingBox | None) -> BoundingBox:
    """A box the size of ``ref`` placed at random, not overlapping ``avoid``."""
    w, h = ref.w, ref.h
    b = ref
    for _ in range(50):
        b = BoundingBox(rng.uniform(0, dims.width - w), rng.uniform(0, dims.height - h), w, h)
        if avoid is None or iou(b, avoid) == 0.0:
            return b
    return b


def render_response(peak: float, offset: tuple[float, float], distractors: Iterable[tuple[float, float, float]],
                    cfg: TrackerSimConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Gaussian bump of height ``peak`` at ``offset`` cells from the centre, max-combined with distractor bumps."""
    n = cfg.map_size
    c = (n - 1) / 2
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    inv = 1.0 / (2 * cfg.bump_sigma ** 2)
    out = peak * np.exp(-((xx - c - offset[0]) ** 2 + (yy - c - offset[1]) ** 2) * inv)
    for dx, dy, hgt in distractors:
        out = np.maximum(out, hgt * np.exp(-((xx - dx) ** 2 + (yy - dy) ** 2) * inv))
    if rng is not None and cfg.map_noise > 0:
        out = out + np.abs(rng.normal(0, cfg.map_noise, out.shape))
    return out


def sim_local_track(state: SimTrackerState, gt: GroundTruthFrame, cfg: TrackerSimConfig, world: WorldConfig,
                    rng: np.random.Generator | None = None) -> tuple[BoundingBox, np.ndarray, bool]:
    """One tracking step.  Returns (predicted box, response map, on_target) and moves the estimate."""
    dims = world.dims
    est = state.estimate
    mismatch = abs(state.model_phase - gt.phase)
    f = noise_factor(state, gt.phase, cfg)

    def normal(sigma, size=None):
        if rng is None or sigma == 0:
            return np.zeros(size) if size else 0.0
        return rng.normal(0, sigma, size)

    on_target = False
    if gt.box is not None:
        radius = cfg.search_factor * math.sqrt(max(est.w * est.h, 1.0))
        on_target = center_distance(est, gt.box) < radius
    hijacked = False
    if on_target and rng is not None and cfg.hijack_rate > 0:
        hijacked = rng.random() < min(1.0, cfg.hijack_rate * f)
    if on_target and not hijacked:
        g = gt.box
        dx, dy = normal(cfg.pos_noise * f, 2)
        s = math.exp(normal(cfg.scale_noise * f))
        cx, cy = g.center
        cx += dx * g.w
        cy += dy * g.h
        w, h = g.w * s, g.h * s
        box = _clip_box(BoundingBox(cx - w / 2, cy - h / 2, w, h), dims)
    elif hijacked:
        box = _far_box(gt.box, dims, rng, gt.box)
        on_target = False
    else:
        dx, dy = normal(cfg.lost_drift, 2)
        box = _clip_box(BoundingBox(est.x + dx, est.y + dy, est.w, est.h), dims)
    penalty = 0.0 if on_target else cfg.absent_penalty
    peak = float(np.clip(state.quality - mismatch - penalty + normal(cfg.peak_noise), 0.0, 1.0))
    # response map covers a search window of side 2 * search_factor * target scale around the old estimate
    side = 2 * cfg.search_factor * math.sqrt(max(est.w * est.h, 1.0))
    (ex, ey), (bx, by) = est.center, box.center
    cells = cfg.map_size / side
    offset = ((bx - ex) * cells, (by - ey) * cells)
    distractors = []
    if rng is not None:
        for _ in range(world.distractor_count):
            distractors.append((rng.uniform(0, cfg.map_size - 1), rng.uniform(0, cfg.map_size - 1),
                                world.distractor_strength * rng.uniform(0.2, 1.0)))
    rmap = render_response(peak, offset, distractors, cfg, rng)
    state.estimate = box
    return box, rmap, on_target


def apply_update_dynamics(state: SimTrackerState, allow: bool, correctness: float | None,
                          world_phase: float, cfg: TrackerSimConfig) -> SimTrackerState:
    """``correctness`` is the IoU of the update observation with the target, None when absent."""
    if not allow:
        return state
    if correctness is not None and correctness > 0.5:
        state.quality = state.quality + cfg.alpha * (1.0 - state.quality)
        state.model_phase += cfg.adapt_rate * (world_phase - state.model_phase)
    else:
        state.quality = state.quality - cfg.beta * state.quality
    state.quality = min(1.0, max(0.0, state.quality))
    return state


def sim_verifier(box: BoundingBox, gt: GroundTruthFrame, cfg: TrackerSimConfig,
                 rng: np.random.Generator | None = None) -> float:
    overlap = iou(box, gt.box) if gt.box is not None else 0.0
    noise = rng.normal(0, cfg.verifier_noise) if rng is not None and cfg.verifier_noise > 0 else 0.0
    return cfg.verifier_gain * (overlap - 0.5) + noise


def sim_redetect(gt: GroundTruthFrame, cfg: TrackerSimConfig, world: WorldConfig,
                 rng: np.random.Generator, ref_size: tuple[float, float] | None = None) -> list[BoundingBox]:
    dims = world.dims
    out = []
    if gt.box is not None and rng.random() < cfg.detect_prob:
        g = gt.box
        dx, dy, ds = (rng.normal(0, cfg.redetect_noise, 3) if cfg.redetect_noise > 0 else (0.0, 0.0, 0.0))
        s = math.exp(ds)
        cx, cy = g.center
        w, h = g.w * s, g.h * s
        out.append(_clip_box(BoundingBox(cx + dx * g.w - w / 2, cy + dy * g.h - h / 2, w, h), dims))
    if gt.box is not None:
        ref = gt.box
    else:
        rw, rh = ref_size or (world.size_min, world.size_min)
        ref = BoundingBox(0, 0, rw, rh)
    for _ in range(world.distractor_count):
        out.append(_far_box(ref, dims, rng, gt.box))
    return out


class SimComponents:
    """Simulated component bundle for one sequence (local tracker, verifier, re-detector, embedding)."""

    def __init__(self, frames: list[GroundTruthFrame], world: WorldConfig,
                 cfg: TrackerSimConfig = TrackerSimConfig(), seq_id: int = 0, seed: int | None = None):
        self.frames = frames
        self.world = world
        self.cfg = cfg
        self.seq_id = seq_id
        self.seed = world.seed if seed is None else seed
        self.embedding = SimEmbedding(cfg.embed_noise)
        self.state: SimTrackerState | None = None
        self.template: np.ndarray | None = None
        self.last_on_target = False

    @property
    def frame_dims(self) -> FrameDims:
        return self.world.dims

    def __len__(self):
        return len(self.frames)

    def truth(self, t: int) -> BoundingBox | None:
        return self.frames[t].box

    def _rng(self, t: int, key: int) -> np.random.Generator:
        return _rng(self.seed, self.seq_id, t, key)

    def initialize(self, box: BoundingBox):
        self.state = SimTrackerState(self.cfg.initial_quality, self.frames[0].phase, box)
        self.template = self.embedding.embed(PatchDescriptor(1.0, self.frames[0].phase))

    def local_track(self, t: int) -> tuple[BoundingBox, np.ndarray]:
        box, rmap, self.last_on_target = sim_local_track(self.state, self.frames[t], self.cfg, self.world,
                                                         self._rng(t, _TRACK))
        return box, rmap

    def verify(self, t: int, boxes: list[BoundingBox]) -> list[float]:
        rng = self._rng(t, _VERIFY)
        return [sim_verifier(b, self.frames[t], self.cfg, rng) for b in boxes]

    def redetect(self, t: int) -> list[BoundingBox]:
        est = self.state.estimate
        return sim_redetect(self.frames[t], self.cfg, self.world, self._rng(t, _REDETECT), (est.w, est.h))

    def appearance(self, t: int, box: BoundingBox) -> float:
        gt = self.frames[t]
        overlap = iou(box, gt.box) if gt.box is not None else 0.0
        v = self.embedding.embed(PatchDescriptor(overlap, gt.phase, (self.seed & 0xFFFFFFFF, self.seq_id, t, _EMBED)))
        return float(np.linalg.norm(v - self.template))

    def reset(self, t: int, box: BoundingBox):
        self.state.estimate = box

    def apply_update(self, t: int, box: BoundingBox, update_tracker: bool, update_verifier: bool):
        gt = self.frames[t]
        correctness = iou(box, gt.box) if gt.box is not None else None
        apply_update_dynamics(self.state, update_tracker, correctness, gt.phase, self.cfg)


# ---------------------------------------------------------------------------
# serialization

def _frame_to_json(f: GroundTruthFrame) -> dict:
    return {"frame": f.index, "box": f.box.as_list() if f.box is not None else None, "phase": f.phase}


def write_sequence(path, frames: list[GroundTruthFrame], cfg: WorldConfig, seq_id: int):
    lines = [json.dumps({"world": dataclasses.asdict(cfg), "seq_id": seq_id, "length": len(frames)}, sort_keys=True)]
    lines += [json.dumps(_frame_to_json(f)) for f in frames]
    Path(path).write_text("\n".join(lines) + "\n")


def read_sequence(path) -> tuple[WorldConfig, int, list[GroundTruthFrame]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty sequence file")
    head = json.loads(lines[0])
    cfg = WorldConfig(**head["world"])
    frames = []
    for i, line in enumerate(lines[1:]):
        d = json.loads(line)
        if d["frame"] != i:
            raise ValueError(f"{path}: frame index {d['frame']} out of order at line {i + 2}")
        frames.append(GroundTruthFrame(d["frame"], BoundingBox.from_seq(d["box"]) if d["box"] is not None else None,
                                       float(d["phase"])))
    if len(frames) != head["length"]:
        raise ValueError(f"{path}: header says {head['length']} frames, found {len(frames)}")
    return cfg, int(head["seq_id"]), frames


@dataclass(frozen=True)
class Benchmark:
    n_train: int = 20
    n_eval: int = 10

    def sequences(self, world: WorldConfig, split: str) -> list[tuple[int, list[GroundTruthFrame]]]:
        # eval ids are offset so the two splits never share a world
        if split == "train":
            ids = range(self.n_train)
        elif split == "eval":
            ids = range(10_000, 10_000 + self.n_eval)
        else:
            raise ValueError(f"unknown split {split!r}")
        return [(i, generate_sequence(world, i)) for i in ids]
