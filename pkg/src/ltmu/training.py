"""Update labels, time-slice collection, and the iterative collect/train loop."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .core import BoundingBox, FrameDims, iou, normalize_box
from .metaupdater import (MetaUpdaterConfig, MetaUpdaterModel, RawWindow, SingleClassError, TrainConfig,
                          train)

log = logging.getLogger(__name__)


class Label(enum.Enum):
    NEGATIVE = 0
    POSITIVE = 1
    DISCARD = -1

    @property
    def code(self) -> int | None:
        return None if self is Label.DISCARD else self.value

    @classmethod
    def from_code(cls, c) -> "Label":
        return cls.DISCARD if c is None else cls(int(c))


def label_slice(final_iou: float | None) -> Label:
    """IoU > 0.5 is positive, exactly 0 (or no target) negative, anything between is discarded."""
    if final_iou is None:
        return Label.NEGATIVE
    if final_iou > 0.5:
        return Label.POSITIVE
    if final_iou == 0.0:
        return Label.NEGATIVE
    return Label.DISCARD


@dataclass
class FrameRecord:
    """One tracked frame as seen by the update gate, plus its ground truth."""

    index: int
    box: BoundingBox
    response_map: np.ndarray | None
    confidence: float
    appearance: float
    gt: BoundingBox | None
    segment: int = 0

    @property
    def label(self) -> Label:
        return label_slice(iou(self.box, self.gt) if self.gt is not None else None)

    def to_json(self) -> dict:
        return {"frame": self.index, "box": self.box.as_list(),
                "response_map": self.response_map.tolist() if self.response_map is not None else None,
                "confidence": self.confidence, "appearance": self.appearance,
                "gt": self.gt.as_list() if self.gt is not None else None, "segment": self.segment}

    @classmethod
    def from_json(cls, d: dict) -> "FrameRecord":
        rm = d.get("response_map")
        return cls(d["frame"], BoundingBox.from_seq(d["box"]),
                   np.asarray(rm, dtype=np.float64) if rm is not None else None,
                   float(d["confidence"]), float(d["appearance"]),
                   BoundingBox.from_seq(d["gt"]) if d.get("gt") is not None else None, int(d.get("segment", 0)))


@dataclass
class LabeledSlice:
    window: RawWindow
    label: Label
    source: tuple[int, int]


def record_features(records: Sequence[FrameRecord], dims: FrameDims) -> np.ndarray:
    """Rows of [confidence, appearance, normalized box]."""
    out = np.empty((len(records), 6))
    for i, r in enumerate(records):
        out[i, 0] = r.confidence
        out[i, 1] = r.appearance
        out[i, 2:] = normalize_box(r.box, dims)
    return out


def slice_run(records: Sequence[FrameRecord], t_s: int, dims: FrameDims, video_id: int = 0) -> list[LabeledSlice]:
    """Labelled windows ending at every frame with t_s - 1 predecessors.

    A window must cover consecutive frames of one tracker lifetime
    (segment); windows straddling a reset are dropped, as are windows whose
    final frame is labelled DISCARD.
    """
    n = len(records)
    if n < t_s:
        return []
    idx = np.array([r.index for r in records])
    if np.any(np.diff(idx) <= 0):
        raise ValueError("frame indices must be strictly increasing")
    seg = np.array([r.segment for r in records])
    feats = record_features(records, dims)
    has_maps = records[0].response_map is not None
    maps = np.stack([r.response_map for r in records]) if has_maps else None
    # run[i]: length of the consecutive same-segment stretch ending at i
    run = np.ones(n, dtype=int)
    for i in range(1, n):
        if idx[i] == idx[i - 1] + 1 and seg[i] == seg[i - 1]:
            run[i] = run[i - 1] + 1
    out = []
    for i in range(t_s - 1, n):
        if run[i] < t_s:
            continue
        lab = records[i].label
        if lab is Label.DISCARD:
            continue
        s = slice(i - t_s + 1, i + 1)
        out.append(LabeledSlice(RawWindow(maps[s] if has_maps else None, feats[s]), lab, (video_id, int(idx[i]))))
    return out


class TrackerEnv(Protocol):
    """Runs the tracker (optionally gated by a meta-updater) over videos and records every frame."""

    runs: int
    dims: FrameDims

    def collect(self, videos, mu: MetaUpdaterModel | None) -> list[tuple[int, list[FrameRecord]]]: ...


@dataclass
class RoundLog:
    k: int
    slices: int
    positives: int
    negatives: int
    discarded: int
    final_loss: float
    losses: list[float] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {"k": self.k, "slices": self.slices, "positives": self.positives, "negatives": self.negatives,
                "discarded": self.discarded, "class_balance": self.positives / max(self.slices, 1),
                "final_loss": self.final_loss}


def collect_slices(runs: Sequence[tuple[int, list[FrameRecord]]], t_s: int, dims: FrameDims):
    """Slices from every run, ordered by (video id, frame), and the count of discarded candidates."""
    slices = []
    discarded = 0
    for vid, recs in sorted(runs, key=lambda r: r[0]):
        got = slice_run(recs, t_s, dims, vid)
        slices.extend(got)
        discarded += _candidate_count(recs, t_s) - len(got)
    return slices, discarded


def _candidate_count(records, t_s) -> int:
    n, run, c = len(records), 0, 0
    for i in range(n):
        ok = i > 0 and records[i].index == records[i - 1].index + 1 and records[i].segment == records[i - 1].segment
        run = run + 1 if ok else 1
        c += run >= t_s
    return c


def round_seed(seed: int, k: int) -> int:
    return seed * 1000 + k + 1


def iterative_train(env: TrackerEnv, videos, K: int = 3, seed: int = 0,
                    train_cfg: TrainConfig = TrainConfig(), model_cfg: MetaUpdaterConfig | None = None,
                    on_round=None) -> tuple[list[MetaUpdaterModel], list[RoundLog]]:
    """Alternate collection and training K times.

    Round k runs the tracker gated by the model from round k - 1 (round 0
    is ungated), slices and labels what it recorded, and trains a fresh
    model on those slices.  Returns [MU^1 .. MU^K] and per-round logs.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if not videos:
        raise ValueError("no videos")
    mcfg = model_cfg or MetaUpdaterConfig()
    models: list[MetaUpdaterModel] = []
    logs: list[RoundLog] = []
    mu = None
    for k in range(K):
        runs = env.collect(videos, mu)
        slices, discarded = collect_slices(runs, mcfg.t_s, env.dims)
        pos = sum(s.label is Label.POSITIVE for s in slices)
        neg = len(slices) - pos
        log.info("round %d: %d slices (%d positive, %d negative, %d discarded)", k, len(slices), pos, neg, discarded)
        if pos == 0 or neg == 0:
            raise SingleClassError(f"round {k} collected {pos} positive and {neg} negative slices; cannot train")
        samples = [(s.window, s.label.value) for s in slices]
        mu, losses = train(samples, train_cfg, seed=round_seed(seed, k), model_config=mcfg)
        tail = losses[-min(100, len(losses)):]
        rl = RoundLog(k, len(slices), pos, neg, discarded, float(np.mean(tail)) if tail else float("nan"), losses)
        models.append(mu)
        logs.append(rl)
        if on_round is not None:
            on_round(k, mu, rl)
    return models, logs
