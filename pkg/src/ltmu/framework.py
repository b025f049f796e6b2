"""Long-term tracking controller: local tracking, verification, re-detection, gated updates."""

from __future__ import annotations

import enum
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from collections import deque
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .core import RESPONSE_DIM, BoundingBox, FrameDims, iou, normalize_box
from .cues import CueHistory, NotReady, assemble_cue_vector, confidence_score
from .metaupdater import ALWAYS_ALLOW, MetaUpdaterModel, UpdateDecision, decide
from .simulator import SimComponents, TrackerSimConfig, WorldConfig
from .training import FrameRecord, Label, label_slice

VERIFY_THRESHOLD = 0.0


class Mode(str, enum.Enum):
    TRACKING = "tracking"
    REDETECTING = "redetecting"


class Components(Protocol):
    """What the controller needs from a tracker stack (simulated or real)."""

    frame_dims: FrameDims

    def initialize(self, box: BoundingBox) -> None: ...
    def local_track(self, t: int) -> tuple[BoundingBox, np.ndarray]: ...
    def verify(self, t: int, boxes: list[BoundingBox]) -> list[float]: ...
    def redetect(self, t: int) -> list[BoundingBox]: ...
    def appearance(self, t: int, box: BoundingBox) -> float: ...
    def reset(self, t: int, box: BoundingBox) -> None: ...
    def apply_update(self, t: int, box: BoundingBox, update_tracker: bool, update_verifier: bool) -> None: ...


# ---------------------------------------------------------------------------
# update policies

class Policy:
    """Decides whether the components may update on the current frame.

    ``needs_window`` policies get the default allow until the cue window
    fills.  ``label`` is the frame's ground-truth update label, which only
    the oracle policy looks at.
    """

    needs_window = False
    model: MetaUpdaterModel | None = None

    def decide(self, window, label: Label) -> UpdateDecision:
        raise NotImplementedError


class AlwaysUpdate(Policy):
    def decide(self, window, label):
        return ALWAYS_ALLOW


class NeverUpdate(Policy):
    def decide(self, window, label):
        return UpdateDecision(False, 0.0)


class OracleUpdate(Policy):
    def decide(self, window, label):
        ok = label is Label.POSITIVE
        return UpdateDecision(ok, 1.0 if ok else 0.0)


class MetaUpdaterGate(Policy):
    needs_window = True

    def __init__(self, model: MetaUpdaterModel):
        self.model = model

    def decide(self, window, label):
        return decide(window, self.model)


def as_policy(mu) -> Policy:
    if mu is None:
        return AlwaysUpdate()
    if isinstance(mu, Policy):
        return mu
    if isinstance(mu, MetaUpdaterModel):
        return MetaUpdaterGate(mu)
    raise TypeError(f"cannot gate with {type(mu).__name__}")


# ---------------------------------------------------------------------------
# state and records

class SamplePool:
    """Observations accepted for updating, oldest dropped past ``capacity``."""

    def __init__(self, capacity: int = 100_000):
        self.items: deque[tuple[int, BoundingBox]] = deque(maxlen=capacity)

    def __len__(self):
        return len(self.items)

    def add(self, t: int, obs: BoundingBox):
        self.items.append((t, obs))

    def frames(self) -> list[int]:
        return [t for t, _ in self.items]


@dataclass
class TrackerState:
    mode: Mode
    history: CueHistory
    policy: Policy
    frame: int
    last_verified: BoundingBox
    segment: int = 0
    pool: SamplePool = field(default_factory=SamplePool)
    gate_verifier: bool = True


@dataclass
class FrameResult:
    index: int
    box: BoundingBox | None
    confidence: float
    verifier_score: float | None
    decision: UpdateDecision
    mode: Mode

    def to_json(self) -> dict:
        return {"frame": self.index, "box": self.box.as_list() if self.box is not None else None,
                "confidence": self.confidence, "verifier_score": self.verifier_score,
                "allow": self.decision.allow, "probability": self.decision.probability,
                "mode": self.mode.value}

    @classmethod
    def from_json(cls, d: dict) -> "FrameResult":
        return cls(d["frame"], BoundingBox.from_seq(d["box"]) if d["box"] is not None else None,
                   d["confidence"], d["verifier_score"], UpdateDecision(d["allow"], d["probability"]),
                   Mode(d["mode"]))


@dataclass
class UpdateRecord:
    index: int
    u: int
    label: Label
    segment: int
    cue: list[float] | None
    window_ready: bool

    def to_json(self) -> dict:
        return {"frame": self.index, "u": self.u, "l": self.label.code, "segment": self.segment,
                "cue": self.cue, "window_ready": self.window_ready}

    @classmethod
    def from_json(cls, d: dict) -> "UpdateRecord":
        return cls(d["frame"], d["u"], Label.from_code(d["l"]), d["segment"], d["cue"], d["window_ready"])


def presence_confidence(score: float | None) -> float:
    if score is None:
        return 0.0
    return 1.0 / (1.0 + math.exp(-score)) if score >= 0 else math.exp(score) / (1.0 + math.exp(score))


# ---------------------------------------------------------------------------
# control loop

def initialize(comps: Components, box: BoundingBox, policy=None, t_s: int | None = None,
               gate_verifier: bool = True) -> TrackerState:
    pol = as_policy(policy)
    if t_s is None:
        t_s = pol.model.config.t_s if pol.model is not None else 20
    comps.initialize(box)
    return TrackerState(Mode.TRACKING, CueHistory(t_s), pol, 0, box, gate_verifier=gate_verifier)


def gate_update(decision: UpdateDecision, pending, pool: SamplePool, t: int, obs) -> bool:
    """Run every pending update callable and pool ``obs`` iff the decision allows it."""
    if not decision.allow:
        return False
    for fn in pending:
        fn()
    pool.add(t, obs)
    return True


def _response_embedding(state: TrackerState, rmap: np.ndarray) -> np.ndarray:
    m = state.policy.model
    if m is None or m.response_net is None:
        return np.zeros(RESPONSE_DIM)
    return m.response_vectors(rmap[None])[0]


def step(state: TrackerState | None, comps: Components, t: int, truth: BoundingBox | None = None,
         *, want_record: bool = False):
    """Process frame ``t`` (t >= 1).  Returns (state, FrameResult, UpdateRecord, FrameRecord | None).

    ``truth`` is only used for the update label and the oracle policy.
    """
    if state is None:
        raise RuntimeError("step before initialization")
    mode = state.mode
    reset = False
    local_box, rmap = comps.local_track(t)
    if mode is Mode.TRACKING:
        (score,) = comps.verify(t, [local_box])
        reported = local_box
        obs = local_box
        if score > VERIFY_THRESHOLD:
            state.last_verified = local_box
        else:
            state.mode = Mode.REDETECTING
    else:
        cands = comps.redetect(t)
        scores = comps.verify(t, cands) if cands else []
        score = max(scores) if scores else None
        if score is not None and score > VERIFY_THRESHOLD:
            best = cands[int(np.argmax(scores))]
            comps.reset(t, best)
            state.history.clear()
            state.segment += 1
            state.mode = Mode.TRACKING
            state.last_verified = best
            reported = obs = best
            reset = True
        else:
            reported = None
            obs = local_box

    label = label_slice(iou(obs, truth) if truth is not None else None)
    cue = None
    window = NotReady
    conf = appear = 0.0
    if not reset:
        conf = confidence_score(rmap)
        appear = comps.appearance(t, obs)
        cv = assemble_cue_vector(conf, _response_embedding(state, rmap), appear,
                                 normalize_box(obs, comps.frame_dims))
        state.history.push(cv)
        window = state.history.window()
        cue = cv.as_array().tolist()
    if state.policy.needs_window and window is NotReady:
        decision = ALWAYS_ALLOW
    else:
        decision = state.policy.decide(window, label)

    gated_verifier = state.gate_verifier
    pending = [lambda: comps.apply_update(t, obs, True, gated_verifier)]
    gate_update(decision, pending, state.pool, t, obs)
    if not gated_verifier:
        comps.apply_update(t, obs, False, True)
    state.frame = t

    result = FrameResult(t, reported, presence_confidence(score), score, decision, mode)
    urec = UpdateRecord(t, int(decision.allow), label, state.segment, cue, window is not NotReady)
    frec = None
    if want_record and not reset:
        frec = FrameRecord(t, obs, rmap, conf, appear, truth, state.segment)
    return state, result, urec, frec


@dataclass
class Rollout:
    results: list[FrameResult]
    updates: list[UpdateRecord]
    records: list[FrameRecord]
    state: TrackerState


def run_sequence(comps, mu=None, *, init_box: BoundingBox | None = None, length: int | None = None,
                 truth=None, want_records: bool = False, gate_verifier: bool = True, t_s: int | None = None) -> Rollout:
    """Roll the controller over a whole sequence.

    ``comps`` needs ``truth(t)`` unless a ``truth`` callable is given; the
    first frame is initialized from the ground-truth box unless ``init_box``
    is passed.  ``mu`` is None (always update), a MetaUpdaterModel, or a Policy.
    """
    truth = truth or comps.truth
    n = length if length is not None else len(comps)
    if n < 1:
        raise ValueError("empty sequence")
    box0 = init_box or truth(0)
    if box0 is None:
        raise ValueError("target must be present in the first frame")
    state = initialize(comps, box0, mu, t_s=t_s, gate_verifier=gate_verifier)
    decision0 = ALWAYS_ALLOW
    comps.apply_update(0, box0, True, True)
    state.pool.add(0, box0)
    results = [FrameResult(0, box0, 1.0, None, decision0, Mode.TRACKING)]
    updates = [UpdateRecord(0, 1, label_slice(iou(box0, truth(0))), 0, None, False)]
    records: list[FrameRecord] = []
    for t in range(1, n):
        state, res, urec, frec = step(state, comps, t, truth(t), want_record=want_records)
        results.append(res)
        updates.append(urec)
        if frec is not None:
            records.append(frec)
    return Rollout(results, updates, records, state)


def worker_count(default: int = 1) -> int:
    """Worker threads allowed by LTMU_THREADS (at least 1)."""
    raw = os.environ.get("LTMU_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"LTMU_THREADS must be an integer, got {raw!r}") from None


class SimTrackerEnv:
    """Collects frame records by running the simulated tracker over ``(seq_id, frames)`` videos."""

    def __init__(self, world: WorldConfig, cfg: TrackerSimConfig = TrackerSimConfig(), *,
                 gate_verifier: bool = True, t_s: int = 20, threads: int | None = None):
        self.world = world
        self.cfg = cfg
        self.gate_verifier = gate_verifier
        self.t_s = t_s
        self.threads = threads or worker_count()
        self.runs = 0

    @property
    def dims(self) -> FrameDims:
        return self.world.dims

    def rollout(self, seq_id: int, frames, mu=None, want_records: bool = False) -> Rollout:
        comps = SimComponents(frames, self.world, self.cfg, seq_id)
        return run_sequence(comps, mu, want_records=want_records, gate_verifier=self.gate_verifier, t_s=self.t_s)

    def rollouts(self, videos, mu=None, want_records: bool = False) -> list[Rollout]:
        self.runs += 1

        def one(v):
            return self.rollout(v[0], v[1], mu, want_records)

        if self.threads > 1 and len(videos) > 1:
            with ThreadPoolExecutor(self.threads) as ex:
                return list(ex.map(one, videos))
        return [one(v) for v in videos]

    def collect(self, videos, mu=None) -> list[tuple[int, list[FrameRecord]]]:
        outs = self.rollouts(videos, mu, want_records=True)
        return [(v[0], r.records) for v, r in zip(videos, outs)]


# ---------------------------------------------------------------------------
# JSON-lines I/O

def write_jsonl(path, rows):
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
