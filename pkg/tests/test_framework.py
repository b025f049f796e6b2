import numpy as np
import pytest

from ltmu.core import BoundingBox, FrameDims
from ltmu.framework import (AlwaysUpdate, FrameResult, MetaUpdaterGate, Mode, Policy, SamplePool, SimTrackerEnv,
                            UpdateRecord, gate_update, initialize, presence_confidence, read_jsonl, run_sequence,
                            step, write_jsonl)
from ltmu.metaupdater import ALWAYS_ALLOW, MetaUpdaterConfig, MetaUpdaterModel, UpdateDecision
from ltmu.simulator import Benchmark, WorldConfig
from ltmu.training import Label

T, R = Mode.TRACKING, Mode.REDETECTING
TARGET = BoundingBox(40, 40, 20, 20)
DISTRACTOR = BoundingBox(150, 150, 20, 20)


class Script:
    """Component bundle driven by per-frame verifier scores.

    ``track[t]`` scores the local tracker's box on frame t; ``found[t]``
    says whether re-detection on frame t yields a verified candidate.
    """

    frame_dims = FrameDims(200, 200)

    def __init__(self, n, track=None, found=None, present=None):
        self.n = n
        self.track = track or {}
        self.found = found or {}
        self.present = present or {}
        self.updates = []
        self.resets = []
        self._cands = {}

    def __len__(self):
        return self.n

    def truth(self, t):
        return TARGET if self.present.get(t, True) else None

    def initialize(self, box):
        pass

    def local_track(self, t):
        rmap = np.zeros((5, 5))
        rmap[2, 2] = 0.9
        return TARGET, rmap

    def verify(self, t, boxes):
        if boxes is self._cands.get(t):
            return [1.0 if self.found.get(t, False) else -1.0, -2.0]
        return [self.track.get(t, 1.0)]

    def redetect(self, t):
        self._cands[t] = [TARGET, DISTRACTOR]
        return self._cands[t]

    def appearance(self, t, box):
        return 0.1

    def reset(self, t, box):
        self.resets.append(t)

    def apply_update(self, t, box, update_tracker, update_verifier):
        self.updates.append((t, update_tracker, update_verifier))


def modes(rollout):
    return [r.mode for r in rollout.results]


def reported(rollout):
    return [r.box is not None for r in rollout.results]


def test_trace_no_disappearance():
    ro = run_sequence(Script(30))
    assert modes(ro) == [T] * 30
    assert all(reported(ro))
    assert ro.state.segment == 0


def test_trace_disappearance_with_immediate_redetection():
    # target gone on frames 10..19; the verifier rejects frame 10, re-detection succeeds on 20
    comps = Script(40, track={t: -1.0 for t in range(10, 20)}, found={20: True},
                   present={t: False for t in range(10, 20)})
    ro = run_sequence(comps)
    assert modes(ro) == [T] * 11 + [R] * 10 + [T] * 19
    assert reported(ro) == [True] * 11 + [False] * 9 + [True] * 20
    assert ro.results[20].box == TARGET
    assert comps.resets == [20]
    assert ro.state.segment == 1


def test_trace_redetection_never_succeeds():
    ro = run_sequence(Script(30, track={5: -1.0}))
    assert modes(ro) == [T] * 6 + [R] * 24
    assert reported(ro) == [True] * 6 + [False] * 24
    assert all(r.confidence < 0.5 for r in ro.results[6:])


def test_threshold_is_exclusive():
    ro = run_sequence(Script(5, track={2: 0.0}))
    assert modes(ro) == [T, T, T, R, R]


def test_history_cleared_on_reset():
    comps = Script(40, track={10: -1.0}, found={12: True})
    st = initialize(comps, TARGET, AlwaysUpdate(), t_s=5)
    for t in range(1, 40):
        st, res, urec, _ = step(st, comps, t, TARGET)
        assert len(st.history) <= 5
        if t == 12:
            assert len(st.history) == 0 and urec.cue is None
    assert st.segment == 1


def test_step_requires_initialization():
    with pytest.raises(RuntimeError):
        step(None, Script(3), 1)


# --- gating ----------------------------------------------------------------------

def test_gate_update_examples():
    pool = SamplePool()
    calls = []
    assert not gate_update(UpdateDecision(False, 0.1), [lambda: calls.append(1)], pool, 3, TARGET)
    assert len(pool) == 0 and calls == []
    assert gate_update(ALWAYS_ALLOW, [lambda: calls.append(1), lambda: calls.append(2)], pool, 4, TARGET)
    assert len(pool) == 1 and calls == [1, 2]


class Scripted(Policy):
    def __init__(self, decisions):
        self.decisions = list(decisions)
        self.i = 0

    def decide(self, window, label):
        d = self.decisions[self.i]
        self.i += 1
        return UpdateDecision(bool(d), float(d))


def test_pool_holds_exactly_the_allowed_frames():
    dec = [1, 0, 1, 1, 0, 0, 1, 0, 1]
    comps = Script(10)
    ro = run_sequence(comps, Scripted(dec))
    allowed = [0] + [t for t, d in enumerate(dec, 1) if d]
    assert ro.state.pool.frames() == allowed
    assert [t for t, tr, _ in comps.updates if tr] == allowed
    assert [u.u for u in ro.updates] == [1] + dec


def test_tracker_only_gating_flag():
    dec = [0, 1, 0]
    comps = Script(4)
    run_sequence(comps, Scripted(dec), gate_verifier=False)
    tracker = [t for t, tr, _ in comps.updates if tr]
    verifier = [t for t, _, v in comps.updates if v]
    assert tracker == [0, 2]
    assert verifier == [0, 1, 2, 3]


def test_mu_none_allows_everything_and_one_frame_sequence():
    ro = run_sequence(Script(25))
    assert all(u.u == 1 for u in ro.updates)
    one = run_sequence(Script(1), MetaUpdaterModel.zeros())
    assert len(one.results) == 1 and one.updates[0].u == 1


def test_cold_start_defaults_to_allow():
    # a model that always says "no" (class-0 bias) only gets asked once the window is full
    m = MetaUpdaterModel.zeros(MetaUpdaterConfig(t_s=5, t_1=3, t_2=2, hidden=4, fc_hidden=4))
    m.fc2_b[:] = [5.0, -5.0]
    ro = run_sequence(Script(12), m)
    assert [u.u for u in ro.updates] == [1] * 5 + [0] * 7
    assert [u.window_ready for u in ro.updates] == [False] * 5 + [True] * 7
    assert isinstance(ro.state.policy, MetaUpdaterGate)


def test_update_labels():
    comps = Script(6, track={3: -1.0}, present={4: False, 5: False})
    ro = run_sequence(comps)
    assert [u.label for u in ro.updates] == [Label.POSITIVE] * 4 + [Label.NEGATIVE] * 2


def test_presence_confidence():
    assert presence_confidence(0.0) == 0.5
    assert presence_confidence(None) == 0.0
    assert presence_confidence(-800.0) == pytest.approx(0.0)
    assert presence_confidence(800.0) == 1.0


def test_result_json_round_trip(tmp_path):
    ro = run_sequence(Script(15, track={5: -1.0}, found={8: True}))
    write_jsonl(tmp_path / "r.jsonl", [r.to_json() for r in ro.results])
    back = [FrameResult.from_json(d) for d in read_jsonl(tmp_path / "r.jsonl")]
    assert back == ro.results
    assert [UpdateRecord.from_json(u.to_json()) for u in ro.updates] == ro.updates


def test_benchmark_rollout_is_deterministic():
    world = WorldConfig(length=200, seed=42)
    videos = Benchmark(n_train=2).sequences(world, "train")
    env = SimTrackerEnv(world)
    a = [[r.to_json() for r in ro.results] for ro in env.rollouts(videos)]
    b = [[r.to_json() for r in ro.results] for ro in env.rollouts(videos)]
    assert a == b
