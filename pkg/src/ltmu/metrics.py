"""Tracking and update-decision metrics.

Long-term precision/recall/F over a confidence sweep, TPR/TNR with the
MaxGM trade-off, one-pass success/precision, and confusion statistics of
update decisions against their labels.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import BoundingBox, center_distance, iou
from .training import Label


class NotApplicableType:
    """Marker for a ratio whose denominator is zero."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "NotApplicable"

    def __bool__(self):
        return False


NotApplicable = NotApplicableType()


def _ratio(num, den):
    return num / den if den else NotApplicable


def as_number(v):
    """NotApplicable -> None, for JSON/CSV output."""
    return None if v is NotApplicable else v


@dataclass
class EvalRun:
    """Per-frame tracker output aligned with ground truth."""

    boxes: list[BoundingBox | None]
    confidence: np.ndarray
    gt: list[BoundingBox | None]

    def __post_init__(self):
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if not (len(self.boxes) == len(self.confidence) == len(self.gt)):
            raise ValueError(f"misaligned run: {len(self.boxes)} boxes, {len(self.confidence)} confidences, "
                             f"{len(self.gt)} ground-truth frames")
        self.present = np.array([g is not None for g in self.gt], dtype=bool)
        self.emitted = np.array([b is not None for b in self.boxes], dtype=bool)
        self.ious = np.array([iou(b, g) if b is not None and g is not None else 0.0
                              for b, g in zip(self.boxes, self.gt)])

    def __len__(self):
        return len(self.gt)

    @classmethod
    def from_results(cls, results, gt) -> "EvalRun":
        """From FrameResult objects (or their JSON dicts) and a ground-truth box list."""
        boxes, conf = [], []
        for r in results:
            if isinstance(r, dict):
                b = r["box"]
                boxes.append(BoundingBox.from_seq(b) if b is not None else None)
                conf.append(r["confidence"])
            else:
                boxes.append(r.box)
                conf.append(r.confidence)
        return cls(boxes, np.array(conf), list(gt))


@dataclass(frozen=True)
class FScore:
    f: float
    precision: float
    recall: float
    threshold: float


def _pr_re_curves(run: EvalRun, taus: np.ndarray):
    """Pr(tau), Re(tau) for one run; Pr is NaN where nothing is reported."""
    conf = run.confidence[run.emitted]
    ious = run.ious[run.emitted]
    order = np.argsort(-conf, kind="stable")
    conf, ious = conf[order], ious[order]
    cum = np.concatenate([[0.0], np.cumsum(ious)])
    # number of emitted frames with confidence >= tau
    n = len(conf) - np.searchsorted(conf[::-1], taus, side="left")
    total = cum[n]
    with np.errstate(invalid="ignore", divide="ignore"):
        pr = np.where(n > 0, total / np.maximum(n, 1), np.nan)
    npres = int(run.present.sum())
    if npres == 0:
        raise ValueError("run has no frames with the target present")
    return pr, total / npres


def _f(pr, re):
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.where(pr + re > 0, 2 * pr * re / (pr + re), 0.0)
    return f


def _best(taus, pr, re) -> FScore:
    pr0 = np.nan_to_num(pr, nan=0.0)
    f = _f(pr0, re)
    i = int(np.argmax(f))
    return FScore(float(f[i]), float(pr0[i]), float(re[i]), float(taus[i]))


def _thresholds(runs: Sequence[EvalRun]) -> np.ndarray:
    c = np.concatenate([r.confidence[r.emitted] for r in runs] + [np.array([np.inf])])
    return np.unique(c)


def f_measure(run: EvalRun) -> FScore:
    """Max-F over the confidence sweep for a single run.

    A frame counts as reported when a box is emitted and its confidence is
    >= tau.  Reported frames without a target contribute IoU 0 to Pr.
    """
    if len(run) == 0:
        raise ValueError("empty run")
    taus = _thresholds([run])
    pr, re = _pr_re_curves(run, taus)
    return _best(taus, pr, re)


def f_curve(runs: Sequence[EvalRun]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(tau, Pr, Re, F) with Pr and Re averaged over runs.

    Runs reporting nothing at a threshold are left out of that threshold's
    Pr average; Re averages over every run.
    """
    if not runs:
        raise ValueError("no runs")
    taus = _thresholds(runs)
    prs, res = zip(*(_pr_re_curves(r, taus) for r in runs))
    prs, res = np.array(prs), np.array(res)
    valid = ~np.isnan(prs)
    cnt = valid.sum(axis=0)
    pr = np.where(cnt > 0, np.nansum(prs, axis=0) / np.maximum(cnt, 1), 0.0)
    re = res.mean(axis=0)
    return taus, pr, re, _f(pr, re)


def f_measure_dataset(runs: Sequence[EvalRun]) -> FScore:
    taus, pr, re, _ = f_curve(runs)
    return _best(taus, pr, re)


def tpr_tnr(run_or_runs, iou_threshold: float = 0.5):
    """(TPR, TNR) pooled over frames; an undefined rate is NotApplicable."""
    runs = [run_or_runs] if isinstance(run_or_runs, EvalRun) else list(run_or_runs)
    hits = rejects = npres = nabs = 0
    for r in runs:
        hits += int(np.sum(r.present & r.emitted & (r.ious >= iou_threshold)))
        rejects += int(np.sum(~r.present & ~r.emitted))
        npres += int(r.present.sum())
        nabs += int((~r.present).sum())
    return _ratio(hits, npres), _ratio(rejects, nabs)


def _gm(p, tpr, tnr):
    return np.sqrt(((1 - p) * tpr) * ((1 - p) * tnr + p))


def maxgm(tpr: float, tnr: float) -> float:
    """max over p in [0, 1] of sqrt((1-p) TPR ((1-p) TNR + p)), in closed form."""
    for name, v in (("tpr", tpr), ("tnr", tnr)):
        if not (isinstance(v, (int, float, np.floating)) and 0.0 <= v <= 1.0):
            raise ValueError(f"{name} must be in [0, 1], got {v!r}")
    if tnr >= 1.0:
        p = 0.0
    else:
        p = min(1.0, max(0.0, (1 - 2 * tnr) / (2 * (1 - tnr))))
    return float(_gm(p, tpr, tnr))


def maxgm_grid(tpr: float, tnr: float, step: float = 1e-4) -> float:
    p = np.linspace(0.0, 1.0, int(round(1 / step)) + 1)
    return float(_gm(p, tpr, tnr).max())


SUCCESS_THRESHOLDS = np.round(np.arange(101) * 0.01, 2)


@dataclass(frozen=True)
class OpeResult:
    auc: float
    precision20: float
    success: np.ndarray


def ope_curves(run_or_runs, pixel_threshold: float = 20.0) -> OpeResult:
    """Success curve over IoU thresholds 0..1 (AUC = mean) and precision at ``pixel_threshold``.

    Only target-present frames count; a missing report scores IoU 0 and
    infinite center distance.
    """
    runs = [run_or_runs] if isinstance(run_or_runs, EvalRun) else list(run_or_runs)
    ious, dists = [], []
    for r in runs:
        for b, g, v in zip(r.boxes, r.gt, r.ious):
            if g is None:
                continue
            ious.append(v)
            dists.append(center_distance(b, g) if b is not None else math.inf)
    if not ious:
        raise ValueError("no frames with the target present")
    ious = np.array(ious)
    success = (ious[None, :] >= SUCCESS_THRESHOLDS[:, None]).mean(axis=1)
    return OpeResult(float(success.mean()), float(np.mean(np.array(dists) <= pixel_threshold)), success)


@dataclass(frozen=True)
class UpdateStats:
    precision: object
    recall: object
    tnr: object
    tp: int
    fp: int
    tn: int
    fn: int


def update_stats(log: Iterable) -> UpdateStats:
    """Confusion of decisions ``u`` against labels ``l`` over non-discarded frames.

    ``log`` yields (u, label) pairs or objects with ``u`` and ``label``.
    """
    tp = fp = tn = fn = 0
    n = 0
    for item in log:
        u, lab = (item.u, item.label) if hasattr(item, "u") else item
        if not isinstance(lab, Label):
            lab = Label.from_code(lab)
        if lab is Label.DISCARD:
            continue
        n += 1
        if lab is Label.POSITIVE:
            tp += u == 1
            fn += u == 0
        else:
            fp += u == 1
            tn += u == 0
    if n == 0:
        raise ValueError("update log has no labelled frames")
    return UpdateStats(_ratio(tp, tp + fp), _ratio(tp, tp + fn), _ratio(tn, tn + fp), tp, fp, tn, fn)


# ---------------------------------------------------------------------------
# summaries

def summarize(runs: Sequence[EvalRun], update_logs: Sequence | None = None) -> dict:
    fs = f_measure_dataset(runs)
    tpr, tnr = tpr_tnr(runs)
    gm = maxgm(tpr, tnr) if tpr is not NotApplicable and tnr is not NotApplicable else NotApplicable
    ope = ope_curves(runs)
    out = {"f": fs.f, "pr": fs.precision, "re": fs.recall, "f_threshold": fs.threshold,
           "tpr": tpr, "tnr": tnr, "maxgm": gm, "ope_auc": ope.auc, "ope_precision20": ope.precision20}
    if update_logs is not None:
        us = update_stats(x for lg in update_logs for x in lg)
        out.update({"update_pr": us.precision, "update_re": us.recall, "update_tnr": us.tnr,
                    "update_tp": us.tp, "update_fp": us.fp, "update_tn": us.tn, "update_fn": us.fn})
    return {k: as_number(v) for k, v in out.items()}


def write_csv(path, rows: Sequence[dict]):
    if not rows:
        raise ValueError("nothing to write")
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in keys})


def read_csv(path) -> list[dict]:
    def conv(v):
        if v == "":
            return None
        try:
            return int(v)
        except ValueError:
            pass
        try:
            return float(v)
        except ValueError:
            return v
    with open(path, newline="") as fh:
        return [{k: conv(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
