"""Finite-difference checks for every layer type and the composed meta-updater."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cues import ResponseNetParams, response_net_backward, response_net_forward
from .metaupdater import MetaUpdaterConfig, MetaUpdaterModel, loss_and_grads
from .nn import (LstmParams, conv2d_backward, conv2d_forward, dense_backward, dense_forward, gap_backward,
                 gap_forward, grad_check, lstm_seq_backward, lstm_seq_forward, softmax_xent_batch)

TOLERANCE = 1e-4
EPSILON = 1e-5


@dataclass(frozen=True)
class CheckResult:
    layer: str
    max_error: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def _lstm_case(rng, fault):
    T, N, D, H = 4, 3, 5, 6
    p = LstmParams.init(rng, D, H)
    for a in p.arrays().values():
        a[...] = rng.uniform(-0.5, 0.5, a.shape)
    X = rng.normal(size=(T, N, D))
    Rh = rng.normal(size=(T, N, H))
    Rc = rng.normal(size=(N, H))

    def fn():
        Hs, Cs, cache = lstm_seq_forward(X, p)
        dX, g = lstm_seq_backward(Rh, Rc, cache)
        g = dict(g, X=dX)
        return float(np.sum(Rh * Hs) + np.sum(Rc * Cs[-1])), g

    return fn, dict(p.arrays(), X=X)


def _conv_case(rng, fault):
    stride = int(rng.integers(1, 3))
    x = rng.normal(size=(2, 7, 8, 3))
    K = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    out, _ = conv2d_forward(x, K, b, stride)
    R = rng.normal(size=out.shape)

    def fn():
        y, cache = conv2d_forward(x, K, b, stride)
        dx, dK, db = conv2d_backward(R, cache)
        return float(np.sum(R * y)), {"x": dx, "K": dK, "b": db}

    return fn, {"x": x, "K": K, "b": b}


def _gap_case(rng, fault):
    x = rng.normal(size=(2, 5, 4, 3))
    R = rng.normal(size=(2, 3))

    def fn():
        y, cache = gap_forward(x)
        return float(np.sum(R * y)), {"x": gap_backward(R, cache)}

    return fn, {"x": x}


def _dense_case(rng, fault):
    act = ("tanh", "none")[int(rng.integers(2))]
    x = rng.normal(size=(3, 5))
    W = rng.normal(size=(4, 5)) * 0.5
    b = rng.normal(size=4)
    R = rng.normal(size=(3, 4))

    def fn():
        y, cache = dense_forward(x, W, b, act)
        dx, dW, db = dense_backward(R, cache)
        return float(np.sum(R * y)), {"x": dx, "W": dW, "b": db}

    return fn, {"x": x, "W": W, "b": b}


def _xent_case(rng, fault):
    z = rng.normal(size=(4, 2)) * 2
    y = rng.integers(0, 2, size=4)

    def fn():
        loss, g = softmax_xent_batch(z, y)
        return loss, {"z": g}

    return fn, {"z": z}


def _response_case(rng, fault):
    p = ResponseNetParams.init(rng)
    for a in p.arrays().values():
        a[...] = rng.uniform(-0.5, 0.5, a.shape)
    maps = rng.uniform(0, 1, (2, 50, 50))
    R = rng.normal(size=(2, 8))

    def fn():
        v, cache = response_net_forward(maps, p)
        return float(np.sum(R * v)), response_net_backward(R, cache)

    return fn, p.arrays()


def _model_case(rng, fault):
    cfg = MetaUpdaterConfig(hidden=8, fc_hidden=8)
    m = MetaUpdaterModel.init(cfg, int(rng.integers(1 << 31)))
    for a in m.named_arrays().values():
        a[...] = rng.uniform(-0.5, 0.5, a.shape)
    maps = rng.uniform(0, 1, (2, cfg.t_s, 25, 25))
    feats = rng.uniform(0, 1, (2, cfg.t_s, 6))
    labels = np.array([0, 1])
    return (lambda: loss_and_grads(maps, feats, labels, m)), m.named_arrays()


CASES: dict[str, Callable] = {
    "lstm": _lstm_case,
    "conv2d": _conv_case,
    "global_avg_pool": _gap_case,
    "dense": _dense_case,
    "softmax_xent": _xent_case,
    "response_net": _response_case,
    "meta_updater": _model_case,
}

# coordinates sampled per instance for the larger cases
_MAX_CHECKS = {"response_net": 40, "meta_updater": 60}


def _corrupt(fn, scale=1e-3):
    """Wrap a loss function so its analytic gradients are slightly wrong."""
    def bad():
        loss, grads = fn()
        return loss, {k: g * (1 + scale) + scale for k, g in grads.items()}
    return bad


def run_suite(seed: int = 0, instances: int = 20, epsilon: float = EPSILON, layers=None,
              fault: str | None = None) -> list[CheckResult]:
    """Max relative error per layer over ``instances`` seeded random cases.

    ``fault`` names a layer whose analytic gradient gets corrupted; it
    exists to prove the check can fail.
    """
    names = list(CASES) if layers is None else list(layers)
    unknown = set(names) - set(CASES) | ({fault} - set(CASES) if fault else set())
    if unknown:
        raise ValueError(f"unknown layer(s): {sorted(unknown)}")
    out = []
    for li, name in enumerate(names):
        worst = 0.0
        for i in range(instances):
            rng = np.random.default_rng([seed, li, i])
            fn, params = CASES[name](rng, fault)
            if fault == name:
                fn = _corrupt(fn)
            worst = max(worst, grad_check(fn, params, epsilon, max_checks=_MAX_CHECKS.get(name), rng=rng))
        out.append(CheckResult(name, worst, instances))
    return out
