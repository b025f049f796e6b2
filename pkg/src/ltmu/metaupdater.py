"""Cascaded three-stage LSTM update gate.

Stage 1 reads the whole cue window.  Its last ``t_1`` hidden states, each
concatenated with the stage's final cell state, feed stage 2; stage 2's last
``t_2`` hidden states (again with its final cell appended) feed stage 3.  The
final stage-3 hidden state goes through a tanh dense layer and a 2-way linear
layer; the softmax probability of class 1 is the "update" probability.
"""

from __future__ import annotations

import dataclasses
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import CUE_DIM, CUE_DIM_NO_RESPONSE, RESPONSE_DIM, TimeSliceWindow
from .cues import ResponseNetParams, resize_bilinear, response_net_backward, response_net_forward
from .nn import (LstmParams, OptState, ShapeError, clip_grad_norm, dense_backward, dense_forward,
                 init_uniform, lstm_seq_backward, lstm_seq_forward, sgd_momentum_step, softmax,
                 softmax_xent_batch)

log = logging.getLogger(__name__)

MAGIC = b"LTMU"
FORMAT_VERSION = 1
FLAG_NO_RESPONSE = 1


class CheckpointError(ValueError):
    pass


class SingleClassError(ValueError):
    pass


@dataclass(frozen=True)
class MetaUpdaterConfig:
    t_s: int = 20
    t_1: int = 8
    t_2: int = 3
    hidden: int = 64
    fc_hidden: int = 64
    decision_threshold: float = 0.5
    forget_bias: float = 1.0
    no_response_mode: bool = False

    def __post_init__(self):
        if not (self.t_s >= self.t_1 >= self.t_2 >= 1):
            raise ValueError(f"need t_s >= t_1 >= t_2 >= 1, got {self.t_s}, {self.t_1}, {self.t_2}")
        if not 0.0 <= self.decision_threshold <= 1.0:
            raise ValueError("decision_threshold must lie in [0, 1]")

    @property
    def cue_dim(self) -> int:
        return CUE_DIM_NO_RESPONSE if self.no_response_mode else CUE_DIM


def strip_response_inputs(cfg: MetaUpdaterConfig) -> MetaUpdaterConfig:
    """Config for trackers without a response map: drops the 8 response-net inputs."""
    return dataclasses.replace(cfg, no_response_mode=True)


@dataclass(frozen=True)
class UpdateDecision:
    allow: bool
    probability: float


ALWAYS_ALLOW = UpdateDecision(True, 1.0)


@dataclass
class RawWindow:
    """Training-side window: raw response maps plus the non-learned cue columns.

    ``features`` rows are [confidence, appearance, x, y, w, h]; ``maps`` is
    (t_s, H, W) or None for trackers without a response map.
    """

    maps: np.ndarray | None
    features: np.ndarray

    def __len__(self):
        return self.features.shape[0]


@dataclass
class MetaUpdaterModel:
    config: MetaUpdaterConfig
    response_net: ResponseNetParams | None
    lstm1: LstmParams
    lstm2: LstmParams
    lstm3: LstmParams
    fc1_W: np.ndarray
    fc1_b: np.ndarray
    fc2_W: np.ndarray
    fc2_b: np.ndarray

    def __post_init__(self):
        cfg = self.config
        if (self.response_net is None) != cfg.no_response_mode:
            raise ShapeError("response_net must be present iff no_response_mode is off")
        if self.lstm1.input_dim != cfg.cue_dim:
            raise ShapeError(f"lstm1 input {self.lstm1.input_dim} != cue dim {cfg.cue_dim}")
        if self.lstm2.input_dim != 2 * self.lstm1.hidden:
            raise ShapeError("lstm2 input must be 2 x lstm1 hidden")
        if self.lstm3.input_dim != 2 * self.lstm2.hidden:
            raise ShapeError("lstm3 input must be 2 x lstm2 hidden")
        if self.fc1_W.shape[1] != self.lstm3.hidden or self.fc2_W.shape != (2, self.fc1_W.shape[0]):
            raise ShapeError("fully connected head shape mismatch")

    @classmethod
    def init(cls, config: MetaUpdaterConfig | None = None, seed: int = 0) -> "MetaUpdaterModel":
        cfg = config or MetaUpdaterConfig()
        rng = np.random.default_rng(seed)
        H = cfg.hidden
        rnet = None if cfg.no_response_mode else ResponseNetParams.init(rng)
        return cls(
            cfg, rnet,
            LstmParams.init(rng, cfg.cue_dim, H, cfg.forget_bias),
            LstmParams.init(rng, 2 * H, H, cfg.forget_bias),
            LstmParams.init(rng, 2 * H, H, cfg.forget_bias),
            init_uniform(rng, (cfg.fc_hidden, H)), np.zeros(cfg.fc_hidden),
            init_uniform(rng, (2, cfg.fc_hidden)), np.zeros(2),
        )

    @classmethod
    def zeros(cls, config: MetaUpdaterConfig | None = None) -> "MetaUpdaterModel":
        cfg = config or MetaUpdaterConfig()
        H = cfg.hidden
        return cls(
            cfg, None if cfg.no_response_mode else ResponseNetParams.zeros(),
            LstmParams.zeros(cfg.cue_dim, H), LstmParams.zeros(2 * H, H), LstmParams.zeros(2 * H, H),
            np.zeros((cfg.fc_hidden, H)), np.zeros(cfg.fc_hidden), np.zeros((2, cfg.fc_hidden)), np.zeros(2),
        )

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Every learnable tensor, in checkpoint order.  Values alias the model."""
        out = {}
        if self.response_net is not None:
            for k, v in self.response_net.arrays().items():
                out[f"response_net.{k}"] = v
        for stage in ("lstm1", "lstm2", "lstm3"):
            for k, v in getattr(self, stage).arrays().items():
                out[f"{stage}.{k}"] = v
        out.update({"fc1.W": self.fc1_W, "fc1.b": self.fc1_b, "fc2.W": self.fc2_W, "fc2.b": self.fc2_b})
        return out

    @classmethod
    def from_arrays(cls, config: MetaUpdaterConfig, arrays: dict[str, np.ndarray]) -> "MetaUpdaterModel":
        def group(prefix):
            return {k[len(prefix) + 1:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}

        try:
            rnet = None
            if not config.no_response_mode:
                rnet = ResponseNetParams(**group("response_net"))
            return cls(config, rnet,
                       LstmParams(**group("lstm1")), LstmParams(**group("lstm2")), LstmParams(**group("lstm3")),
                       arrays["fc1.W"], arrays["fc1.b"], arrays["fc2.W"], arrays["fc2.b"])
        except (TypeError, KeyError) as e:
            raise CheckpointError(f"tensor set does not form a model: {e}") from e

    def copy(self) -> "MetaUpdaterModel":
        return MetaUpdaterModel.from_arrays(self.config, {k: v.copy() for k, v in self.named_arrays().items()})

    def response_vectors(self, maps) -> np.ndarray:
        """Response-net embeddings for a stack of raw maps (N, H, W) -> (N, 8)."""
        maps = np.asarray(maps, dtype=np.float64)
        if self.response_net is None:
            return np.zeros((maps.shape[0], RESPONSE_DIM))
        v, _ = response_net_forward(resize_bilinear(maps), self.response_net)
        return v


# ---------------------------------------------------------------------------
# forward / backward over cue tensors

def _cascade(X: np.ndarray, m: MetaUpdaterModel):
    """X is (t_s, N, d); returns logits (N, 2) and the cache."""
    cfg = m.config
    H1, C1, k1 = lstm_seq_forward(X, m.lstm1)
    c1 = C1[-1]
    in2 = np.concatenate([H1[-cfg.t_1:], np.broadcast_to(c1, (cfg.t_1,) + c1.shape)], axis=2)
    H2, C2, k2 = lstm_seq_forward(in2, m.lstm2)
    c2 = C2[-1]
    in3 = np.concatenate([H2[-cfg.t_2:], np.broadcast_to(c2, (cfg.t_2,) + c2.shape)], axis=2)
    H3, _, k3 = lstm_seq_forward(in3, m.lstm3)
    a1, kf1 = dense_forward(H3[-1], m.fc1_W, m.fc1_b, "tanh")
    logits, kf2 = dense_forward(a1, m.fc2_W, m.fc2_b)
    return logits, (k1, k2, k3, kf1, kf2, H1.shape, H2.shape, H3.shape)


def _cascade_backward(dlogits: np.ndarray, cache, m: MetaUpdaterModel):
    cfg = m.config
    k1, k2, k3, kf1, kf2, s1, s2, s3 = cache
    Hd1, Hd2 = m.lstm1.hidden, m.lstm2.hidden
    g = {}
    da1, g["fc2.W"], g["fc2.b"] = dense_backward(dlogits, kf2)
    dh3, g["fc1.W"], g["fc1.b"] = dense_backward(da1, kf1)
    dH3 = np.zeros(s3)
    dH3[-1] = dh3
    din3, g3 = lstm_seq_backward(dH3, None, k3)
    dH2 = np.zeros(s2)
    dH2[-cfg.t_2:] = din3[:, :, :Hd2]
    dc2 = din3[:, :, Hd2:].sum(axis=0)
    din2, g2 = lstm_seq_backward(dH2, dc2, k2)
    dH1 = np.zeros(s1)
    dH1[-cfg.t_1:] = din2[:, :, :Hd1]
    dc1 = din2[:, :, Hd1:].sum(axis=0)
    dX, g1 = lstm_seq_backward(dH1, dc1, k1)
    for stage, gs in (("lstm1", g1), ("lstm2", g2), ("lstm3", g3)):
        for k, v in gs.items():
            g[f"{stage}.{k}"] = v
    return dX, g


def _window_array(x, m: MetaUpdaterModel) -> np.ndarray:
    cfg = m.config
    if isinstance(x, TimeSliceWindow):
        x = x.as_array(drop_response=cfg.no_response_mode)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != cfg.t_s:
        raise ShapeError(f"window must have {cfg.t_s} rows, got shape {x.shape}")
    if x.shape[1] != cfg.cue_dim:
        raise ShapeError(f"window cue dim {x.shape[1]} != model cue dim {cfg.cue_dim}")
    return x


def cascade_logits(x, m: MetaUpdaterModel) -> np.ndarray:
    X = _window_array(x, m)
    logits, _ = _cascade(X[:, None, :], m)
    return logits[0]


def cascade_forward(x, m: MetaUpdaterModel) -> float:
    """Probability of the "update" class for one window (t_s x d array or TimeSliceWindow)."""
    return float(softmax(cascade_logits(x, m))[1])


def decide(x, m: MetaUpdaterModel) -> UpdateDecision:
    p = cascade_forward(x, m)
    return UpdateDecision(p >= m.config.decision_threshold, p)


def decide_probability(p: float, threshold: float = 0.5) -> UpdateDecision:
    return UpdateDecision(p >= threshold, p)


def _assemble(features: np.ndarray, vr: np.ndarray | None) -> np.ndarray:
    # features (..., 6) = [s^C, s^A, box(4)] -> cue order [s^C, v^R, s^A, box]
    if vr is None:
        return features
    return np.concatenate([features[..., :1], vr, features[..., 1:]], axis=-1)


def forward_batch(maps: np.ndarray | None, features: np.ndarray, m: MetaUpdaterModel):
    """Logits for a batch of raw windows.

    maps is (N, t_s, H, W) (ignored in no-response mode), features (N, t_s, 6).
    Returns (logits (N, 2), cache).
    """
    N, T, _ = features.shape
    if T != m.config.t_s:
        raise ShapeError(f"window length {T} != t_s {m.config.t_s}")
    rcache = None
    vr = None
    if m.response_net is not None:
        if maps is None:
            raise ShapeError("model needs response maps")
        flat = resize_bilinear(np.asarray(maps, dtype=np.float64).reshape((N * T,) + maps.shape[2:]))
        v, rcache = response_net_forward(flat, m.response_net)
        vr = v.reshape(N, T, RESPONSE_DIM)
    X = _assemble(features, vr).transpose(1, 0, 2)
    logits, ccache = _cascade(np.ascontiguousarray(X), m)
    return logits, (rcache, ccache, N, T)


def backward(cache, dlogits: np.ndarray, m: MetaUpdaterModel) -> dict[str, np.ndarray]:
    if cache is None:
        raise RuntimeError("backward called before forward")
    rcache, ccache, N, T = cache
    dX, g = _cascade_backward(dlogits, ccache, m)
    if rcache is not None:
        dvr = dX[:, :, 1:1 + RESPONSE_DIM].transpose(1, 0, 2).reshape(N * T, RESPONSE_DIM)
        for k, v in response_net_backward(np.ascontiguousarray(dvr), rcache).items():
            g[f"response_net.{k}"] = v
    return g


def loss_and_grads(maps, features, labels, m: MetaUpdaterModel, reduction: str = "sum"):
    """Batch cross-entropy and gradients for every parameter, keyed like ``named_arrays``."""
    logits, cache = forward_batch(maps, features, m)
    loss, dlogits = softmax_xent_batch(logits, np.asarray(labels), reduction)
    return loss, backward(cache, dlogits, m)


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 100_000
    batch_size: int = 16
    lr: float = 1e-4
    momentum: float = 0.9
    clip_norm: float = 5.0
    balanced: bool = True
    # summed over the batch; with "mean" lr 1e-4 barely moves in a few thousand steps
    reduction: str = "sum"


class _ClassCycler:
    """Endless shuffled pass over one class's sample indices."""

    def __init__(self, idx: np.ndarray, rng: np.random.Generator):
        self.idx = idx
        self.rng = rng
        self.order = rng.permutation(idx)
        self.pos = 0

    def take(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if self.pos == len(self.order):
                self.order = self.rng.permutation(self.idx)
                self.pos = 0
            n = min(k - len(out), len(self.order) - self.pos)
            out.extend(self.order[self.pos:self.pos + n].tolist())
            self.pos += n
        return out


def stack_windows(windows: Sequence[RawWindow], with_maps: bool):
    feats = np.stack([w.features for w in windows])
    maps = np.stack([w.maps for w in windows]) if with_maps else None
    return maps, feats


def train(samples: Sequence[tuple[RawWindow, int]], cfg: TrainConfig = TrainConfig(), seed: int = 0,
          model_config: MetaUpdaterConfig | None = None, init_model: MetaUpdaterModel | None = None,
          log_every: int = 0) -> tuple[MetaUpdaterModel, list[float]]:
    """Mini-batch SGD with momentum on softmax cross-entropy.

    Batches draw half positives and half negatives when ``cfg.balanced``.
    """
    labels = np.array([int(l) for _, l in samples], dtype=np.int64)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise SingleClassError(f"training set has {len(pos)} positive and {len(neg)} negative samples")
    mcfg = model_config or MetaUpdaterConfig()
    model = init_model.copy() if init_model is not None else MetaUpdaterModel.init(mcfg, seed)
    rng = np.random.default_rng([seed, 1])
    params = model.named_arrays()
    opt = OptState(lr=cfg.lr, momentum=cfg.momentum)
    with_maps = not model.config.no_response_mode
    half = cfg.batch_size // 2
    cyc_pos, cyc_neg = _ClassCycler(pos, rng), _ClassCycler(neg, rng)
    cyc_all = _ClassCycler(np.arange(len(samples)), rng)
    losses = []
    for it in range(cfg.iterations):
        if cfg.balanced:
            batch = cyc_pos.take(half) + cyc_neg.take(cfg.batch_size - half)
        else:
            batch = cyc_all.take(cfg.batch_size)
        maps, feats = stack_windows([samples[i][0] for i in batch], with_maps)
        loss, grads = loss_and_grads(maps, feats, labels[batch], model, cfg.reduction)
        if cfg.clip_norm > 0:
            clip_grad_norm(grads, cfg.clip_norm)
        sgd_momentum_step(params, grads, opt)
        losses.append(loss / len(batch))
        if log_every and (it + 1) % log_every == 0:
            log.info("iter %d loss %.4f (avg last %d: %.4f)", it + 1, loss, log_every,
                     float(np.mean(losses[-log_every:])))
    return model, losses


def predict_proba(windows: Sequence[RawWindow], m: MetaUpdaterModel, chunk: int = 256) -> np.ndarray:
    out = []
    with_maps = not m.config.no_response_mode
    for s in range(0, len(windows), chunk):
        maps, feats = stack_windows(windows[s:s + chunk], with_maps)
        logits, _ = forward_batch(maps, feats, m)
        out.append(softmax(logits)[:, 1])
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------------------
# checkpoint

_HEADER = struct.Struct("<4sI")
_CONFIG = struct.Struct("<IIIIIIddI")


def to_bytes(m: MetaUpdaterModel) -> bytes:
    cfg = m.config
    flags = FLAG_NO_RESPONSE if cfg.no_response_mode else 0
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION),
             _CONFIG.pack(cfg.t_s, cfg.t_1, cfg.t_2, cfg.cue_dim, cfg.hidden, cfg.fc_hidden,
                          cfg.decision_threshold, cfg.forget_bias, flags)]
    arrays = m.named_arrays()
    parts.append(struct.pack("<Q", len(arrays)))
    for name, a in arrays.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str | struct.Struct):
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return s.unpack(self.read(s.size))


def from_bytes(buf: bytes) -> MetaUpdaterModel:
    r = _Reader(buf)
    magic, version = r.unpack(_HEADER)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    t_s, t_1, t_2, d, hidden, fc_hidden, thr, fb, flags = r.unpack(_CONFIG)
    try:
        cfg = MetaUpdaterConfig(t_s, t_1, t_2, hidden, fc_hidden, thr, fb, bool(flags & FLAG_NO_RESPONSE))
    except ValueError as e:
        raise CheckpointError(f"invalid config block: {e}") from e
    if cfg.cue_dim != d:
        raise CheckpointError(f"cue dim {d} inconsistent with flags")
    (count,) = r.unpack("<Q")
    if count > 1024:
        raise CheckpointError(f"implausible tensor count {count}")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        try:
            name = r.read(nlen).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError("tensor name is not UTF-8") from e
        (rank,) = r.unpack("<I")
        if rank > 8:
            raise CheckpointError(f"implausible rank {rank}")
        dims = r.unpack(f"<{rank}Q")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(r.read(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        arrays[name] = data
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after tensors")
    try:
        return MetaUpdaterModel.from_arrays(cfg, arrays)
    except ShapeError as e:
        raise CheckpointError(str(e)) from e


def save(m: MetaUpdaterModel, path) -> bytes:
    data = to_bytes(m)
    Path(path).write_bytes(data)
    return data


def load(path) -> MetaUpdaterModel:
    return from_bytes(Path(path).read_bytes())
