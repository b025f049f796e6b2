"""Naive scalar-loop reference implementations used as test oracles."""

import math

import numpy as np


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def lstm_step(x, h, c, p):
    """p maps "W_f" ... "b_c" to nested lists / arrays."""
    H = len(h)
    D = len(x)

    def pre(g, j):
        s = p[f"b_{g}"][j]
        for k in range(D):
            s += p[f"W_{g}"][j][k] * x[k]
        for k in range(H):
            s += p[f"U_{g}"][j][k] * h[k]
        return s

    h2, c2 = [], []
    for j in range(H):
        f = sig(pre("f", j))
        i = sig(pre("i", j))
        o = sig(pre("o", j))
        g = math.tanh(pre("c", j))
        cj = f * c[j] + i * g
        c2.append(cj)
        h2.append(o * math.tanh(cj))
    return h2, c2


def lstm_run(xs, p, H):
    h, c = [0.0] * H, [0.0] * H
    hs, cs = [], []
    for x in xs:
        h, c = lstm_step(x, h, c, p)
        hs.append(h)
        cs.append(c)
    return hs, cs


def conv2d(x, k, b, stride):
    """x[H][W][C], k[kh][kw][C][O] -> valid cross-correlation."""
    H, W, C = len(x), len(x[0]), len(x[0][0])
    kh, kw, O = len(k), len(k[0]), len(k[0][0][0])
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    out = np.zeros((Ho, Wo, O))
    for i in range(Ho):
        for j in range(Wo):
            for o in range(O):
                s = b[o]
                for a in range(kh):
                    for bb in range(kw):
                        for ch in range(C):
                            s += k[a][bb][ch][o] * x[i * stride + a][j * stride + bb][ch]
                out[i, j, o] = s
    return out


def gap(x):
    H, W, C = len(x), len(x[0]), len(x[0][0])
    out = np.zeros((1, 1, C))
    for ch in range(C):
        s = 0.0
        for i in range(H):
            for j in range(W):
                s += x[i][j][ch]
        out[0, 0, ch] = s / (H * W)
    return out


def dense(x, W, b, act):
    out = []
    for j in range(len(b)):
        s = b[j]
        for k in range(len(x)):
            s += W[j][k] * x[k]
        out.append(math.tanh(s) if act == "tanh" else s)
    return np.array(out)


def cascade(X, m):
    """Reference for the three-stage cascade; X is a t_s x d list."""
    cfg = m.config
    P = [{k: v.tolist() for k, v in getattr(m, s).arrays().items()} for s in ("lstm1", "lstm2", "lstm3")]
    H = [m.lstm1.hidden, m.lstm2.hidden, m.lstm3.hidden]
    h1, c1 = lstm_run(X, P[0], H[0])
    in2 = [h1[t] + c1[-1] for t in range(len(X) - cfg.t_1, len(X))]
    h2, c2 = lstm_run(in2, P[1], H[1])
    in3 = [h2[t] + c2[-1] for t in range(cfg.t_1 - cfg.t_2, cfg.t_1)]
    h3, _ = lstm_run(in3, P[2], H[2])
    a = dense(h3[-1], m.fc1_W.tolist(), m.fc1_b.tolist(), "tanh")
    z = dense(a.tolist(), m.fc2_W.tolist(), m.fc2_b.tolist(), "none")
    mx = max(z)
    e = [math.exp(v - mx) for v in z]
    return e[1] / (e[0] + e[1])
