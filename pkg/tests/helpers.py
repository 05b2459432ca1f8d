"""Independent oracles and small builders shared by the test modules."""
from __future__ import annotations

import numpy as np

from diarygan import data, fixture, numcore as nc
from diarygan.nets import NetConfig

TINY_NET = dict(latent_dim=4, trunk_width=6, head_hidden=4, gen_lstm=(3,), disc_dense=(5, 4),
                disc_bilstm=3, disc_lstm=3)

# "PASS criterion N: ..." lines, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report_criterion(n: int, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


# ---------------------------------------------------------------------------
# finite differences


def fd_relative_error(loss_fn, params: dict, step: float = 1e-5) -> float:
    """Relative error between tape gradients and central differences.

    ``loss_fn(p)`` builds the loss from a name -> array-or-Var map and must
    work on plain arrays too. The error is ``||a - n|| / max(||a||, ||n||)``
    over all parameters flattened jointly.
    """
    tape = nc.Tape()
    analytic = tape.backward(loss_fn(tape.bind(params)))
    a_parts, n_parts = [], []
    for name in params:
        base = {k: np.array(v, dtype=float) for k, v in params.items()}
        numeric = np.zeros_like(base[name])
        for idx in np.ndindex(base[name].shape):
            orig = base[name][idx]
            base[name][idx] = orig + step
            up = float(np.asarray(loss_fn(base)))
            base[name][idx] = orig - step
            down = float(np.asarray(loss_fn(base)))
            base[name][idx] = orig
            numeric[idx] = (up - down) / (2 * step)
        a_parts.append(analytic[name].ravel())
        n_parts.append(numeric.ravel())
    a, n = np.concatenate(a_parts), np.concatenate(n_parts)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def dense_instance(rng):
    """Two-layer relu/tanh MLP with a squared-error loss, dims <= 8."""
    d, h, o, b = rng.integers(2, 9, size=4)
    x = rng.normal(size=(b, d))
    y = rng.normal(size=(b, o))
    params = {"w1": rng.normal(size=(d, h)), "b1": rng.normal(size=h),
              "w2": rng.normal(size=(h, o)), "b2": rng.normal(size=o)}

    def loss(p):
        hid = nc.relu(nc.matmul(x, p["w1"]) + p["b1"])
        out = nc.tanh(nc.matmul(hid, p["w2"]) + p["b2"])
        r = out - y
        return nc.mean(r * r)
    return loss, params


def softmax_head_instance(rng):
    """Dense layer into a softmax block scored by cross-entropy, dims <= 8."""
    d, k, b = rng.integers(2, 9, size=3)
    x = rng.normal(size=(b, d))
    target = np.eye(k)[rng.integers(0, k, size=b)]
    params = {"w": rng.normal(size=(d, k)), "b": rng.normal(size=k)}

    def loss(p):
        probs = nc.softmax(nc.matmul(x, p["w"]) + p["b"])
        return -nc.mean(nc.sum(nc.log(probs) * target, axis=1))
    return loss, params


def lstm_instance(rng):
    """Three LSTM steps from a random state, scored by a weighted sum, dims <= 8."""
    from diarygan.nets import LstmCellParams, lstm_cell_step

    d, h, b = rng.integers(2, 9, size=3)
    xs = [rng.normal(size=(b, d)) for _ in range(3)]
    h0, c0 = rng.normal(size=(b, h)), rng.normal(size=(b, h))
    weight = rng.normal(size=(b, h))
    params = {"wx": rng.normal(size=(d, 4 * h)) * 0.5, "wh": rng.normal(size=(h, 4 * h)) * 0.5,
              "b": rng.normal(size=4 * h) * 0.5}

    def loss(p):
        cell = LstmCellParams(p["wx"], p["wh"], p["b"])
        hh, cc = h0, c0
        for x in xs:
            hh, cc = lstm_cell_step(cell, x, hh, cc)
        return nc.sum(hh * weight) + nc.sum(cc * cc) * 0.1
    return loss, params


# ---------------------------------------------------------------------------
# reference LSTM cell


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def reference_lstm_step(wx, wh, b, x, h, c):
    """Straight-line forget-gate LSTM with gate blocks ordered i, f, o, g."""
    H = wh.shape[0]
    i = _sigmoid(x @ wx[:, 0:H] + h @ wh[:, 0:H] + b[0:H])
    f = _sigmoid(x @ wx[:, H:2 * H] + h @ wh[:, H:2 * H] + b[H:2 * H])
    o = _sigmoid(x @ wx[:, 2 * H:3 * H] + h @ wh[:, 2 * H:3 * H] + b[2 * H:3 * H])
    g = np.tanh(x @ wx[:, 3 * H:] + h @ wh[:, 3 * H:] + b[3 * H:])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


# ---------------------------------------------------------------------------
# Jacobi eigen-solver


def jacobi_eigh(a, tol: float = 1e-14, max_sweeps: int = 100):
    """Cyclic Jacobi rotations for a symmetric matrix; returns descending (values, vectors)."""
    a = np.array(a, dtype=float)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt((np.triu(a, 1) ** 2).sum())
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1)) if theta != 0 else 1.0
                cs = 1 / np.sqrt(t * t + 1)
                sn = t * cs
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = cs
                rot[p, q], rot[q, p] = sn, -sn
                a = rot.T @ a @ rot
                v = v @ rot
    vals = np.diag(a)
    order = np.argsort(-vals)
    return vals[order], v[:, order]


# ---------------------------------------------------------------------------
# builders


def toy_dataset(seed: int = 0, n: int = 40, max_len: int = 4) -> data.Dataset:
    records = fixture.synth_toy_fixture(seed, n)
    codec = data.fit_codec(records, fixture.toy_schema(), max_len)
    return data.Dataset.from_records(records, codec, f"toy seed={seed}")


def survey_dataset(seed: int = 0, n: int = 30, max_len: int = 7) -> data.Dataset:
    records = data.filter_home_based(fixture.synth_fixture(seed, n))
    codec = data.fit_codec(records, data.survey_schema(), max_len)
    return data.Dataset.from_records(records, codec, f"survey seed={seed}")


def tiny_config(codec, **overrides) -> NetConfig:
    return NetConfig.from_codec(codec, **{**TINY_NET, **overrides})
