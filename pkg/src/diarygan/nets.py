"""Two-branch generator and discriminator built on :mod:`diarygan.numcore`.

Generator::

    z -> dense trunk (relu) -+-> per-variable head: dense (relu) -> dense -> softmax | 2*sigmoid-1
                             +-> repeat T times -> LSTM stack -> LSTM(5) -> T x 5 sequence

Discriminator::

    tabular -> dense (relu) -> dense (relu) ---------------------------+
    sequence -> bidirectional LSTM -> LSTM (last hidden state) --------+-> concat -> dense(1)

All forward functions accept parameter mappings whose values are either plain
arrays or tape variables, so the same code serves inference, ordinary
backpropagation and per-example gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numcore as nc
from .data import SEQ_FEATURES, Codec
from .errors import DimensionError, ParameterError

GEN, DISC = "gen.", "disc."


@dataclass(frozen=True)
class HeadSpec:
    name: str
    kind: str  # "softmax" (categorical block) or "sigmoid" (numeric channel)
    width: int


@dataclass(frozen=True)
class NetConfig:
    heads: tuple
    latent_dim: int = 100
    trunk_width: int = 256
    head_hidden: int = 64
    gen_lstm: tuple = (500, 500, 500)
    seq_features: int = SEQ_FEATURES
    max_len: int = 20
    disc_dense: tuple = (500, 200)
    disc_bilstm: int = 500
    disc_lstm: int = 100

    def __post_init__(self):
        widths = [self.latent_dim, self.trunk_width, self.head_hidden, self.seq_features,
                  self.disc_bilstm, self.disc_lstm, *self.gen_lstm, *self.disc_dense]
        if any(int(w) < 1 for w in widths):
            raise ParameterError("all layer widths must be >= 1")
        if self.max_len < 3:
            raise ParameterError(f"max_len must be >= 3, got {self.max_len}")
        if not self.gen_lstm or not self.disc_dense:
            raise ParameterError("generator LSTM stack and discriminator dense stack need >= 1 layer")
        if not self.heads:
            raise ParameterError("at least one tabular head is required")
        for h in self.heads:
            if h.kind not in ("softmax", "sigmoid") or h.width < 1:
                raise ParameterError(f"bad head spec {h}")

    @property
    def tabular_width(self) -> int:
        return sum(h.width for h in self.heads)

    @classmethod
    def from_codec(cls, codec: Codec, **overrides) -> "NetConfig":
        heads = tuple(HeadSpec(v.name, "softmax" if v.is_categorical else "sigmoid", v.width)
                      for v in codec.schema.variables)
        overrides.setdefault("max_len", codec.max_len)
        return cls(heads=heads, **overrides)

    def to_dict(self):
        d = {k: getattr(self, k) for k in ("latent_dim", "trunk_width", "head_hidden", "seq_features",
                                           "max_len", "disc_bilstm", "disc_lstm")}
        d["gen_lstm"] = list(self.gen_lstm)
        d["disc_dense"] = list(self.disc_dense)
        d["heads"] = [[h.name, h.kind, h.width] for h in self.heads]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["heads"] = tuple(HeadSpec(*h) for h in d["heads"])
        d["gen_lstm"] = tuple(d["gen_lstm"])
        d["disc_dense"] = tuple(d["disc_dense"])
        return cls(**d)


@dataclass
class GeneratorParams:
    config: NetConfig
    tensors: dict = field(default_factory=dict)

    def copy(self):
        return replace(self, tensors={k: v.copy() for k, v in self.tensors.items()})


@dataclass
class DiscriminatorParams:
    config: NetConfig
    tensors: dict = field(default_factory=dict)

    def copy(self):
        return replace(self, tensors={k: v.copy() for k, v in self.tensors.items()})


@dataclass
class LstmCellParams:
    """Gate weights stacked in the order input, forget, output, candidate."""

    wx: object  # d x 4h
    wh: object  # h x 4h
    b: object   # 4h

    @property
    def hidden_size(self) -> int:
        return nc._val(self.wh).shape[0]

    @property
    def input_size(self) -> int:
        return nc._val(self.wx).shape[0]

    @classmethod
    def from_tensors(cls, p, prefix):
        return cls(p[prefix + "wx"], p[prefix + "wh"], p[prefix + "b"])


# ---------------------------------------------------------------------------
# parameter layout and initialisation


def _dense_shapes(prefix, n_in, n_out):
    return [(prefix + "w", (n_in, n_out), ("dense", n_in, n_out)), (prefix + "b", (n_out,), None)]


def _lstm_shapes(prefix, d, h):
    return [(prefix + "wx", (d, 4 * h), ("gates", d, h)), (prefix + "wh", (h, 4 * h), ("gates", h, h)),
            (prefix + "b", (4 * h,), None)]


def generator_layout(cfg: NetConfig):
    out = _dense_shapes(GEN + "trunk.", cfg.latent_dim, cfg.trunk_width)
    for h in cfg.heads:
        out += _dense_shapes(f"{GEN}head.{h.name}.hidden.", cfg.trunk_width, cfg.head_hidden)
        out += _dense_shapes(f"{GEN}head.{h.name}.out.", cfg.head_hidden, h.width)
    d = cfg.trunk_width
    for k, width in enumerate(cfg.gen_lstm):
        out += _lstm_shapes(f"{GEN}lstm{k}.", d, width)
        d = width
    out += _lstm_shapes(f"{GEN}lstm_out.", d, cfg.seq_features)
    return out


def discriminator_layout(cfg: NetConfig):
    out, d = [], cfg.tabular_width
    for k, width in enumerate(cfg.disc_dense):
        out += _dense_shapes(f"{DISC}dense{k}.", d, width)
        d = width
    out += _lstm_shapes(f"{DISC}bilstm.fwd.", cfg.seq_features, cfg.disc_bilstm)
    out += _lstm_shapes(f"{DISC}bilstm.bwd.", cfg.seq_features, cfg.disc_bilstm)
    out += _lstm_shapes(f"{DISC}lstm.", 2 * cfg.disc_bilstm, cfg.disc_lstm)
    out += _dense_shapes(f"{DISC}out.", cfg.disc_dense[-1] + cfg.disc_lstm, 1)
    return out


def glorot_bound(fan_in, fan_out) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _init(layout, rng: nc.SeededRng):
    tensors = {}
    for name, shape, fans in layout:
        if fans is None:
            tensors[name] = np.zeros(shape)
        else:
            # fans = (kind, fan_in, fan_out); LSTM gate blocks are scaled per gate
            bound = glorot_bound(fans[1], fans[2])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return tensors


def init_params(config: NetConfig, rng: nc.SeededRng):
    """Glorot-uniform weights, zero biases, deterministic in the rng state."""
    g = GeneratorParams(config, _init(generator_layout(config), rng))
    d = DiscriminatorParams(config, _init(discriminator_layout(config), rng))
    return g, d


def zero_params(config: NetConfig):
    g = GeneratorParams(config, {n: np.zeros(s) for n, s, _ in generator_layout(config)})
    d = DiscriminatorParams(config, {n: np.zeros(s) for n, s, _ in discriminator_layout(config)})
    return g, d


# ---------------------------------------------------------------------------
# layers


def dense(p, prefix, x, activation=None):
    return nc.apply_activation(activation, nc.matmul(x, p[prefix + "w"]) + p[prefix + "b"])


def lstm_cell_step(p: LstmCellParams, x_t, h, c, x_proj=None):
    """One step of a forget-gate LSTM; ``h``/``c`` may be None for zero state.

    ``x_proj`` optionally supplies a precomputed ``x_t @ wx``.
    """
    H = p.hidden_size
    if x_proj is None:
        xv = nc._val(x_t)
        if xv.shape[-1] != p.input_size:
            raise DimensionError(f"LSTM input width {xv.shape} does not match cell input size {p.input_size}")
        x_proj = nc.matmul(x_t, p.wx)
    if h is not None:
        hv, cv = nc._val(h), nc._val(c)
        if hv.shape[-1] != H or cv.shape[-1] != H:
            raise DimensionError(f"LSTM state shapes {hv.shape}/{cv.shape} do not match hidden size {H}")
        z = x_proj + nc.matmul(h, p.wh) + p.b
    else:
        z = x_proj + p.b
    gates = nc.sigmoid(z[..., :3 * H])
    g = nc.tanh(z[..., 3 * H:])
    i, f, o = gates[..., :H], gates[..., H:2 * H], gates[..., 2 * H:]
    c_new = i * g if h is None else f * c + i * g
    h_new = o * nc.tanh(c_new)
    return h_new, c_new


def lstm_sequence(p: LstmCellParams, xs, reverse=False, repeated_proj=None, steps=None):
    """Run a cell over a list of inputs; returns hidden states in input order.

    With ``repeated_proj`` the same projected input is fed at every one of
    ``steps`` steps (repeat-vector input) and ``xs`` is ignored.
    """
    n = steps if repeated_proj is not None else len(xs)
    order = range(n - 1, -1, -1) if reverse else range(n)
    h = c = None
    hs = [None] * n
    for t in order:
        if repeated_proj is not None:
            h, c = lstm_cell_step(p, None, h, c, x_proj=repeated_proj)
        else:
            h, c = lstm_cell_step(p, xs[t], h, c)
        hs[t] = h
    return hs


def bidirectional_lstm_forward(p_fwd: LstmCellParams, p_bwd: LstmCellParams, seq):
    """Forward pass over t=1..T and backward pass over t=T..1, concatenated per step.

    ``seq`` is ``T x d`` (single sequence) or ``B x T x d``; output is
    ``T x 2h`` or ``B x T x 2h``.
    """
    steps = _bilstm_steps(p_fwd, p_bwd, seq)
    return nc.stack(steps, axis=nc._val(seq).ndim - 2)


def _bilstm_steps(p_fwd, p_bwd, seq):
    sv = nc._val(seq)
    if p_fwd.hidden_size != p_bwd.hidden_size:
        raise DimensionError("forward and backward cells need the same hidden size")
    if sv.ndim not in (2, 3) or sv.shape[-1] != p_fwd.input_size:
        raise DimensionError(f"sequence shape {sv.shape} does not match cell input size {p_fwd.input_size}")
    axis = sv.ndim - 2
    xs = [seq[t] if axis == 0 else seq[:, t, :] for t in range(sv.shape[axis])]
    fwd = lstm_sequence(p_fwd, xs)
    bwd = lstm_sequence(p_bwd, xs, reverse=True)
    return [nc.concat([a, b], axis=-1) for a, b in zip(fwd, bwd)]


# ---------------------------------------------------------------------------
# networks


def _generator(p, cfg: NetConfig, z):
    zv = nc._val(z)
    if zv.ndim != 2 or zv.shape[1] != cfg.latent_dim:
        raise DimensionError(f"latent input {zv.shape} does not match latent dim {cfg.latent_dim}")
    trunk = dense(p, GEN + "trunk.", z, "relu")
    blocks = []
    for h in cfg.heads:
        hid = dense(p, f"{GEN}head.{h.name}.hidden.", trunk, "relu")
        logits = dense(p, f"{GEN}head.{h.name}.out.", hid)
        if h.kind == "softmax":
            blocks.append(nc.softmax(logits))
        else:
            blocks.append(nc.sigmoid(logits) * 2.0 - 1.0)
    tabular = blocks[0] if len(blocks) == 1 else nc.concat(blocks, axis=1)

    first = LstmCellParams.from_tensors(p, GEN + "lstm0.")
    hs = lstm_sequence(first, None, repeated_proj=nc.matmul(trunk, first.wx), steps=cfg.max_len)
    for k in range(1, len(cfg.gen_lstm)):
        hs = lstm_sequence(LstmCellParams.from_tensors(p, f"{GEN}lstm{k}."), hs)
    hs = lstm_sequence(LstmCellParams.from_tensors(p, GEN + "lstm_out."), hs)
    # the cell output o*tanh(c) already lies in (-1, 1)
    sequence = nc.stack(hs, axis=1)
    return tabular, sequence


def _discriminator(p, cfg: NetConfig, tabular, sequence):
    tv, sv = nc._val(tabular), nc._val(sequence)
    if tv.ndim != 2 or tv.shape[1] != cfg.tabular_width:
        raise DimensionError(f"tabular input {tv.shape} does not match width {cfg.tabular_width}")
    if sv.shape != (tv.shape[0], cfg.max_len, cfg.seq_features):
        raise DimensionError(
            f"sequence input {sv.shape} does not match batch x {cfg.max_len} x {cfg.seq_features}")
    x = tabular
    for k in range(len(cfg.disc_dense)):
        x = dense(p, f"{DISC}dense{k}.", x, "relu")
    steps = _bilstm_steps(LstmCellParams.from_tensors(p, DISC + "bilstm.fwd."),
                          LstmCellParams.from_tensors(p, DISC + "bilstm.bwd."), sequence)
    hs = lstm_sequence(LstmCellParams.from_tensors(p, DISC + "lstm."), steps)
    merged = nc.concat([x, hs[-1]], axis=1)
    return dense(p, DISC + "out.", merged)


def _bind(params, tape):
    return tape.bind(params.tensors) if tape is not None else params.tensors


def generator_forward(g: GeneratorParams, z, tape=None):
    """Return ``(tabular B x W_tab, sequence B x T x 5)``."""
    return _generator(_bind(g, tape), g.config, z)


def discriminator_logits(d: DiscriminatorParams, tabular, sequence, tape=None):
    return _discriminator(_bind(d, tape), d.config, tabular, sequence)


def discriminator_forward(d: DiscriminatorParams, tabular, sequence, loss="standard", tape=None):
    """Score per example: probability (standard loss) or raw critic value (wasserstein)."""
    logits = discriminator_logits(d, tabular, sequence, tape)
    if loss == "standard":
        return nc.sigmoid(logits)
    if loss == "wasserstein":
        return logits
    raise ParameterError(f"unknown loss variant {loss!r}")
