"""Dense float64 tensors with a define-by-run reverse-mode tape.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Operations that
receive at least one :class:`Var` record themselves on that variable's
:class:`Tape`; operations on bare arrays just compute the value.

A tape supports two backward modes:

* ``Tape.backward(loss)`` - ``loss`` is a scalar, returns one gradient per
  registered parameter.
* ``Tape.per_example_backward(losses)`` - ``losses`` is a length-B vector of
  independent per-example losses. Parameter gradients keep the leading batch
  axis, shape ``(B, *param.shape)``. Parameters may only enter the graph as the
  right operand of :func:`matmul` or as a broadcast addend (bias), which is
  all dense and LSTM layers need.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, ParameterError, TapeReuseError

DTYPE = np.float64

# gradient modes requested from an op's vjp for each input
_SKIP, _SUM, _BATCH = 0, 1, 2


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


class Var:
    """A node recorded on a tape."""

    __slots__ = ("value", "tape", "index")
    __array_ufunc__ = None  # make ndarray <op> Var dispatch to Var's reflected ops

    def __init__(self, value, tape, index):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return take(self, key)


class _Node:
    __slots__ = ("kind", "parents", "vjp", "param", "requires_grad")

    def __init__(self, kind, parents, vjp, param, requires_grad):
        self.kind = kind
        self.parents = parents
        self.vjp = vjp
        self.param = param
        self.requires_grad = requires_grad


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Entries are appended in execution order, so every entry's inputs precede
    it. A tape can be differentiated exactly once.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._params: dict[str, int] = {}
        self._shapes: dict[str, tuple] = {}
        self._consumed = False

    @property
    def num_entries(self) -> int:
        return len(self._nodes)

    @property
    def consumed(self) -> bool:
        return self._consumed

    @property
    def param_names(self) -> list[str]:
        return list(self._params)

    def param(self, name: str, value) -> Var:
        if self._consumed:
            raise TapeReuseError("tape already differentiated; record a new forward pass")
        if name in self._params:
            raise ContractError(f"parameter {name!r} registered twice on one tape")
        var = self._leaf(as_tensor(value), param=name)
        self._params[name] = var.index
        self._shapes[name] = var.value.shape
        return var

    def constant(self, value) -> Var:
        return self._leaf(as_tensor(value), param=None)

    def bind(self, tensors: dict) -> dict:
        """Register every array in ``tensors`` as a parameter; return name -> Var."""
        return {name: self.param(name, value) for name, value in tensors.items()}

    def _leaf(self, value, param):
        node = _Node("param" if param else "const", (), None, param, param is not None)
        self._nodes.append(node)
        return Var(value, self, len(self._nodes) - 1)

    def _record(self, kind, value, parents, vjp) -> Var:
        if self._consumed:
            raise TapeReuseError("tape already differentiated; record a new forward pass")
        ids = tuple(p.index if isinstance(p, Var) else None for p in parents)
        requires = any(i is not None and self._nodes[i].requires_grad for i in ids)
        self._nodes.append(_Node(kind, ids, vjp, None, requires))
        return Var(value, self, len(self._nodes) - 1)

    # backward -----------------------------------------------------------

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` for every registered parameter."""
        self._check_loss(loss)
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        return self._run(loss, per_example=False)

    def per_example_backward(self, losses: Var) -> dict[str, np.ndarray]:
        """Per-example parameter gradients for a vector of independent losses."""
        self._check_loss(losses)
        if losses.value.ndim != 1:
            raise ContractError(
                f"per-example backward needs a loss vector, got shape {losses.value.shape}")
        return self._run(losses, per_example=True)

    def _check_loss(self, loss):
        if self._consumed:
            raise TapeReuseError("tape already differentiated; replay is not allowed")
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ContractError("loss is not a node of this tape")

    def _run(self, loss, per_example):
        self._consumed = True
        nodes = self._nodes
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for idx in range(loss.index, -1, -1):
            g = grads.pop(idx, None)
            node = nodes[idx]
            if g is None or node.vjp is None:
                if g is not None:
                    grads[idx] = g  # leaf: keep for collection
                continue
            modes = []
            for pid in node.parents:
                if pid is None or not nodes[pid].requires_grad:
                    modes.append(_SKIP)
                elif per_example and nodes[pid].param is not None:
                    modes.append(_BATCH)
                else:
                    modes.append(_SUM)
            if not any(modes):
                continue
            for pid, mode, pg in zip(node.parents, modes, node.vjp(g, modes)):
                if mode == _SKIP:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        batch = loss.value.shape[0] if per_example else None
        out = {}
        for name, idx in self._params.items():
            g = grads.get(idx)
            if g is None:
                # parameter not reached from the loss
                g = np.zeros(((batch,) if per_example else ()) + self._shapes[name])
            out[name] = g
        return out


# ---------------------------------------------------------------------------
# helpers


def _val(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _emit(kind, value, parents, vjp):
    tape = _tape_of(*parents)
    if tape is None:
        return value
    return tape._record(kind, value, parents, vjp)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _unbroadcast_batched(g, shape):
    """Reduce ``g`` (batch axis first) to ``(B, *shape)``."""
    if g.ndim - 1 < len(shape):
        raise ContractError("per-example gradient needs the parameter to broadcast over the batch axis")
    while g.ndim - 1 > len(shape):
        g = g.sum(axis=1)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis + 1] != 1:
            g = g.sum(axis=axis + 1, keepdims=True)
    return g


def _reduce(g, shape, mode):
    if mode == _BATCH:
        return _unbroadcast_batched(g, shape)
    return _unbroadcast(g, shape)


def _no_batch(kind):
    raise ContractError(f"per-example gradients do not flow through parameters used in {kind!r}")


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b):
    """Matrix product ``a @ b`` for 2-D ``b`` and 1-D or 2-D ``a``."""
    av, bv = as_tensor(_val(a)), as_tensor(_val(b))
    if bv.ndim != 2 or av.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    out = av @ bv

    def vjp(g, modes):
        ga = gb = None
        if modes[0] == _BATCH:
            _no_batch("matmul (left operand)")
        if modes[0]:
            ga = g @ bv.T
        if modes[1] == _BATCH:
            if av.ndim != 2:
                _no_batch("matmul with a 1-D left operand")
            gb = av[:, :, None] * g[:, None, :]
        elif modes[1]:
            gb = np.outer(av, g) if av.ndim == 1 else av.T @ g
        return ga, gb

    return _emit("matmul", out, (a, b), vjp)


def add(a, b):
    av, bv = _val(a), _val(b)
    out = np.add(av, bv, dtype=DTYPE)
    sa, sb = np.shape(av), np.shape(bv)

    def vjp(g, modes):
        return (_reduce(g, sa, modes[0]) if modes[0] else None,
                _reduce(g, sb, modes[1]) if modes[1] else None)

    return _emit("add", out, (a, b), vjp)


def sub(a, b):
    av, bv = _val(a), _val(b)
    out = np.subtract(av, bv, dtype=DTYPE)
    sa, sb = np.shape(av), np.shape(bv)

    def vjp(g, modes):
        return (_reduce(g, sa, modes[0]) if modes[0] else None,
                -_reduce(g, sb, modes[1]) if modes[1] else None)

    return _emit("sub", out, (a, b), vjp)


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = np.multiply(av, bv, dtype=DTYPE)
    sa, sb = np.shape(av), np.shape(bv)

    def vjp(g, modes):
        if _BATCH in modes:
            _no_batch("mul")
        return (_unbroadcast(g * bv, sa) if modes[0] else None,
                _unbroadcast(g * av, sb) if modes[1] else None)

    return _emit("mul", out, (a, b), vjp)


def _unary(kind, x, out, dfn):
    def vjp(g, modes):
        if modes[0] == _BATCH:
            _no_batch(kind)
        return (dfn(g),)

    return _emit(kind, out, (x,), vjp)


def relu(x):
    xv = _val(x)
    out = np.maximum(xv, 0.0)
    return _unary("relu", x, out, lambda g: g * (xv > 0))


def sigmoid(x):
    out = expit(_val(x))
    return _unary("sigmoid", x, out, lambda g: g * out * (1.0 - out))


def tanh(x):
    out = np.tanh(_val(x))
    return _unary("tanh", x, out, lambda g: g * (1.0 - out * out))


def softmax(x, axis=-1):
    xv = _val(x)
    e = np.exp(xv - xv.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _unary("softmax", x, out,
                  lambda g: out * (g - (g * out).sum(axis=axis, keepdims=True)))


def softplus(x):
    """log(1 + exp(x)), computed without overflow."""
    xv = _val(x)
    out = np.logaddexp(0.0, xv)
    return _unary("softplus", x, out, lambda g: g * expit(xv))


def log(x):
    xv = _val(x)
    return _unary("log", x, np.log(xv), lambda g: g / xv)


def exp(x):
    out = np.exp(_val(x))
    return _unary("exp", x, out, lambda g: g * out)


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "softmax": softmax}


def apply_activation(kind, x):
    """Apply ``relu``, ``sigmoid``, ``tanh`` or ``softmax`` (over the last axis)."""
    if kind is None or kind == "linear":
        return x
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ParameterError(f"unknown activation {kind!r}") from None
    return fn(x)


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    xv = _val(x)
    out = np.sum(xv, axis=axis)
    shape = xv.shape

    def vjp(g, modes):
        if modes[0] == _BATCH:
            _no_batch("sum")
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(out, dtype=DTYPE), (x,), vjp)


def mean(x, axis=None):
    xv = _val(x)
    n = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis), 1.0 / n)


def take(x, key):
    """Indexing ``x[key]``; gradient scatters back into the source shape."""
    xv = _val(x)
    out = np.array(xv[key], dtype=DTYPE)

    def vjp(g, modes):
        if modes[0] == _BATCH:
            _no_batch("take")
        z = np.zeros(xv.shape)
        np.add.at(z, key, g)
        return (z,)

    return _emit("take", out, (x,), vjp)


def concat(xs, axis=-1):
    vals = [as_tensor(_val(x)) for x in xs]
    out = np.concatenate(vals, axis=axis)
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g, modes):
        if _BATCH in modes:
            _no_batch("concat")
        return tuple(np.split(g, sizes, axis=axis))

    return _emit("concat", out, tuple(xs), vjp)


def stack(xs, axis=0):
    vals = [as_tensor(_val(x)) for x in xs]
    out = np.stack(vals, axis=axis)

    def vjp(g, modes):
        if _BATCH in modes:
            _no_batch("stack")
        return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))

    return _emit("stack", out, tuple(xs), vjp)


def reshape(x, shape):
    xv = _val(x)
    out = np.reshape(xv, shape)

    def vjp(g, modes):
        if modes[0] == _BATCH:
            _no_batch("reshape")
        return (np.reshape(g, xv.shape),)

    return _emit("reshape", out, (x,), vjp)


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# random numbers


class SeededRng:
    """Seeded counter-based generator (numpy Philox4x64-10).

    The full stream position is captured by :meth:`get_state`, so a restored
    generator continues the exact same sequence.
    """

    STREAM = "philox4x64-10/numpy-generator"

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, shape, mean=0.0, std=1.0) -> np.ndarray:
        return gaussian(self, shape, mean, std)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size=None, p=None):
        return self._gen.choice(n, size=size, p=p)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def get_state(self) -> dict:
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {"counter": np.array(state["counter"], dtype=np.uint64),
                      "key": np.array(state["key"], dtype=np.uint64)},
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": int(state["buffer_pos"]),
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "SeededRng":
        rng = cls(state["seed"])
        rng.set_state(state)
        return rng

    def copy(self) -> "SeededRng":
        return SeededRng.from_state(self.get_state())


def gaussian(rng: SeededRng, shape, mean=0.0, std=1.0) -> np.ndarray:
    if std < 0:
        raise ParameterError(f"standard deviation must be >= 0, got {std}")
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    if std == 0:
        return np.full(shape, float(mean))
    return mean + std * rng.generator.standard_normal(shape)
