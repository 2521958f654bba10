"""Small dense-tensor toolkit: a reverse-mode tape, tanh MLPs and the DBT1 container.

Values are plain float64 numpy arrays.  An op called with only arrays runs
eagerly and returns an array; if any argument is a :class:`Var` the op is
recorded on that variable's :class:`Tape` and a new ``Var`` is returned.  The
same numpy expression is evaluated in both cases, so recorded and unrecorded
forward passes agree bit for bit.

Broadcasting is limited to bias-add and scalar scaling; everything else goes
through explicit ``expand``/``reshape`` ops so the tape stays easy to audit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, ParseError

__all__ = [
    "Tape", "Var", "vjp", "mlp_apply", "init_mlp",
    "matmul", "add", "sub", "mul", "scale", "add_bias", "tanh", "exp",
    "square", "sum", "mean", "max", "concat", "expand", "reshape",
    "columns", "neighbor_mean", "log_softmax",
    "write_tensor", "read_tensor", "save_tensors", "load_tensors",
]

DBT_MAGIC = b"DBT1"


class _Ref(int):
    """Tape-local pointer to an earlier node.  Nodes store these instead of
    :class:`Var` so a tape holds no reference to itself and is freed promptly."""


@dataclass
class _Node:
    op: str
    fn: Callable | None
    vjps: Sequence[Callable] | None
    args: tuple
    value: np.ndarray


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "index")
    __array_priority__ = 1000

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self):
        node = self.tape.nodes[self.index]
        return f"Var(#{self.index} {node.op} shape={self.shape})"


@dataclass
class Tape:
    """Ordered record of primitive ops; nodes are stored in topological order."""

    nodes: list = field(default_factory=list)
    leaves: dict = field(default_factory=dict)

    def leaf(self, value, name: str | None = None) -> Var:
        value = np.array(value, dtype=np.float64)
        idx = len(self.nodes)
        self.nodes.append(_Node("leaf", None, None, (), value))
        if name is not None:
            if name in self.leaves:
                raise ValueError(f"duplicate leaf name {name!r}")
            self.leaves[name] = idx
        else:
            self.leaves[idx] = idx
        return Var(self, idx)

    def _record(self, op, fn, vjps, args, value) -> Var:
        args = tuple(_Ref(a.index) if isinstance(a, Var) else a for a in args)
        self.nodes.append(_Node(op, fn, vjps, args, value))
        return Var(self, len(self.nodes) - 1)

    def _leaf_index(self, wrt) -> int:
        if isinstance(wrt, Var):
            if wrt.tape is not self or self.nodes[wrt.index].op != "leaf":
                raise ValueError("wrt is not a leaf of this tape")
            return wrt.index
        if wrt not in self.leaves:
            raise ValueError(f"unknown leaf {wrt!r}")
        return self.leaves[wrt]

    def backward(self, output: Var, cotangent) -> dict:
        """Accumulate cotangents from ``output`` back to every node it depends on."""
        if output.tape is not self:
            raise ValueError("output belongs to another tape")
        cotangent = np.asarray(cotangent, dtype=np.float64)
        if cotangent.shape != output.shape:
            raise DimensionError(
                f"cotangent shape {cotangent.shape} != output shape {output.shape}")
        grads = {output.index: cotangent}
        for i in range(output.index, -1, -1):
            g = grads.get(i)
            node = self.nodes[i]
            if g is None or node.op == "leaf":
                continue
            vals = [self.nodes[a].value if isinstance(a, _Ref) else a for a in node.args]
            for arg, rule in zip(node.args, node.vjps):
                if not isinstance(arg, _Ref):
                    continue
                contrib = rule(g, vals, node.value)
                j = int(arg)
                grads[j] = contrib if j not in grads else grads[j] + contrib
        return grads

    def vjp(self, output: Var, cotangent, wrt):
        """cotangentᵀ·∂output/∂leaf for one leaf or a list of leaves."""
        many = isinstance(wrt, (list, tuple))
        targets = [self._leaf_index(w) for w in (wrt if many else [wrt])]
        grads = self.backward(output, cotangent)
        out = [grads.get(j, np.zeros_like(self.nodes[j].value)) for j in targets]
        return out if many else out[0]

    def replay(self) -> list:
        """Recompute every node from the leaf values; returns the new values."""
        values = []
        for node in self.nodes:
            if node.op == "leaf":
                values.append(node.value)
                continue
            vals = [values[a] if isinstance(a, _Ref) else a for a in node.args]
            values.append(node.fn(*vals))
        return values


def vjp(tape: Tape, cotangent, wrt, output: Var | None = None):
    """Module-level form of :meth:`Tape.vjp`; ``output`` defaults to the last node."""
    if output is None:
        output = Var(tape, len(tape.nodes) - 1)
    return tape.vjp(output, cotangent, wrt)


def _apply(op, fn, vjps, *args):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("cannot mix variables from different tapes")
    vals = [a.value if isinstance(a, Var) else a for a in args]
    out = fn(*vals)
    if tape is None:
        return out
    return tape._record(op, fn, vjps, args, out)


def _shape(a):
    return a.shape if isinstance(a, Var) else np.shape(a)


def _same_shape(op, a, b):
    if _shape(a) != _shape(b):
        raise DimensionError(f"{op}: shapes {_shape(a)} and {_shape(b)} differ")


# --- primitive ops ---------------------------------------------------------

def matmul(x, w):
    """(..., d) @ (d, k) -> (..., k).  The right operand must be 2-D."""
    sx, sw = _shape(x), _shape(w)
    if len(sw) != 2 or sx[-1] != sw[0]:
        raise DimensionError(f"matmul: cannot chain {sx} with {sw}")

    def gx(g, v, out):
        return g @ v[1].T

    def gw(g, v, out):
        x2 = v[0].reshape(-1, v[0].shape[-1])
        return x2.T @ g.reshape(-1, g.shape[-1])

    return _apply("matmul", np.matmul, (gx, gw), x, w)


def add_bias(x, b):
    if _shape(b) != (_shape(x)[-1],):
        raise DimensionError(f"add_bias: bias {_shape(b)} vs input {_shape(x)}")

    def gb(g, v, out):
        return g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _apply("add_bias", np.add, (lambda g, v, o: g, gb), x, b)


def add(a, b):
    _same_shape("add", a, b)
    return _apply("add", np.add, (lambda g, v, o: g, lambda g, v, o: g), a, b)


def sub(a, b):
    _same_shape("sub", a, b)
    return _apply("sub", np.subtract, (lambda g, v, o: g, lambda g, v, o: -g), a, b)


def mul(a, b):
    _same_shape("mul", a, b)
    return _apply("mul", np.multiply,
                  (lambda g, v, o: g * v[1], lambda g, v, o: g * v[0]), a, b)


def scale(a, c: float):
    c = float(c)
    return _apply("scale", lambda x: x * c, (lambda g, v, o: g * c,), a)


def tanh(a):
    return _apply("tanh", np.tanh, (lambda g, v, o: g * (1.0 - o * o),), a)


def exp(a):
    return _apply("exp", np.exp, (lambda g, v, o: g * o,), a)


def square(a):
    return _apply("square", np.square, (lambda g, v, o: 2.0 * g * v[0],), a)


def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    def fn(x):
        return np.sum(x, axis=axis)

    def rule(g, v, out):
        shape = v[0].shape
        if axis is None:
            return np.full(shape, g, dtype=np.float64)
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return _apply("sum", fn, (rule,), a)


def mean(a, axis=None):
    n = int(np.prod(_shape(a))) if axis is None else _shape(a)[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def max(a, axis: int):  # noqa: A001 - mirrors numpy
    """Max-reduction; the gradient goes to the first maximal entry."""

    def fn(x):
        return np.max(x, axis=axis)

    def rule(g, v, out):
        x = v[0]
        idx = np.expand_dims(np.argmax(x, axis=axis), axis)
        res = np.zeros_like(x)
        np.put_along_axis(res, idx, np.expand_dims(g, axis), axis=axis)
        return res

    return _apply("max", fn, (rule,), a)


def concat(parts, axis: int = -1):
    sizes = [_shape(p)[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def fn(*xs):
        return np.concatenate(xs, axis=axis)

    def make_rule(k):
        lo, hi = bounds[k], bounds[k + 1]

        def rule(g, v, out):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        return rule

    return _apply("concat", fn, tuple(make_rule(k) for k in range(len(parts))), *parts)


def expand(a, axis: int, n: int):
    """Insert a new axis of length ``n`` by repetition (explicit broadcast)."""

    def fn(x):
        return np.repeat(np.expand_dims(x, axis), n, axis=axis)

    return _apply("expand", fn, (lambda g, v, o: g.sum(axis=axis),), a)


def reshape(a, shape):
    shape = tuple(shape)
    return _apply("reshape", lambda x: x.reshape(shape),
                  (lambda g, v, o: g.reshape(v[0].shape),), a)


def columns(a, start: int, stop: int):
    """Slice of the last axis."""

    def fn(x):
        return x[..., start:stop]

    def rule(g, v, out):
        res = np.zeros_like(v[0])
        res[..., start:stop] = g
        return res

    return _apply("columns", fn, (rule,), a)


def neighbor_mean(a, idx):
    """Mean of ``a[b, idx[b, i, :]]`` for a ``(B, n, c)`` input and ``(B, n, k)`` integer indices."""
    idx = np.asarray(idx)
    bsz, n = _shape(a)[:2]
    if idx.ndim != 3 or idx.shape[:2] != (bsz, n):
        raise DimensionError(f"neighbor_mean: index shape {idx.shape} does not match {_shape(a)}")
    k = idx.shape[2]
    rows = np.arange(bsz)[:, None, None]
    flat = (rows * n + idx).ravel()

    def fn(x):
        return x[rows, idx].mean(axis=2)

    def rule(g, v, out):
        c = g.shape[-1]
        spread = np.repeat(g / k, k, axis=1).reshape(-1, c)  # row (b, i, j) carries g[b, i] / k
        res = np.stack([np.bincount(flat, weights=spread[:, j], minlength=bsz * n)
                        for j in range(c)], axis=-1)
        return res.reshape(v[0].shape)

    return _apply("neighbor_mean", fn, (rule,), a)


def log_softmax(a):
    """Log-softmax over the last axis."""

    def fn(x):
        m = np.max(x, axis=-1, keepdims=True)
        s = x - m
        return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))

    def rule(g, v, out):
        return g - np.exp(out) * np.sum(g, axis=-1, keepdims=True)

    return _apply("log_softmax", fn, (rule,), a)


# --- MLPs ------------------------------------------------------------------

def init_mlp(sizes: Sequence[int], rng: np.random.Generator, gain: float = 1.0):
    """Glorot-style init for an MLP with layer widths ``sizes``."""
    params = []
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        w = rng.standard_normal((d_in, d_out)) * gain * np.sqrt(1.0 / d_in)
        params.append((w, np.zeros(d_out)))
    return params


def mlp_apply(params, x, record: bool = False, tape: Tape | None = None):
    """Affine layers with tanh between them (the last layer is linear).

    ``params`` is a list of ``(W, b)`` pairs whose entries may be arrays or
    tape variables.  With ``record`` set and plain-array inputs, a fresh tape
    is created with leaves ``"input"``, ``"W0"``, ``"b0"``, ... and returned
    alongside the output; otherwise the tape slot is ``None`` (or the tape the
    inputs already live on).
    """
    width = _shape(x)[-1]
    for k, (w, b) in enumerate(params):
        if len(_shape(w)) != 2 or _shape(w)[0] != width or _shape(b) != (_shape(w)[1],):
            raise DimensionError(
                f"layer {k}: weight {_shape(w)} / bias {_shape(b)} do not chain from width {width}")
        width = _shape(w)[1]

    if record and tape is None and not isinstance(x, Var):
        tape = Tape()
        x = tape.leaf(x, "input")
        params = [(tape.leaf(w, f"W{k}"), tape.leaf(b, f"b{k}"))
                  for k, (w, b) in enumerate(params)]
    h = x
    last = len(params) - 1
    for k, (w, b) in enumerate(params):
        h = add_bias(matmul(h, w), b)
        if k < last:
            h = tanh(h)
    if isinstance(h, Var):
        tape = h.tape
    return h, tape


# --- DBT1 container --------------------------------------------------------

def write_tensor(fh, arr) -> None:
    arr = np.array(arr, dtype="<f8", order="C")  # keeps rank 0, unlike ascontiguousarray
    fh.write(DBT_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh) -> np.ndarray:
    start = fh.tell() if hasattr(fh, "tell") else None
    magic = fh.read(4)
    if magic != DBT_MAGIC:
        raise ParseError(f"bad tensor magic {magic!r} at offset {start}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = int(np.prod(dims)) if rank else 1
    payload = _read_exact(fh, 8 * count)
    return np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise ParseError(f"truncated tensor payload: wanted {n} bytes, got {len(data)}")
    return data


def save_tensors(path, arrays) -> None:
    with open(path, "wb") as fh:
        for arr in arrays:
            write_tensor(fh, arr)


def load_tensors(path) -> list:
    out = []
    with open(path, "rb") as fh:
        while fh.peek(1) if hasattr(fh, "peek") else False:
            out.append(read_tensor(fh))
    return out
