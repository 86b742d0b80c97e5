"""Reverse-mode automatic differentiation on dense float64 numpy arrays.

A ``Graph`` records every primitive op in construction order.  ``backward``
walks the records in exact reverse order, which is a valid reverse
topological order because an op can only consume tensors that already
exist.  Forward functions and vector-Jacobian products are pure functions
of the *current* input buffers, so a recorded graph can be re-evaluated on
fresh leaf values (``forward_eval``) and differentiated again -- that is
what the finite-difference checker relies on.

Everything is float64.  Integer index arrays (token ids) are passed around
as plain numpy arrays, never wrapped in tensors.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""


class Tensor:
    """A float64 numpy buffer plus an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; every overload routes through the module-level ops so
    # the active graph sees a single canonical op vocabulary
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


class _Record:
    __slots__ = ("op", "inputs", "out", "fwd", "vjp")

    def __init__(self, op, inputs, out, fwd, vjp):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.fwd = fwd
        self.vjp = vjp


_STACK: list["Graph"] = []


class Graph:
    """Tape of op records.  Use as a context manager around the forward pass."""

    def __init__(self):
        self._records: list[_Record] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self):
        _STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        assert _STACK and _STACK[-1] is self
        _STACK.pop()
        return False

    def _record(self, op, inputs, out, fwd, vjp):
        for t in inputs:
            tid = id(t)
            if tid not in self._produced and tid not in self._leaves:
                self._leaves[tid] = t
        self._records.append(_Record(op, inputs, out, fwd, vjp))
        self._produced.add(id(out))

    @property
    def num_ops(self):
        return len(self._records)

    def leaves(self):
        return list(self._leaves.values())

    def replay(self):
        """Recompute every recorded op from the current leaf buffers."""
        if not self._records:
            raise RuntimeError("replay on an empty graph: no forward pass was recorded")
        for rec in self._records:
            rec.out.data = rec.fwd(*[t.data for t in rec.inputs])

    def forward_eval(self, inputs: dict | None = None) -> dict:
        """Re-bind named leaves and re-run the tape.

        Returns the buffers of every *named* non-leaf tensor produced by the
        graph.  Re-bound values must match the original leaf shapes.
        """
        if inputs:
            by_name = {t.name: t for t in self._leaves.values() if t.name is not None}
            for name, value in inputs.items():
                if name not in by_name:
                    raise KeyError(f"graph has no input leaf named {name!r}")
                leaf = by_name[name]
                arr = np.asarray(value, dtype=np.float64)
                if arr.shape != leaf.data.shape:
                    raise ShapeError(
                        f"forward_eval: leaf {name!r} expects shape "
                        f"{leaf.data.shape}, got {arr.shape}"
                    )
                leaf.data = arr
        self.replay()
        return {r.out.name: r.out.data for r in self._records if r.out.name is not None}

    def backward(self, output: Tensor, seed_grad=None) -> dict:
        """Backpropagate from ``output`` through the tape.

        Gradients accumulate additively into each requires-grad leaf's
        ``.grad``; leaves the output does not depend on receive zeros.
        Returns ``{name: grad}`` for the named requires-grad leaves.
        """
        if not self._records:
            raise RuntimeError("backward before forward: graph has no recorded ops")
        if seed_grad is None:
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(seed_grad, dtype=np.float64)
            if seed.shape != output.data.shape:
                raise ShapeError(
                    f"backward: seed gradient shape {seed.shape} does not match "
                    f"output shape {output.data.shape}"
                )
        grads: dict[int, np.ndarray] = {id(output): seed}
        for rec in reversed(self._records):
            g = grads.get(id(rec.out))
            if g is None:
                continue
            in_grads = rec.vjp(g, [t.data for t in rec.inputs], rec.out.data)
            for t, ig in zip(rec.inputs, in_grads):
                if ig is None:
                    continue
                tid = id(t)
                if tid in grads:
                    grads[tid] = grads[tid] + ig
                else:
                    grads[tid] = ig
        named = {}
        for tid, leaf in self._leaves.items():
            if not leaf.requires_grad:
                continue
            g = grads.get(tid)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            if leaf.name is not None:
                named[leaf.name] = g
        return named


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(op, inputs, fwd, vjp) -> Tensor:
    out = Tensor(fwd(*[t.data for t in inputs]))
    if _STACK:
        _STACK[-1]._record(op, inputs, out, fwd, vjp)
    return out


def _broadcastable(op, a_shape, b_shape):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a_shape} with {b_shape}") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcastable("add", a.data.shape, b.data.shape)

    def fwd(x, y):
        return x + y

    def vjp(g, ins, out):
        return _unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)

    return _apply("add", [a, b], fwd, vjp)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcastable("sub", a.data.shape, b.data.shape)

    def fwd(x, y):
        return x - y

    def vjp(g, ins, out):
        return _unbroadcast(g, ins[0].shape), _unbroadcast(-g, ins[1].shape)

    return _apply("sub", [a, b], fwd, vjp)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcastable("mul", a.data.shape, b.data.shape)

    def fwd(x, y):
        return x * y

    def vjp(g, ins, out):
        x, y = ins
        return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

    return _apply("mul", [a, b], fwd, vjp)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcastable("div", a.data.shape, b.data.shape)

    def fwd(x, y):
        return x / y

    def vjp(g, ins, out):
        x, y = ins
        return _unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)

    return _apply("div", [a, b], fwd, vjp)


def neg(a):
    a = _as_tensor(a)

    def fwd(x):
        return -x

    def vjp(g, ins, out):
        return (-g,)

    return _apply("neg", [a], fwd, vjp)


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul: operands must be at least 2-d, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.data.shape} @ {b.data.shape}")
    _broadcastable("matmul", a.data.shape[:-2], b.data.shape[:-2])

    def fwd(x, y):
        return x @ y

    def vjp(g, ins, out):
        x, y = ins
        gx = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
        gy = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
        return gx, gy

    return _apply("matmul", [a, b], fwd, vjp)


def transpose(a, axes=None):
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    else:
        axes = tuple(int(ax) for ax in axes)
        if sorted(axes) != list(range(a.data.ndim)):
            raise ShapeError(f"transpose: axes {axes} is not a permutation for shape {a.data.shape}")
    inv = tuple(np.argsort(axes))

    def fwd(x):
        return np.transpose(x, axes)

    def vjp(g, ins, out):
        return (np.transpose(g, inv),)

    return _apply("transpose", [a], fwd, vjp)


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    probe = np.empty(a.data.shape, dtype=np.bool_)
    try:
        probe.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}") from None

    def fwd(x):
        return np.ascontiguousarray(x).reshape(shape)

    def vjp(g, ins, out):
        return (np.ascontiguousarray(g).reshape(ins[0].shape),)

    return _apply("reshape", [a], fwd, vjp)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    axis = int(axis)
    base = list(tensors[0].data.shape)
    for t in tensors[1:]:
        other = list(t.data.shape)
        if len(other) != len(base):
            raise ShapeError(f"concat: rank mismatch {tuple(base)} vs {tuple(other)}")
        for i, (x, y) in enumerate(zip(base, other)):
            if i != axis % len(base) and x != y:
                raise ShapeError(
                    f"concat: shapes {tuple(base)} and {tuple(other)} differ outside axis {axis}"
                )
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def fwd(*xs):
        return np.concatenate(xs, axis=axis)

    def vjp(g, ins, out):
        return tuple(np.split(g, offsets, axis=axis))

    return _apply("concat", tensors, fwd, vjp)


def slice_along(a, axis, start, stop):
    """Contiguous slice ``[start:stop]`` along one axis."""
    a = _as_tensor(a)
    axis = int(axis) % a.data.ndim
    n = a.data.shape[axis]
    start, stop = int(start), int(stop)
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice: window [{start}:{stop}] out of range for axis {axis} of {a.data.shape}")
    index = tuple(slice(start, stop) if i == axis else slice(None) for i in range(a.data.ndim))

    def fwd(x):
        return x[index]

    def vjp(g, ins, out):
        gx = np.zeros_like(ins[0])
        gx[index] = g
        return (gx,)

    return _apply("slice", [a], fwd, vjp)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(int(ax) % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    ax = _norm_axis(axis, a.data.ndim)

    def fwd(x):
        return x.sum(axis=ax, keepdims=keepdims)

    def vjp(g, ins, out):
        x = ins[0]
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _apply("sum", [a], fwd, vjp)


def reduce_mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    ax = _norm_axis(axis, a.data.ndim)
    if ax is None:
        count = a.data.size
    else:
        count = 1
        for i in ax:
            count *= a.data.shape[i]

    def fwd(x):
        return x.mean(axis=ax, keepdims=keepdims)

    def vjp(g, ins, out):
        x = ins[0]
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _apply("mean", [a], fwd, vjp)


# ---------------------------------------------------------------------------
# nonlinearities


def softmax(a, axis=-1):
    a = _as_tensor(a)
    axis = int(axis)

    def fwd(x):
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=axis, keepdims=True)

    def vjp(g, ins, out):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _apply("softmax", [a], fwd, vjp)


def log_softmax(a, axis=-1):
    a = _as_tensor(a)
    axis = int(axis)

    def fwd(x):
        shifted = x - x.max(axis=axis, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g, ins, out):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _apply("log_softmax", [a], fwd, vjp)


def layer_norm(a, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    a = _as_tensor(a)
    eps = float(eps)

    def fwd(x):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + eps)

    def vjp(g, ins, out):
        x = ins[0]
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        r = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * r
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (r * (g - gm - xhat * gxm),)

    return _apply("layer_norm", [a], fwd, vjp)


def exp(a):
    a = _as_tensor(a)

    def fwd(x):
        return np.exp(x)

    def vjp(g, ins, out):
        return (g * out,)

    return _apply("exp", [a], fwd, vjp)


def log(a):
    a = _as_tensor(a)

    def fwd(x):
        return np.log(x)

    def vjp(g, ins, out):
        return (g / ins[0],)

    return _apply("log", [a], fwd, vjp)


def sqrt(a):
    a = _as_tensor(a)

    def fwd(x):
        return np.sqrt(x)

    def vjp(g, ins, out):
        return (g * 0.5 / out,)

    return _apply("sqrt", [a], fwd, vjp)


def tanh(a):
    a = _as_tensor(a)

    def fwd(x):
        return np.tanh(x)

    def vjp(g, ins, out):
        return (g * (1.0 - out * out),)

    return _apply("tanh", [a], fwd, vjp)


def sigmoid(a):
    a = _as_tensor(a)

    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    def vjp(g, ins, out):
        return (g * out * (1.0 - out),)

    return _apply("sigmoid", [a], fwd, vjp)


def silu(a):
    a = _as_tensor(a)

    def _sig(x):
        return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def fwd(x):
        return x * _sig(x)

    def vjp(g, ins, out):
        s = _sig(ins[0])
        return (g * (s + ins[0] * s * (1.0 - s)),)

    return _apply("silu", [a], fwd, vjp)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(a):
    """Tanh-approximation gelu."""
    a = _as_tensor(a)

    def fwd(x):
        x2 = x * x
        return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + _GELU_A * x2)))

    def vjp(g, ins, out):
        x = ins[0]
        x2 = x * x
        t = np.tanh(_GELU_C * x * (1.0 + _GELU_A * x2))
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _apply("gelu", [a], fwd, vjp)


def embedding(table, ids):
    """Row gather from a (vocab, dim) table; gradient scatter-adds."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-d, got {table.data.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding: ids must be integers, got dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding: id out of range [0, {table.data.shape[0]}) "
            f"(got min {ids.min()}, max {ids.max()})"
        )
    ids = ids.copy()

    def fwd(w):
        return w[ids]

    def vjp(g, ins, out):
        gw = np.zeros_like(ins[0])
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gw,)

    return _apply("embedding", [table], fwd, vjp)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def _elementwise_case(build, low=-2.0, high=2.0, shape=(3, 4)):
    def case(rng):
        x = Tensor(rng.uniform(low, high, size=shape), requires_grad=True, name="x")
        return [x], build

    return case


def _binary_case(build, shapes=((3, 4), (3, 4))):
    def case(rng):
        a = Tensor(rng.standard_normal(shapes[0]), requires_grad=True, name="a")
        b = Tensor(rng.standard_normal(shapes[1]), requires_grad=True, name="b")
        return [a, b], build

    return case


def _div_case(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True, name="a")
    d = rng.uniform(0.5, 1.5, size=(3, 4)) * np.where(rng.standard_normal((3, 4)) < 0, -1.0, 1.0)
    b = Tensor(d, requires_grad=True, name="b")
    return [a, b], div


def _matmul_case(rng):
    a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True, name="a")
    b = Tensor(rng.standard_normal((4, 5)), requires_grad=True, name="b")
    return [a, b], matmul


def _embedding_case(rng):
    table = Tensor(rng.standard_normal((6, 4)), requires_grad=True, name="table")
    ids = np.array([[0, 2, 5], [2, 2, 1]])
    return [table], lambda w: embedding(w, ids)


GRADCHECK_CASES = {
    "add": _binary_case(add, shapes=((3, 4), (4,))),
    "sub": _binary_case(sub, shapes=((3, 4), (3, 1))),
    "mul": _binary_case(mul, shapes=((2, 3, 4), (3, 4))),
    "div": _div_case,
    "neg": _elementwise_case(neg),
    "matmul": _matmul_case,
    "transpose": _elementwise_case(lambda x: transpose(x, (1, 0))),
    "reshape": _elementwise_case(lambda x: reshape(x, (4, 3))),
    "concat": _binary_case(lambda a, b: concat([a, b], axis=1), shapes=((3, 2), (3, 5))),
    "slice": _elementwise_case(lambda x: slice_along(x, 1, 1, 3)),
    "sum": _elementwise_case(lambda x: reduce_sum(x, axis=1)),
    "mean": _elementwise_case(lambda x: reduce_mean(x, axis=0, keepdims=True)),
    "softmax": _elementwise_case(softmax),
    "log_softmax": _elementwise_case(log_softmax),
    "layer_norm": _elementwise_case(layer_norm),
    "exp": _elementwise_case(exp),
    "log": _elementwise_case(log, low=0.2, high=3.0),
    "sqrt": _elementwise_case(sqrt, low=0.2, high=3.0),
    "tanh": _elementwise_case(tanh),
    "sigmoid": _elementwise_case(sigmoid),
    "silu": _elementwise_case(silu),
    "gelu": _elementwise_case(gelu),
    "embedding": _embedding_case,
}


def registered_ops():
    """Names of every op with a gradient-check case."""
    return tuple(sorted(GRADCHECK_CASES))


def _rel_err(a, n):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(leaves, output, graph, weights, eps=1e-5):
    """Compare analytic grads of sum(weights * output) against central differences."""
    for leaf in leaves:
        leaf.grad = None
    graph.backward(output, seed_grad=weights)
    worst = 0.0
    for leaf in leaves:
        if not leaf.requires_grad:
            continue
        analytic = leaf.grad
        numeric = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            graph.replay()
            up = float((weights * output.data).sum())
            flat[i] = orig - eps
            graph.replay()
            down = float((weights * output.data).sum())
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * eps)
        graph.replay()
        worst = max(worst, _rel_err(analytic, numeric))
    return worst


def gradcheck(op_name, rng=None, eps=1e-5):
    """Max relative error between analytic and numeric grads for one op.

    Unknown op names raise; every differentiable op registers a case.
    """
    if op_name not in GRADCHECK_CASES:
        raise KeyError(f"no gradcheck case registered for op {op_name!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    leaves, build = GRADCHECK_CASES[op_name](rng)
    with Graph() as graph:
        out = build(*leaves)
    weights = rng.standard_normal(out.data.shape)
    return check_gradients(leaves, out, graph, weights, eps=eps)
