"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op records one node on the tape of its tracked inputs.
Backward closures are written in terms of the same ops, so a backward sweep
run with ``create_graph=True`` is itself recorded and can be differentiated
again (used for the exact meta-gradient).

Broadcasting is limited to adding/multiplying a row vector (shape ``(n,)`` or
``(1, n)``) against an ``(m, n)`` matrix. Anything else is a ``ShapeError``;
column or scalar broadcasts are expressed with ``matmul`` against constants.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class _Node:
    __slots__ = ("kind", "inputs", "parents", "vjp")

    def __init__(self, kind, parents, vjp):
        self.kind = kind
        self.parents = parents
        self.inputs = tuple(p.node if p.tape is not None else None for p in parents)
        self.vjp = vjp


class Tape:
    """Append-only record of operations; node ids are list positions."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.recording = True

    def __len__(self):
        return len(self.nodes)

    def _append(self, node: _Node) -> int:
        for i in node.inputs:
            if i is not None and i >= len(self.nodes):
                raise TapeError("node input must reference an earlier node")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value) -> Tensor:
        data = value.data if isinstance(value, Tensor) else value
        t = Tensor(data)
        t.tape = self
        t.node = self._append(_Node("leaf", (), None))
        return t

    def watch(self, params: ParamSet) -> ParamSet:
        return ParamSet((k, self.leaf(v)) for k, v in params.items())


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None, check: bool = True):
        arr = np.array(data, dtype=np.float64)
        if check and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, check=False)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def __repr__(self):
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class ParamSet(dict):
    """Ordered name -> Tensor mapping; order is insertion order."""

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.numpy() for k, v in self.items()}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> ParamSet:
        return cls((k, Tensor(v)) for k, v in arrays.items())

    def detach(self) -> ParamSet:
        return ParamSet((k, v.detach()) for k, v in self.items())

    def select(self, prefix: str) -> ParamSet:
        return ParamSet((k, v) for k, v in self.items() if k.startswith(prefix))

    def merged(self, other: Mapping[str, Tensor]) -> ParamSet:
        out = ParamSet(self)
        out.update(other)
        return out

    def step(self, grads: Mapping[str, Tensor], lr: float) -> ParamSet:
        """Untracked SGD step, returning a new set (unlisted entries copied)."""
        out = ParamSet()
        for k, v in self.items():
            g = grads.get(k)
            out[k] = Tensor(v.data - lr * g.data) if g is not None else v.detach()
        return out

    def num_values(self) -> int:
        return sum(v.size for v in self.values())


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError("inputs are tracked on different tapes")
            tape = t.tape
    if tape is not None and not tape.recording:
        return None
    return tape


def _make(value: np.ndarray, parents: tuple[Tensor, ...], kind: str, vjp) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{kind} produced non-finite values")
    out = Tensor.__new__(Tensor)
    value = np.asarray(value, dtype=np.float64)
    value.flags.writeable = False
    out.data = value
    out.tape = None
    out.node = None
    tape = _tape_of(*parents)
    if tape is not None:
        out.tape = tape
        out.node = tape._append(_Node(kind, parents, vjp))
    return out


def _is_row(shape, ref) -> bool:
    if len(ref) != 2:
        return False
    return shape == (ref[1],) or shape == (1, ref[1])


def _binary_shapes(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape == b.shape:
        return
    if _is_row(b.shape, a.shape) or _is_row(a.shape, b.shape):
        return
    raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}")


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    return reshape(reduce_sum(g, axis=0), shape)


def _t(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(v)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Python numbers become constants shaped like the other operand."""
    if isinstance(a, (int, float)) and isinstance(b, Tensor):
        a = Tensor(np.full(b.shape, float(a)))
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        b = Tensor(np.full(a.shape, float(b)))
    return _t(a), _t(b)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "add")
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "sub")
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "mul")
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _binary_shapes(a, b, "div")

    def vjp(g):
        ga = div(g, b)
        gb = neg(div(mul(ga, a), b))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data / b.data, (a, b), "div", vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), "scale", lambda g: (scale(g, c),))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (neg(g),))


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(np.float64)
    return _make(a.data * mask, (a,), "relu", lambda g: (mul(g, Tensor(mask)),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    def vjp(g):
        return (mul(g, mul(out, sub(Tensor(np.ones(out.shape)), out))),)

    out = _make(_sigmoid_np(a.data), (a,), "sigmoid", vjp)
    return out


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        value = np.exp(a.data)
    out = _make(value, (a,), "exp", lambda g: (mul(g, out),))
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of a non-positive value")
    return _make(np.log(a.data), (a,), "log", lambda g: (div(g, a),))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt of a negative value")

    def vjp(g):
        return (div(scale(g, 0.5), out),)

    out = _make(np.sqrt(a.data), (a,), "sqrt", vjp)
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient passes only where no clamping happened."""
    mask = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)
    return _make(np.clip(a.data, lo, hi), (a,), "clip", lambda g: (mul(g, Tensor(mask)),))


def safe_log(a: Tensor) -> Tensor:
    return log(clip(a, LOG_CLAMP, np.inf))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "neg": neg, "relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log, "sqrt": sqrt,
}


def elementwise(kind: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*args)


# ------------------------------------------------------------------ structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _t(a), _t(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), "matmul",
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {a.shape}")
    return _make(a.data.T.copy(), (a,), "transpose", lambda g: (transpose(g),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: {a.shape} -> {shape}")
    old = a.shape
    return _make(a.data.reshape(shape).copy(), (a,), "reshape", lambda g: (reshape(g, old),))


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum everything (scalar result) or one axis of a matrix (axis kept)."""
    if axis is None:
        shape = a.shape
        return _make(np.array(a.data.sum()), (a,), "sum", lambda g: (_fill(g, shape),))
    if a.data.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"sum over axis {axis} needs a matrix, got {a.shape}")
    m, n = a.shape
    if axis == 0:
        return _make(a.data.sum(axis=0, keepdims=True), (a,), "sum0",
                     lambda g: (matmul(Tensor(np.ones((m, 1))), g),))
    return _make(a.data.sum(axis=1, keepdims=True), (a,), "sum1",
                 lambda g: (matmul(g, Tensor(np.ones((1, n)))),))


def _fill(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Spread a scalar gradient over ``shape`` (differentiably)."""
    n = int(np.prod(shape)) if shape else 1
    col = matmul(Tensor(np.ones((n, 1))), reshape(g, (1, 1)))
    return reshape(col, shape)


def mean(a: Tensor) -> Tensor:
    return scale(reduce_sum(a), 1.0 / a.size)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: incompatible shapes {a.shape} and {b.shape}")
    k = a.shape[1]

    def vjp(g):
        return g @ Tensor(np.eye(g.shape[1])[:, :k]), g @ Tensor(np.eye(g.shape[1])[:, k:])

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), "concat", vjp)


def repeat_rows(row: Tensor, m: int) -> Tensor:
    """Stack a (1, n) or (n,) row ``m`` times."""
    r = reshape(row, (1, row.size)) if row.data.ndim == 1 else row
    return matmul(Tensor(np.ones((m, 1))), r)


def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"softmax_rows needs an (m, n>=1) matrix, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    value = e / e.sum(axis=1, keepdims=True)
    n = x.shape[1]

    def vjp(g):
        inner = matmul(mul(g, out), Tensor(np.ones((n, 1))))
        return (mul(out, sub(g, matmul(inner, Tensor(np.ones((1, n)))))),)

    out = _make(value, (x,), "softmax", vjp)
    return out


# ------------------------------------------------------------------- backward


def gradients(loss: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    Tensors not on the loss's tape, or not reachable from it, get zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.tape is None:
        raise TapeError("loss is not recorded on a tape")
    tape = loss.tape
    wanted = {t.node for t in wrt if t.tape is tape}
    grads: dict[int, Tensor] = {loss.node: Tensor(np.ones(loss.shape))}
    was_recording = tape.recording
    tape.recording = create_graph
    try:
        for i in range(loss.node, -1, -1):
            g = grads.get(i)
            if g is None:
                continue
            node = tape.nodes[i]
            if node.vjp is None:
                continue
            if i not in wanted:
                del grads[i]
            parent_grads = node.vjp(g)
            for parent, pid, pg in zip(node.parents, node.inputs, parent_grads):
                if pid is None or pg is None or parent.tape is not tape:
                    continue
                prev = grads.get(pid)
                grads[pid] = pg if prev is None else add(prev, pg)
    finally:
        tape.recording = was_recording
    out = []
    for t in wrt:
        g = grads.get(t.node) if t.tape is tape else None
        out.append(g if g is not None else Tensor(np.zeros(t.shape)))
    return out


def backward(loss: Tensor, params: Mapping[str, Tensor], create_graph: bool = False) -> dict[str, Tensor]:
    names = list(params)
    gs = gradients(loss, [params[k] for k in names], create_graph=create_graph)
    return dict(zip(names, gs))


def grad_check(f: Callable[[ParamSet], Tensor], params: Mapping[str, Tensor], h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    base = ParamSet((k, v.detach()) for k, v in params.items())
    tape = Tape()
    tracked = tape.watch(base)
    loss = f(tracked)
    analytic = backward(loss, tracked) if loss.tracked else {k: Tensor(np.zeros(v.shape)) for k, v in base.items()}
    worst = 0.0
    for name, value in base.items():
        flat = value.data.reshape(-1)
        a = analytic[name].data.reshape(-1)
        for j in range(flat.size):
            plus, minus = flat.copy(), flat.copy()
            plus[j] += h
            minus[j] -= h
            fp = f(base.merged({name: Tensor(plus.reshape(value.shape))})).item()
            fm = f(base.merged({name: Tensor(minus.reshape(value.shape))})).item()
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, abs(a[j] - numeric) / max(1.0, abs(a[j])))
    return worst


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros(t.shape))
