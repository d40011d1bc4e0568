"""Define-by-run reverse-mode automatic differentiation on float64 arrays.

Graphs are built lazily through operator overloading on :class:`Expr` and
evaluated with :func:`evaluate`. :func:`backward` then walks the graph in
reverse topological order and accumulates exact gradients on the leaves.

A "tensor" is a plain C-contiguous ``numpy.ndarray`` of dtype float64.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Expr",
    "ShapeError",
    "NonFiniteError",
    "NotScalarError",
    "UnboundLeafError",
    "as_tensor",
    "check_finite",
    "leaf",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "sin",
    "cos",
    "relu",
    "absolute",
    "square",
    "sum",
    "mean",
    "broadcast",
    "concat",
    "reshape",
    "linop",
    "evaluate",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class NonFiniteError(FloatingPointError):
    """A node produced NaN or Inf."""


class NotScalarError(ValueError):
    """``backward`` was called on a root with more than one element."""


class UnboundLeafError(ValueError):
    """A leaf reached during evaluation has no value."""


def as_tensor(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    # ascontiguousarray would promote 0-d values to 1-d
    return a if a.flags.c_contiguous else np.ascontiguousarray(a)


def check_finite(t: np.ndarray, what: str = "tensor") -> None:
    if not np.isfinite(t).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")


class Expr:
    """A node in the expression graph.

    Leaves hold a value set by the caller; every other node computes its
    value from its inputs during :func:`evaluate`.
    """

    __slots__ = ("op", "inputs", "attrs", "value", "grad", "requires_grad", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, op: str, inputs: Sequence[Expr] = (), attrs=None, *,
                 value=None, requires_grad: bool = False, name: str | None = None):
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    def __repr__(self):
        shape = None if self.value is None else self.value.shape
        label = f" {self.name!r}" if self.name else ""
        return f"Expr({self.op}{label}, shape={shape})"

    @property
    def shape(self):
        if self.value is None:
            raise UnboundLeafError(f"{self!r} has not been evaluated")
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
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        if not isinstance(index, tuple):
            index = (index,)
        for item in index:
            if not (isinstance(item, (slice, int)) or item is Ellipsis or item is None):
                raise TypeError("only basic slicing is supported")
        return Expr("slice", (self,), index)


def leaf(value, *, requires_grad: bool = True, name: str | None = None) -> Expr:
    return Expr("leaf", value=None if value is None else as_tensor(value), requires_grad=requires_grad, name=name)


def constant(value, name: str | None = None) -> Expr:
    return leaf(value, requires_grad=False, name=name)


def _wrap(x) -> Expr:
    return x if isinstance(x, Expr) else constant(x)


def add(a, b) -> Expr:
    return Expr("add", (_wrap(a), _wrap(b)))


def sub(a, b) -> Expr:
    return Expr("sub", (_wrap(a), _wrap(b)))


def mul(a, b) -> Expr:
    return Expr("mul", (_wrap(a), _wrap(b)))


def scale(a, c: float) -> Expr:
    return Expr("scale", (_wrap(a),), float(c))


def matmul(a, b) -> Expr:
    return Expr("matmul", (_wrap(a), _wrap(b)))


def sin(a) -> Expr:
    return Expr("sin", (_wrap(a),))


def cos(a) -> Expr:
    return Expr("cos", (_wrap(a),))


def relu(a) -> Expr:
    return Expr("relu", (_wrap(a),))


def absolute(a) -> Expr:
    """Elementwise |a|, with subgradient sign(a) and sign(0) = 0."""
    return Expr("abs", (_wrap(a),))


def square(a) -> Expr:
    return Expr("square", (_wrap(a),))


def sum(a, axis: int | None = None) -> Expr:  # noqa: A001
    return Expr("sum", (_wrap(a),), axis)


def mean(a) -> Expr:
    return Expr("mean", (_wrap(a),))


def broadcast(a, shape: Sequence[int]) -> Expr:
    return Expr("broadcast", (_wrap(a),), tuple(shape))


def concat(items: Iterable, axis: int = 0) -> Expr:
    return Expr("concat", tuple(_wrap(x) for x in items), axis)


def reshape(a, shape: Sequence[int]) -> Expr:
    return Expr("reshape", (_wrap(a),), tuple(shape))


def linop(a, forward: Callable[[np.ndarray], np.ndarray],
          adjoint: Callable[[np.ndarray], np.ndarray], name: str = "linop") -> Expr:
    """Apply a fixed linear map whose transpose is supplied by hand."""
    return Expr("linop", (_wrap(a),), (forward, adjoint), name=name)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# Each entry: forward(values, attrs) -> value, and
# backward(grad_out, values, out, attrs, need) -> tuple of input grads, where
# need[i] says whether input i requires one (None may be returned otherwise).

def _matmul_fwd(v, _):
    a, b = v
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise ValueError(f"expected 2-D @ 1-D/2-D operands, got {a.shape} @ {b.shape}")
    return a @ b


def _matmul_bwd(g, v, _out, _attrs, need):
    a, b = v
    if b.ndim == 1:
        return (np.outer(g, b) if need[0] else None), (a.T @ g if need[1] else None)
    return (g @ b.T if need[0] else None), (a.T @ g if need[1] else None)


def _sum_bwd(g, v, _out, axis, need):
    (a,) = v
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _concat_bwd(g, v, _out, axis, need):
    bounds = np.cumsum([x.shape[axis] for x in v])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _slice_bwd(g, v, _out, index, need):
    z = np.zeros_like(v[0])
    z[index] += g
    return (z,)


_OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (lambda v, _: v[0] + v[1],
            lambda g, v, o, _, need: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape))),
    "sub": (lambda v, _: v[0] - v[1],
            lambda g, v, o, _, need: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape))),
    "mul": (lambda v, _: v[0] * v[1],
            lambda g, v, o, _, need: (_unbroadcast(g * v[1], v[0].shape) if need[0] else None,
                                      _unbroadcast(g * v[0], v[1].shape) if need[1] else None)),
    "scale": (lambda v, c: c * v[0], lambda g, v, o, c, need: (c * g,)),
    "matmul": (_matmul_fwd, _matmul_bwd),
    "sin": (lambda v, _: np.sin(v[0]), lambda g, v, o, _, need: (g * np.cos(v[0]),)),
    "cos": (lambda v, _: np.cos(v[0]), lambda g, v, o, _, need: (-g * np.sin(v[0]),)),
    "relu": (lambda v, _: np.maximum(v[0], 0.0), lambda g, v, o, _, need: (g * (v[0] > 0),)),
    "abs": (lambda v, _: np.abs(v[0]), lambda g, v, o, _, need: (g * np.sign(v[0]),)),
    "square": (lambda v, _: v[0] * v[0], lambda g, v, o, _, need: (2.0 * g * v[0],)),
    "sum": (lambda v, axis: np.asarray(v[0].sum(axis=axis)), _sum_bwd),
    "mean": (lambda v, _: np.asarray(v[0].mean()),
             lambda g, v, o, _, need: (np.full(v[0].shape, g / v[0].size),)),
    "broadcast": (lambda v, shape: np.broadcast_to(v[0], shape).copy(),
                  lambda g, v, o, _, need: (_unbroadcast(g, v[0].shape),)),
    "concat": (lambda v, axis: np.concatenate(v, axis=axis), _concat_bwd),
    "slice": (lambda v, index: np.ascontiguousarray(v[0][index]), _slice_bwd),
    "reshape": (lambda v, shape: v[0].reshape(shape),
                lambda g, v, o, _, need: (g.reshape(v[0].shape),)),
    "linop": (lambda v, fns: as_tensor(fns[0](v[0])),
              lambda g, v, o, fns, need: (as_tensor(fns[1](g)).reshape(v[0].shape),)),
}


def _topo_order(root: Expr) -> list[Expr]:
    order: list[Expr] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _first_non_finite(order: list[Expr]) -> Expr | None:
    for node in order:
        if node.value is not None and not np.isfinite(node.value).all():
            return node
    return None


def evaluate(root: Expr, *, check_all: bool = True) -> np.ndarray:
    """Compute (and store on every node) the value of ``root``.

    With ``check_all=False`` only the root is tested for NaN/Inf; on failure
    the graph is scanned to name the first offending node, which is cheaper
    for large training graphs.
    """
    order = _topo_order(root)
    for node in order:
        if node.op == "leaf":
            if node.value is None:
                raise UnboundLeafError(f"leaf {node.name or id(node)} has no value")
            continue
        forward = _OPS[node.op][0]
        try:
            node.value = forward([p.value for p in node.inputs], node.attrs)
        except ValueError as exc:
            shapes = [p.value.shape for p in node.inputs]
            raise ShapeError(f"op '{node.op}' with input shapes {shapes}: {exc}") from None
        if check_all and not np.isfinite(node.value).all():
            raise NonFiniteError(f"op '{node.op}' produced a non-finite value")
    if not check_all and not np.isfinite(root.value).all():
        bad = _first_non_finite(order)
        raise NonFiniteError(f"op '{bad.op}' produced a non-finite value")
    return root.value


def backward(root: Expr, wrt: Iterable[Expr] | None = None) -> dict[Expr, np.ndarray]:
    """Reverse-mode gradients of a scalar ``root``.

    Returns a map from each requested leaf to its gradient, and also stores
    it on ``leaf.grad``. Leaves that do not influence the root get zeros.
    When ``wrt`` is None, all differentiable leaves in the graph are used.
    """
    if root.value is None:
        evaluate(root)
    if root.value.size != 1:
        raise NotScalarError(f"backward needs a scalar root, got shape {root.value.shape}")
    order = _topo_order(root)
    if wrt is None:
        targets = [n for n in order if n.op == "leaf" and n.requires_grad]
    else:
        targets = list(wrt)
    target_ids = {id(t) for t in targets}

    needs: set[int] = set()
    for node in order:
        if id(node) in target_ids or any(id(p) in needs for p in node.inputs):
            needs.add(id(node))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.op != "leaf" else grads.get(id(node))
        if g is None or node.op == "leaf":
            continue
        backward_fn = _OPS[node.op][1]
        need = tuple(id(p) in needs for p in node.inputs)
        parent_grads = backward_fn(g, [p.value for p in node.inputs], node.value, node.attrs, need)
        for parent, pg, wanted in zip(node.inputs, parent_grads, need):
            if not wanted:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = np.asarray(pg, dtype=np.float64)

    out = {}
    for t in targets:
        g = grads.get(id(t))
        g = np.zeros_like(t.value) if g is None else np.ascontiguousarray(g)
        t.grad = g
        out[t] = g
    return out


def grad_check(root: Expr, wrt: Expr, step: float = 1e-6) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    The relative error per coordinate uses the denominator
    ``max(|analytic|, |numeric|, 1e-12)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    evaluate(root)
    analytic = backward(root, [wrt])[wrt].ravel()
    base = wrt.value
    flat = base.ravel().copy()
    worst = 0.0
    try:
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            wrt.value = flat.reshape(base.shape)
            f_plus = float(evaluate(root))
            flat[i] = orig - step
            wrt.value = flat.reshape(base.shape)
            f_minus = float(evaluate(root))
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(analytic[i]), abs(numeric), 1e-12)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    finally:
        wrt.value = base
        evaluate(root)
    return worst
