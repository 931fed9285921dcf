"""Reverse-mode automatic differentiation over dense numpy arrays.

Every operation allocates a fresh node linked to its parents, so each forward
pass builds a throwaway graph; nothing is cached between passes. Gradients are
returned from :func:`backward` as a mapping instead of being written onto the
tensors, which lets two independent differentiations of the same parameters
coexist (the meta-training inner and outer passes rely on this).

Insertion order is a topological order: a node's parents always carry smaller
sequence numbers, so reverse creation order is a valid reverse-topological
sweep. Values are float64 by default; float32 is supported end to end for
cheaper training runs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

_SEQ = itertools.count()

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A node in the computation graph wrapping a dense ndarray."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjps", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple = ()
        self._seq = next(_SEQ)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def item(self) -> float:
        return float(self.data)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) != 1 else shape[0])

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjps: tuple) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._vjps = vjps if out.requires_grad else ()
    out._seq = next(_SEQ)
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Coerce scalars/arrays to a constant Tensor, matching `like`'s dtype."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=like.dtype if like is not None else np.float64)
    return Tensor(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum gradient contributions over axes that were broadcast in the forward
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data + b.data
    return _node(
        out,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data - b.data
    return _node(
        out,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: -_unbroadcast(g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data * b.data
    return _node(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), (lambda g: g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    return _node(out, (a, b), (lambda g: g @ b.data.T, lambda g: a.data.T @ g))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), (lambda g: g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), (lambda g: g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), (lambda g: g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), (lambda g: g * 0.5 / out,))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape).astype(a.data.dtype, copy=True)

    return _node(np.asarray(out), (a,), (vjp,))


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Numerically stable log-sum-exp reduction.

    The max is subtracted before exponentiation, so inputs around the CRF mask
    value (-1e4) neither overflow nor drown legitimate scores.
    """
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = np.log(total) + m
    soft = shifted / total  # softmax along the reduced axis
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())

    def vjp(g):
        if axis is None:
            return g * soft
        gg = g if keepdims else np.expand_dims(g, axis)
        return gg * soft

    return _node(np.asarray(out), (a,), (vjp,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - inner)

    return _node(out, (a,), (vjp,))


def max_over_rows(a: Tensor) -> Tensor:
    """Column-wise max of a (m, d) matrix -> (d,).

    Gradient flows to the first maximal row of each column, mirroring
    np.argmax's lowest-index tie rule.
    """
    if a.data.ndim != 2 or a.data.shape[0] == 0:
        raise ValueError(f"max_over_rows expects a non-empty 2-D input, got {a.data.shape}")
    idx = np.argmax(a.data, axis=0)
    cols = np.arange(a.data.shape[1])
    out = a.data[idx, cols]

    def vjp(g):
        grad = np.zeros_like(a.data)
        grad[idx, cols] = g
        return grad

    return _node(out, (a,), (vjp,))


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2:
        raise ValueError("gather_rows expects a 2-D input")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError(f"row index out of range for shape {a.data.shape}")
    out = a.data[idx]

    def vjp(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, idx, g)
        return grad

    return _node(out, (a,), (vjp,))


def take_pairs(a: Tensor, rows, cols) -> Tensor:
    """a[rows[i], cols[i]] as a vector, with scatter-add gradient."""
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)
    if r.shape != c.shape:
        raise ValueError("rows and cols must have matching lengths")
    out = a.data[r, c]

    def vjp(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, (r, c), g)
        return grad

    return _node(out, (a,), (vjp,))


def slice2d(a: Tensor, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError("slice2d expects a 2-D input")
    out = a.data[r0:r1, c0:c1]

    def vjp(g):
        grad = np.zeros_like(a.data)
        grad[r0:r1, c0:c1] = g
        return grad

    return _node(out.copy(), (a,), (vjp,))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _node(out, (a,), (lambda g: g.reshape(a.data.shape),))


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _node(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def stack_rows(tensors: list[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a (k, d) matrix."""
    if not tensors:
        raise ValueError("stack_rows of an empty list")
    out = np.stack([t.data for t in tensors], axis=0)

    def make_vjp(i):
        return lambda g: g[i]

    return _node(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def dropout(a: Tensor, p: float, seed: int, train: bool) -> Tensor:
    """Inverted-scaling dropout; identity when train is False or p == 0."""
    if not train or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    rng = np.random.default_rng(seed)
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype)
    keep /= 1.0 - p
    return _node(a.data * keep, (a,), (lambda g: g * keep,))


def sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distance between two tensors of equal shape."""
    d = sub(a, b)
    return reduce_sum(mul(d, d))


def row_sq_dist(m: Tensor, v: Tensor) -> Tensor:
    """Squared distances from each row of (k, d) `m` to the vector `v`."""
    d = sub(m, reshape(v, (1, -1)))
    return reduce_sum(mul(d, d), axis=1)


def trace(output: Tensor) -> list[Tensor]:
    """Nodes reachable from `output`, sorted by creation sequence.

    Creation order is already topological (parents precede children), so the
    returned list can be swept in reverse for backpropagation.
    """
    seen = set()
    stack = [output]
    nodes = []
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda n: n._seq)
    return nodes


def backward(output: Tensor) -> dict[Tensor, Tensor]:
    """Differentiate a scalar output with respect to every requires_grad leaf.

    Args:
        output: scalar (size-1) tensor at the root of the graph.

    Returns:
        Mapping from each requires_grad leaf tensor reachable from `output`
        to its gradient, a tensor of the leaf's shape. Leaves that do not
        influence the output are absent; callers treat missing entries as
        zero. Gradients from shared subexpressions accumulate exactly once.
    """
    if output.data.size != 1:
        raise ValueError(f"backward expects a scalar output, got shape {output.data.shape}")
    if not output.requires_grad:
        return {}
    order = trace(output)
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    leaf_grads: dict[Tensor, Tensor] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                leaf_grads[node] = Tensor(g)
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            if not parent.requires_grad:
                continue
            pg = vjp(g)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return leaf_grads


class ParamSet:
    """An ordered, named collection of trainable tensors."""

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ParamSet":
        return cls({k: Tensor(v, requires_grad=True) for k, v in arrays.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._tensors.items()}

    def clone(self) -> "ParamSet":
        return ParamSet.from_arrays({k: t.data.copy() for k, t in self._tensors.items()})

    def grad_arrays(self, grads: dict[Tensor, Tensor]) -> dict[str, np.ndarray]:
        """Project a backward() mapping onto parameter names, zero-filling
        parameters the graph never touched."""
        out = {}
        for name, t in self._tensors.items():
            g = grads.get(t)
            out[name] = g.data if g is not None else np.zeros_like(t.data)
        return out

    def assert_finite(self, context: str = "") -> None:
        for name, t in self._tensors.items():
            if not t.is_finite():
                where = f" ({context})" if context else ""
                raise FloatingPointError(f"non-finite values in parameter '{name}'{where}")


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    tol: float
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(f, params: ParamSet, step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Check analytic gradients of `f(params)` coordinate by coordinate.

    Args:
        f: callable mapping a ParamSet to a scalar Tensor. Must be
           deterministic (seed any dropout inside).
        params: evaluation point; every tensor in it is differentiated.
        step: central-difference half-step.
        tol: relative-error threshold per coordinate.

    Returns:
        GradCheckReport with the max relative error and each offending
        coordinate. The relative error divides by max(|analytic|, |numeric|,
        1), so near-zero gradients are judged on absolute error.
    """
    loss = f(params)
    analytic = params.grad_arrays(backward(loss))
    max_err = 0.0
    worst = ("", ())
    failures = []
    for name, tensor in params.items():
        flat = tensor.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(params).data)
            flat[i] = orig - step
            lo = float(f(params).data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            ana = float(analytic[name].reshape(-1)[i])
            err = abs(ana - numeric) / max(abs(ana), abs(numeric), 1.0)
            idx = np.unravel_index(i, tensor.data.shape)
            if err > max_err:
                max_err = err
                worst = (name, idx)
            if err > tol:
                failures.append(f"{name}{idx}: analytic={ana:.8g} numeric={numeric:.8g} rel={err:.3g}")
    return GradCheckReport(max_rel_error=max_err, worst_param=worst[0], worst_index=worst[1], tol=tol, failures=failures)
