"""Minimal reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps a float64 ndarray and records its parents plus a
vector-Jacobian closure; `backward()` on a scalar output accumulates exact
gradients into the leaves. The op set covers what the policy/value networks
and training losses need: affine maps, pointwise nonlinearities, reductions,
clipped minima, and aggregation by a fixed sparse matrix.

Module-level functions (`tanh`, `sigmoid`, ...) dispatch on their argument, so
the same forward code runs traced (Tensor inputs) or untraced (ndarray inputs).

Every non-leaf Tensor counts as one stored activation record; the running
count (`activation_records`) is the measure behind the training-memory
contract: objectives that minibatch over diffusion steps must trace
proportionally fewer records than backpropagation through the full path.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "leaves",
    "collect_grads",
    "activation_records",
    "reset_activation_records",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "clip",
    "minimum",
    "matmul",
    "spmm",
    "tsum",
    "tmean",
    "as_array",
]

_N_RECORDS = 0


def activation_records() -> int:
    """Number of non-leaf tensors recorded since the last reset."""
    return _N_RECORDS


def reset_activation_records() -> None:
    global _N_RECORDS
    _N_RECORDS = 0


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def as_array(x) -> np.ndarray:
    """The underlying ndarray of a Tensor, or the input coerced to float64."""
    return _data(x)


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_vjp")

    # keep numpy from consuming Tensor operands; binary ops fall back to the
    # reflected Tensor methods instead
    __array_ufunc__ = None

    def __init__(self, data, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjp = vjp
        if parents:
            global _N_RECORDS
            _N_RECORDS += 1

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, leaf={not self._parents})"

    # -- graph construction helpers ------------------------------------

    @staticmethod
    def _make(data, parents, vjp):
        tracked = tuple(p for p in parents if isinstance(p, Tensor))
        if not tracked:
            return Tensor(data)
        return Tensor(data, tracked, vjp)

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        a, b = self.data, _data(other)
        out = a + b
        parents = [p for p in (self, other) if isinstance(p, Tensor)]

        def vjp(g):
            grads = []
            if isinstance(self, Tensor):
                grads.append(_unbroadcast(g, a.shape))
            if isinstance(other, Tensor):
                grads.append(_unbroadcast(g, b.shape))
            return grads

        return Tensor._make(out, parents, vjp)

    __radd__ = __add__

    def __mul__(self, other):
        a, b = self.data, _data(other)
        out = a * b
        parents = [p for p in (self, other) if isinstance(p, Tensor)]

        def vjp(g):
            grads = []
            if isinstance(self, Tensor):
                grads.append(_unbroadcast(g * b, a.shape))
            if isinstance(other, Tensor):
                grads.append(_unbroadcast(g * a, b.shape))
            return grads

        return Tensor._make(out, parents, vjp)

    __rmul__ = __mul__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: [-g])

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -_data(other))

    def __rsub__(self, other):
        return (-self) + other

    def __truediv__(self, other):
        a, b = self.data, _data(other)
        out = a / b
        parents = [p for p in (self, other) if isinstance(p, Tensor)]

        def vjp(g):
            grads = []
            if isinstance(self, Tensor):
                grads.append(_unbroadcast(g / b, a.shape))
            if isinstance(other, Tensor):
                grads.append(_unbroadcast(-g * a / (b * b), b.shape))
            return grads

        return Tensor._make(out, parents, vjp)

    def __rtruediv__(self, other):
        a = _data(other)
        out = a / self.data

        def vjp(g):
            return [-g * a / (self.data * self.data)]

        return Tensor._make(out, (self,), vjp)

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        p = float(exponent)
        out = self.data ** p

        def vjp(g):
            return [g * p * self.data ** (p - 1.0)]

        return Tensor._make(out, (self,), vjp)

    def __matmul__(self, other):
        a, b = self.data, _data(other)
        out = a @ b
        parents = [p for p in (self, other) if isinstance(p, Tensor)]

        def vjp(g):
            grads = []
            if isinstance(self, Tensor):
                grads.append(g @ b.T)
            if isinstance(other, Tensor):
                grads.append(a.T @ g)
            return grads

        return Tensor._make(out, parents, vjp)

    def __rmatmul__(self, other):
        a = _data(other)

        def vjp(g):
            return [a.T @ g]

        return Tensor._make(a @ self.data, (self,), vjp)

    # -- pointwise ------------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: [g * out])

    def log(self):
        return Tensor._make(np.log(self.data), (self,), lambda g: [g / self.data])

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: [g * (1.0 - out * out)])

    def sigmoid(self):
        z = self.data
        out = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                       np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return Tensor._make(out, (self,), lambda g: [g * out * (1.0 - out)])

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: [g * 0.5 / out])

    def clip(self, lo: float, hi: float):
        """Clamp values; gradient is identity inside [lo, hi], zero outside."""
        out = np.clip(self.data, lo, hi)
        inside = ((self.data >= lo) & (self.data <= hi)).astype(np.float64)
        return Tensor._make(out, (self,), lambda g: [g * inside])

    # -- reductions / shape ----------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def vjp(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                for ax in sorted(a % len(shape) for a in axes):
                    g = np.expand_dims(g, ax)
            return [np.broadcast_to(g, shape).copy()]

        return Tensor._make(out, (self,), vjp)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else (
            np.prod([self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def reshape(self, shape):
        old = self.data.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: [g.reshape(old)])

    def detach(self) -> np.ndarray:
        return self.data

    # -- backward ---------------------------------------------------------

    def backward(self):
        if self.data.shape != ():
            raise ValueError("backward requires a scalar output")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(1.0)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                parent.grad = g if parent.grad is None else parent.grad + g


def minimum(a, b):
    """Elementwise minimum; the gradient follows the smaller branch (ties -> a)."""
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.minimum(a, b)
    da, db = _data(a), _data(b)
    take_a = da <= db
    out = np.where(take_a, da, db)
    parents = [p for p in (a, b) if isinstance(p, Tensor)]

    def vjp(g):
        grads = []
        if isinstance(a, Tensor):
            grads.append(_unbroadcast(g * take_a, da.shape))
        if isinstance(b, Tensor):
            grads.append(_unbroadcast(g * ~take_a, db.shape))
        return grads

    return Tensor._make(out, parents, vjp)


def spmm(sparse, x):
    """Fixed sparse matrix times a dense (traced) matrix: sparse @ x."""
    if not isinstance(x, Tensor):
        return sparse @ x
    sparse_t = sparse.T.tocsr()
    return Tensor._make(sparse @ x.data, (x,), lambda g: [sparse_t @ g])


# -- dispatching wrappers (Tensor or ndarray) --------------------------------


def tanh(x):
    return x.tanh() if isinstance(x, Tensor) else np.tanh(x)


def sigmoid(x):
    if isinstance(x, Tensor):
        return x.sigmoid()
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def exp(x):
    return x.exp() if isinstance(x, Tensor) else np.exp(x)


def log(x):
    return x.log() if isinstance(x, Tensor) else np.log(x)


def sqrt(x):
    return x.sqrt() if isinstance(x, Tensor) else np.sqrt(x)


def clip(x, lo, hi):
    return x.clip(lo, hi) if isinstance(x, Tensor) else np.clip(x, lo, hi)


def matmul(a, b):
    if isinstance(a, Tensor):
        return a @ b
    if isinstance(b, Tensor):
        return b.__rmatmul__(a)
    return a @ b


def tsum(x, axis=None, keepdims=False):
    return x.sum(axis=axis, keepdims=keepdims) if isinstance(x, Tensor) else np.sum(
        x, axis=axis, keepdims=keepdims
    )


def tmean(x, axis=None, keepdims=False):
    return x.mean(axis=axis, keepdims=keepdims) if isinstance(x, Tensor) else np.mean(
        x, axis=axis, keepdims=keepdims
    )


def leaves(params: dict) -> dict:
    """Fresh leaf tensors for one loss evaluation."""
    return {k: Tensor(v) for k, v in params.items()}

def collect_grads(leaf_map: dict) -> dict:
    """Gradients accumulated in leaves, as plain arrays (zeros where unused)."""
    return {
        k: (np.zeros_like(t.data) if t.grad is None else np.asarray(t.grad))
        for k, t in leaf_map.items()
    }
