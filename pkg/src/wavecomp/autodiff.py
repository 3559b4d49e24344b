"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

The graph is built eagerly: every operation returns a new :class:`Tensor`
holding its forward value and, when any input requires gradients, a closure
that scatters the output adjoint back to the inputs.  ``loss.backward()``
walks the graph once in reverse topological order.

Gradients accumulate into ``.grad`` buffers across repeated backward calls;
the training loop is responsible for zeroing them between steps.  Tensors
are treated as immutable after construction (optimizers replace leaf
``.data`` between graph constructions, never mid-graph).
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, ValidationError


class Tensor:
    """Dense real tensor plus its slot in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise ValidationError("wrap raw arrays, not Tensors")
        if isinstance(data, np.ndarray) and dtype is None:
            if data.dtype not in (np.float32, np.float64):
                data = data.astype(np.float64)
        else:
            data = np.asarray(data, dtype=dtype or np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- graph bookkeeping -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Backpropagate from a scalar node to every requires_grad leaf."""
        if self.data.size != 1:
            raise ValidationError(
                f"backward root must be scalar, got shape {self.data.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return reduce_sum(self)

    def mean(self):
        return reduce_mean(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data, parents, backward_builder):
    """Wrap an op result, attaching a backward closure only when needed."""
    needs = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = needs
    out._parents = parents if needs else ()
    out._backward = backward_builder(out) if needs else None
    return out


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _reduce_to(g, shape):
    # collapse broadcast axes so the adjoint matches the parent shape
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_broadcast(a, b, opname):
    # equal shapes, or a trailing vector against (..., n)
    if a.data.shape == b.data.shape:
        return
    if a.data.shape[-1:] == b.data.shape[-1:] and (a.data.ndim == 1 or b.data.ndim == 1):
        return
    raise ShapeError(f"{opname}: incompatible shapes {a.data.shape} and {b.data.shape}")


# -- arithmetic --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast(a, b, "add")
    data = a.data + b.data

    def bwd(out):
        def run():
            g = out.grad
            if a.requires_grad:
                a._accumulate(_reduce_to(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_reduce_to(g, b.data.shape))
        return run

    return _result(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast(a, b, "sub")
    data = a.data - b.data

    def bwd(out):
        def run():
            g = out.grad
            if a.requires_grad:
                a._accumulate(_reduce_to(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(_reduce_to(-g, b.data.shape))
        return run

    return _result(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast(a, b, "mul")
    data = a.data * b.data

    def bwd(out):
        def run():
            g = out.grad
            if a.requires_grad:
                a._accumulate(_reduce_to(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_reduce_to(g * a.data, b.data.shape))
        return run

    return _result(data, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    data = x.data * c

    def bwd(out):
        def run():
            x._accumulate(out.grad * c)
        return run

    return _result(data, (x,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    data = a.data @ b.data

    def bwd(out):
        def run():
            g = out.grad
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        return run

    return _result(data, (a, b), bwd)


def diag_scale(x: Tensor, d: Tensor) -> Tensor:
    """y = d ⊙ x along the last axis; d is a length-n diagonal."""
    if x.data.shape[-1] != d.data.shape[-1] or d.data.ndim != 1:
        raise ShapeError(f"diag_scale: length mismatch {x.data.shape} vs {d.data.shape}")
    return mul(x, d)


# -- activations -------------------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    data = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))

    def bwd(out):
        def run():
            x._accumulate(out.grad * out.data * (1.0 - out.data))
        return run

    return _result(data, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)

    def bwd(out):
        def run():
            x._accumulate(out.grad * (1.0 - out.data * out.data))
        return run

    return _result(data, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def bwd(out):
        def run():
            x._accumulate(out.grad * (x.data > 0))
        return run

    return _result(data, (x,), bwd)


# -- strided 1-d convolution (cross-correlation orientation) -----------------


def _rows(x: Tensor):
    if x.data.ndim == 1:
        return x.data[None, :], True
    if x.data.ndim == 2:
        return x.data, False
    raise ShapeError(f"expected 1-d or 2-d signal, got shape {x.data.shape}")


def conv1d_strided(x: Tensor, filt: Tensor, stride: int) -> Tensor:
    """Valid cross-correlation with stride: y[k] = sum_i f[i] x[s*k + i]."""
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if filt.data.ndim != 1:
        raise ShapeError(f"filter must be 1-d, got shape {filt.data.shape}")
    xd, squeeze = _rows(x)
    L = filt.data.shape[0]
    n = xd.shape[1]
    if n < L:
        raise ShapeError(f"signal length {n} shorter than filter length {L}")
    out_len = (n - L) // stride + 1
    f = filt.data
    y = np.zeros((xd.shape[0], out_len), dtype=xd.dtype)
    hi = stride * (out_len - 1) + 1
    for i in range(L):
        y += f[i] * xd[:, i:i + hi:stride]
    data = y[0] if squeeze else y

    def bwd(out):
        def run():
            g = out.grad if not squeeze else out.grad[None, :]
            if x.requires_grad:
                gx = np.zeros_like(xd)
                for i in range(L):
                    gx[:, i:i + hi:stride] += f[i] * g
                x._accumulate(gx[0] if squeeze else gx)
            if filt.requires_grad:
                gf = np.empty(L, dtype=f.dtype)
                for i in range(L):
                    gf[i] = np.sum(xd[:, i:i + hi:stride] * g)
                filt._accumulate(gf)
        return run

    return _result(data, (x, filt), bwd)


def conv1d_transposed_strided(b: Tensor, filt: Tensor, stride: int) -> Tensor:
    """Adjoint of conv1d_strided: y[s*k + i] += f[i] b[k]."""
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if filt.data.ndim != 1:
        raise ShapeError(f"filter must be 1-d, got shape {filt.data.shape}")
    bd, squeeze = _rows(b)
    L = filt.data.shape[0]
    m = bd.shape[1]
    out_len = stride * (m - 1) + L
    f = filt.data
    y = np.zeros((bd.shape[0], out_len), dtype=bd.dtype)
    hi = stride * (m - 1) + 1
    for i in range(L):
        y[:, i:i + hi:stride] += f[i] * bd
    data = y[0] if squeeze else y

    def bwd(out):
        def run():
            g = out.grad if not squeeze else out.grad[None, :]
            if b.requires_grad:
                gb = np.zeros_like(bd)
                for i in range(L):
                    gb += f[i] * g[:, i:i + hi:stride]
                b._accumulate(gb[0] if squeeze else gb)
            if filt.requires_grad:
                gf = np.empty(L, dtype=f.dtype)
                for i in range(L):
                    gf[i] = np.sum(bd * g[:, i:i + hi:stride])
                filt._accumulate(gf)
        return run

    return _result(data, (b, filt), bwd)


# -- index shuffles and glue --------------------------------------------------


def validate_permutation(perm, n: int) -> np.ndarray:
    """Check perm is a bijection on 0..n-1; raises at construction time."""
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValidationError(f"not a permutation of 0..{n - 1}: {perm}")
    return perm


def permute_rows(x: Tensor, perm) -> Tensor:
    """y[..., i] = x[..., perm[i]] with adjoints scattered through the inverse."""
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape[0] != x.data.shape[-1]:
        raise ShapeError(f"permutation length {perm.shape[0]} vs axis {x.data.shape[-1]}")
    data = x.data[..., perm]

    def bwd(out):
        inv = np.argsort(perm)

        def run():
            x._accumulate(out.grad[..., inv])
        return run

    return _result(data, (x,), bwd)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def bwd(out):
        sizes = [t.data.shape[axis] for t in tensors]

        def run():
            g = out.grad
            offset = 0
            for t, size in zip(tensors, sizes):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(offset, offset + size)
                    t._accumulate(g[tuple(idx)])
                offset += size
        return run

    return _result(data, tuple(tensors), bwd)


def narrow(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = x.data[idx]

    def bwd(out):
        def run():
            gx = np.zeros_like(x.data)
            gx[idx] = out.grad
            x._accumulate(gx)
        return run

    return _result(data, (x,), bwd)


def cast(x: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    data = x.data.astype(dtype)

    def bwd(out):
        def run():
            x._accumulate(out.grad.astype(x.data.dtype))
        return run

    return _result(data, (x,), bwd)


# -- reductions and losses ----------------------------------------------------


def reduce_sum(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum())

    def bwd(out):
        def run():
            x._accumulate(np.broadcast_to(out.grad, x.data.shape).astype(x.data.dtype))
        return run

    return _result(data, (x,), bwd)


def reduce_mean(x: Tensor) -> Tensor:
    n = x.data.size
    data = np.asarray(x.data.mean())

    def bwd(out):
        def run():
            x._accumulate(np.broadcast_to(out.grad / n, x.data.shape).astype(x.data.dtype))
        return run

    return _result(data, (x,), bwd)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over every element."""
    target = _as_tensor(target, like=pred)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mse: shape mismatch {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    data = np.asarray(np.mean(diff * diff))

    def bwd(out):
        def run():
            g = out.grad * 2.0 / diff.size
            if pred.requires_grad:
                pred._accumulate(g * diff)
            if target.requires_grad:
                target._accumulate(-g * diff)
        return run

    return _result(data, (pred, target), bwd)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross entropy of row-wise softmax against integer labels."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.data.shape} vs labels {labels.shape}"
        )
    n, c = logits.data.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValidationError(
            f"label out of range [0, {c}): min={labels.min()}, max={labels.max()}"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sez)
    data = np.asarray(-logp[np.arange(n), labels].mean())

    def bwd(out):
        def run():
            p = ez / sez
            p[np.arange(n), labels] -= 1.0
            logits._accumulate(out.grad * p / n)
        return run

    return _result(data, (logits,), bwd)
