"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every trainable component in this package runs on the `Tensor` type defined
here.  The design is deliberately small: a tensor wraps a numpy array, ops
record parent links plus a local backward closure, and `backward()` walks the
recorded graph once in reverse topological order.  Gradients accumulate into
`.grad` until the caller zeroes them.
"""

from __future__ import annotations

import numpy as np

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x.astype(np.float64, copy=False)
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    # sum over leading axes added by broadcasting
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    # sum over axes that were size 1 in the original
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- backward -------------------------------------------------------------
    def backward(self):
        """Reverse-mode sweep from a scalar output.

        Repeated calls without zeroing accumulate gradients, matching the
        batch-accumulation style of the training loops.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor, got shape %s" % (self.shape,))
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_as_array(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow_const(other, -1.0))
        return mul(self, 1.0 / _as_array(other))

    def __rtruediv__(self, other):
        return mul(pow_const(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise arithmetic -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return Tensor._make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._make(out_data, (a, b), backward)


def pow_const(a, p: float) -> Tensor:
    a = _wrap(a)
    out_data = a.data ** p

    def backward(g):
        if a.requires_grad:
            a._accum(g * p * a.data ** (p - 1.0))

    return Tensor._make(out_data, (a,), backward)


def sqrt(a) -> Tensor:
    return pow_const(a, 0.5)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ b.data.T if b.data.ndim == 2 else np.outer(g, b.data)
            a._accum(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = a.data.T @ g if a.data.ndim == 2 else np.outer(a.data, g)
            b._accum(_unbroadcast(gb, b.data.shape))

    return Tensor._make(out_data, (a, b), backward)


# -- nonlinearities ---------------------------------------------------------------

def tanh(a) -> Tensor:
    a = _wrap(a)
    out_data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * (1.0 - out_data ** 2))

    return Tensor._make(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a._accum(g * out_data * (1.0 - out_data))

    return Tensor._make(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * out_data)

    return Tensor._make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _wrap(a)
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g / a.data)

    return Tensor._make(out_data, (a,), backward)


def relu(a) -> Tensor:
    a = _wrap(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accum(g * (a.data > 0.0))

    return Tensor._make(out_data, (a,), backward)


def abs_(a) -> Tensor:
    a = _wrap(a)
    out_data = np.abs(a.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g * np.sign(a.data))

    return Tensor._make(out_data, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi] (PPO-style subgradient)."""
    a = _wrap(a)
    out_data = np.clip(a.data, lo, hi)

    def backward(g):
        if a.requires_grad:
            a._accum(g * ((a.data >= lo) & (a.data <= hi)))

    return Tensor._make(out_data, (a,), backward)


def minimum(a, b) -> Tensor:
    """Elementwise min; gradient routes to the smaller input (ties -> first)."""
    a, b = _wrap(a), _wrap(b)
    take_a = a.data <= b.data
    out_data = np.where(take_a, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * take_a, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * ~take_a, b.data.shape))

    return Tensor._make(out_data, (a, b), backward)


# -- reductions -------------------------------------------------------------------

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accum(np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg, a.data.shape).copy())

    return Tensor._make(out_data, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis] if isinstance(axis, int) else int(np.prod([a.data.shape[i] for i in axis]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape ops --------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accum(g.reshape(a.data.shape))

    return Tensor._make(out_data, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    out_data = np.transpose(a.data, axes)

    def backward(g):
        if a.requires_grad:
            if axes is None:
                a._accum(np.transpose(g))
            else:
                a._accum(np.transpose(g, np.argsort(axes)))

    return Tensor._make(out_data, (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return Tensor._make(out_data, tuple(tensors), backward)


def take(a, idx) -> Tensor:
    """Slicing / advanced indexing; backward scatter-adds into the source."""
    a = _wrap(a)
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a._accum(buf)

    return Tensor._make(out_data, (a,), backward)


# -- normalizations ----------------------------------------------------------------

def softmax(a, axis=-1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accum(out_data * (g - dot))

    return Tensor._make(out_data, (a,), backward)


def log_softmax(a, axis=-1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    sm = np.exp(out_data)

    def backward(g):
        if a.requires_grad:
            a._accum(g - sm * g.sum(axis=axis, keepdims=True))

    return Tensor._make(out_data, (a,), backward)


NORM_FLOOR = 1e-12


def l2_normalize(a, axis=-1) -> Tensor:
    """x / max(||x||, 1e-12) along `axis`; the floor guards the zero vector."""
    a = _wrap(a)
    norm = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True))
    norm_f = np.maximum(norm, NORM_FLOOR)
    out_data = a.data / norm_f

    def backward(g):
        if a.requires_grad:
            # d(x/n)/dx with n = max(||x||, floor); where floored, n is constant
            active = (norm > NORM_FLOOR).astype(np.float64)
            dot = (g * a.data).sum(axis=axis, keepdims=True)
            a._accum(g / norm_f - active * a.data * dot / norm_f ** 3)

    return Tensor._make(out_data, (a,), backward)


def layer_norm(a, axis=-1, eps=1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) along `axis` (no learned affine)."""
    a = _wrap(a)
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc ** 2).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out_data = xc * inv

    def backward(g):
        if a.requires_grad:
            n = a.data.shape[axis]
            gm = g.mean(axis=axis, keepdims=True)
            gx = (g * out_data).mean(axis=axis, keepdims=True)
            a._accum(inv * (g - gm - out_data * gx))

    return Tensor._make(out_data, (a,), backward)


def logsumexp(a, axis=-1) -> Tensor:
    """log(sum(exp(a))) along `axis`, stabilised by a constant max shift."""
    a = _wrap(a)
    shift = a.data.max(axis=axis, keepdims=True)
    shifted = add(a, -shift)
    return add(log(sum_(exp(shifted), axis=axis)), np.squeeze(shift, axis=axis))


# -- losses -----------------------------------------------------------------------

def squared_error(pred, target) -> Tensor:
    """Mean of elementwise squared differences (scalar)."""
    pred = _wrap(pred)
    target = _wrap(target)
    diff = add(pred, mul(target, -1.0))
    return mean(mul(diff, diff))


def cross_entropy(logits, target_probs, axis=-1) -> Tensor:
    """Mean categorical cross-entropy of softmax(logits) against target rows.

    `target_probs` may be one-hot or soft; rows are treated as distributions.
    """
    logits = _wrap(logits)
    target = _wrap(target_probs)
    ls = log_softmax(logits, axis=axis)
    per_row = mul(sum_(mul(ls, target), axis=axis), -1.0)
    return mean(per_row)


# -- gradient checking --------------------------------------------------------------

def grad_check(f, inputs, h=1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps the tensors in `inputs` to a scalar Tensor.  The relative error
    for a component is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    Known singular regions (e.g. l2-normalize at the zero vector) are the
    caller's responsibility to avoid.
    """
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    max_err = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                hi = f(*inputs).item()
            flat[i] = orig - h
            with no_grad():
                lo = f(*inputs).item()
            flat[i] = orig
            num[i] = (hi - lo) / (2.0 * h)
        num = num.reshape(t.data.shape)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
        err = float(np.max(np.abs(ana - num) / denom))
        max_err = max(max_err, err)
    for t in inputs:
        t.zero_grad()
    return max_err
