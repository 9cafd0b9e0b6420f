"""Dense tensors with reverse-mode automatic differentiation.

Every op takes and returns :class:`Tensor`; the backward rule of an op is a
closure that maps the gradient of the output to one gradient per parent. The
engine orders nodes by creation sequence, so ``backward`` replays the forward
execution order exactly in reverse and sums contributions for tensors that are
used more than once.

Storage is 32-bit by default. Wrap construction in ``with float64():`` to get
64-bit tensors for gradient checking.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

_counter = itertools.count()
_local = threading.local()

CHECK_FINITE = True


def _state():
    if not hasattr(_local, "grad_enabled"):
        _local.grad_enabled = True
        _local.dtype = np.float32
    return _local


def default_dtype():
    return _state().dtype


@contextlib.contextmanager
def float64():
    """Create new tensors in 64-bit precision inside the block."""
    st = _state()
    prev = st.dtype
    st.dtype = np.float64
    try:
        yield
    finally:
        st.dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / finite differences)."""
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def is_grad_enabled():
    return _state().grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self.op = None
        self._parents = ()
        self._backward = None
        self._seq = next(_counter)

    # ---------------------------------------------------------------- basics
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype, requires_grad=None):
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.astype(dtype), requires_grad=rg, dtype=dtype, name=self.name)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.shape[0]

    # ---------------------------------------------------------------- autodiff
    def backward(self, grad=None):
        """Propagate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.size != 1:
                raise DimensionError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise NumericError("backward() on a tensor that does not require gradients")
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != output shape {self.shape}")
        pending = {id(self): grad}
        for node in reversed(trace(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if CHECK_FINITE and not np.all(np.isfinite(g)):
                    raise NumericError(f"non-finite gradient reached leaf {node.name or node}")
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # ---------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_over_axis(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_over_axis(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def trace(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that need gradients, in forward execution order."""
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq)
    return nodes


def make_op(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward(g)`` must return one gradient (or None) per parent, each shaped
    like that parent.
    """
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.op = op
    out._seq = next(_counter)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    out.grad = None
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _operands(a, b):
    """Wrap a binary op's operands; a bare scalar or array takes the other side's dtype."""
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -------------------------------------------------------------------- elementwise
def add(a, b):
    a, b = _operands(a, b)
    _check_broadcast(a, b, "add")
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = _operands(a, b)
    _check_broadcast(a, b, "sub")
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = _operands(a, b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(a.data * b.data, (a, b), backward, "mul")


elementwise_mul = mul


def div(a, b):
    a, b = _operands(a, b)
    _check_broadcast(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), backward, "div")


def relu(x):
    mask = x.data > 0
    return make_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope=0.01):
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make_op(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def tanh(x):
    out = np.tanh(x.data)
    return make_op(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x):
    # exp of a non-positive argument only, so neither branch overflows
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return make_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# -------------------------------------------------------------------- shape ops
def reshape(x, shape):
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} into {shape}") from None
    return make_op(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None):
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x, idx):
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_op(np.array(out, copy=True), (x,), backward, "getitem")


def _axes(x, axis):
    if axis is None:
        return tuple(range(x.ndim))
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    out = []
    for ax in axes:
        if not -x.ndim <= ax < x.ndim:
            raise DimensionError(f"axis {ax} out of range for a {x.ndim}-d tensor")
        out.append(ax % x.ndim)
    return tuple(out)


def sum_over_axis(x, axis=None, keepdims=False):
    axes = _axes(x, axis)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op(np.asarray(out), (x,), backward, "sum")


def mean_over_axis(x, axis=None, keepdims=False):
    axes = _axes(x, axis)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return make_op(np.asarray(out), (x,), backward, "mean")


def concat(tensors: Sequence[Tensor], axis=-1):
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty list")
    ref = tensors[0]
    ax = _axes(ref, axis)[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ref.shape} and {t.shape} on axis {ax}")
    offsets = np.cumsum([0] + [t.shape[ax] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def backward(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return make_op(out, tensors, backward, "concat")


def split(x, sizes: Sequence[int], axis=-1) -> list[Tensor]:
    ax = _axes(x, axis)[0]
    if sum(sizes) != x.shape[ax]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[ax]}")
    parts = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(start, start + n)
        parts.append(getitem(x, tuple(idx)))
        start += n
    return parts


# -------------------------------------------------------------------- linear algebra
def matmul(a, b):
    """``a[..., m, k] @ b[k, n]``; leading dims of ``a`` act as a batch."""
    a, b = _operands(a, b)
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return make_op(out, (a, b), backward, "matmul")


def conv_output_size(n, k, stride, padding):
    out = (n + 2 * padding - k) // stride + 1
    if out < 1:
        raise DimensionError(f"convolution of length {n} with kernel {k}, padding {padding} is empty")
    return out


def _im2col(xp, kh, kw, stride, ho, wo):
    """Patch matrix ``N×(kh·kw·C)×(ho·wo)`` of a padded ``N×C×H×W`` array."""
    n, c = xp.shape[:2]
    cols = np.empty((n, kh, kw, c, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, kh * kw * c, ho * wo)


def conv2d(x, kernels, stride=1, padding=0):
    """2-d cross-correlation, no bias.

    ``x`` is ``N×C_in×H×W`` (or unbatched ``C_in×H×W``), ``kernels`` is
    ``C_out×C_in×kh×kw``. Output sizes use floor division, so a stride-2 layer
    maps 64 rows to 32.
    """
    unbatched = x.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernels, got {x.shape} and {kernels.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernels.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, kernels expect {kcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ParameterError(f"conv2d: stride must be 1 or 2, got {stride}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # kernel columns ordered (tap_i, tap_j, c_in) to match _im2col
    wmat = kernels.data.transpose(0, 2, 3, 1).reshape(cout, kh * kw * cin)
    out = (wmat @ _im2col(xp, kh, kw, stride, ho, wo)).reshape(n, cout, ho, wo)

    def backward(g):
        g3 = g.reshape(n, cout, ho * wo)
        gk = gx = None
        if kernels.requires_grad:
            cols = _im2col(xp, kh, kw, stride, ho, wo)
            gk = np.einsum("nop,nkp->ok", g3, cols, optimize=True)
            gk = gk.reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        if x.requires_grad:
            dcols = (wmat.T @ g3).reshape(n, kh, kw, cin, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk

    result = make_op(np.ascontiguousarray(out), (x, kernels), backward, "conv2d")
    if unbatched:
        result = reshape(result, result.shape[1:])
    return result


# -------------------------------------------------------------------- normalisation
def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (x,), backward, "softmax")


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (x,), backward, "log_softmax")


def batch_norm(x, scale, shift, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Per-channel normalisation; the channel axis is axis 1 (``N×C`` or ``N×C×H×W``).

    ``running_mean`` / ``running_var`` are numpy arrays owned by the caller and
    updated in place in training mode (unbiased variance, like most frameworks).
    """
    if x.ndim not in (2, 4) or x.shape[1] != scale.shape[0]:
        raise DimensionError(f"batch_norm: input {x.shape} does not match {scale.shape[0]} channels")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    gamma = scale.data.reshape(bshape)
    beta = shift.data.reshape(bshape)

    if training:
        count = x.size // x.shape[1]
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        unbiased = var.reshape(-1) * (count / max(count - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def backward(g):
            gs = (g * xhat).sum(axis=axes)
            gb = g.sum(axis=axes)
            gx = None
            if x.requires_grad:
                dxhat = g * gamma
                gx = inv / count * (count * dxhat
                                    - dxhat.sum(axis=axes, keepdims=True)
                                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            return gx, gs, gb
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype).reshape(bshape)
        xhat = (x.data - running_mean.astype(x.dtype).reshape(bshape)) * inv

        def backward(g):
            gx = g * gamma * inv if x.requires_grad else None
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_op(xhat * gamma + beta, (x, scale, shift), backward, "batch_norm")


def dropout(x, rate, training, rng: np.random.Generator | None):
    """Inverted dropout: survivors are scaled by 1/(1-rate), eval mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return make_op(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def l2_norm(x, axis=None, keepdims=False):
    axes = _axes(x, axis)
    norm = np.sqrt((x.data * x.data).sum(axis=axes, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        safe = np.where(norm > 0, norm, 1.0)
        return (g * np.where(norm > 0, x.data / safe, 0.0),)

    out = norm if keepdims else np.squeeze(norm, axis=axes)
    return make_op(np.asarray(out), (x,), backward, "l2_norm")


def cross_entropy_softmax(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ParameterError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    b = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return make_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# -------------------------------------------------------------------- gradient check
@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    errors: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


def relative_error(analytic, numeric, floor=1e-8):
    denom = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / denom


def grad_check(f: Callable[[], Tensor], inputs, step=1e-5, tolerance=1e-5,
               coords: dict | None = None, floor=1e-8) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f()`` with central differences.

    ``inputs`` is a mapping ``name -> Tensor`` (or a sequence, keyed by
    position). ``coords`` optionally restricts the check to flat indices per
    input; by default every coordinate is checked. ``f`` is called without
    arguments and must read the inputs' current ``data``.
    """
    if not isinstance(inputs, dict):
        inputs = {i: t for i, t in enumerate(inputs)}
    for key, t in inputs.items():
        if t.dtype != np.float64:
            raise ParameterError(f"grad_check needs 64-bit inputs; {key!r} is {t.dtype}")
    for t in inputs.values():
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    f().backward()

    report = GradCheckReport(0.0, tolerance, 0)
    for key, t in inputs.items():
        flat = t.data.reshape(-1)
        idxs = range(flat.size) if coords is None or key not in coords else coords[key]
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                fp = float(f().data)
                flat[i] = orig - step
                fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * step)
            analytic = float(t.grad.reshape(-1)[i])
            err = relative_error(analytic, numeric, floor)
            report.checked += 1
            worst = max(worst, err)
            if err > tolerance:
                report.failures.append((key, int(i), analytic, numeric, err))
        report.errors[key] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
