"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`.  When at least one input requires a
gradient (and recording is enabled) the result keeps references to its parents
and a closure mapping the output gradient to one gradient per parent.
:func:`backward` walks that graph in reverse topological order.

Broadcasting is restricted to leading batch dimensions: the smaller operand's
shape must equal a trailing suffix of the larger one.  Anything else needs an
explicit :func:`expand`.
"""

from contextlib import contextmanager

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the precision used for new tensors."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """An n-dimensional float array that can take part in autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @classmethod
    def from_op(cls, data, parents, backward_fn):
        """Wrap the result of a custom op.

        ``backward_fn(grad)`` must return one gradient (or None) per parent.
        Recording is skipped when no parent needs a gradient.
        """
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- array-like surface -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _check_suffix(a, b, op):
    """Allow equal shapes or broadcasting over leading batch dimensions only."""
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(short) == 0 or long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} differ beyond leading batch dimensions")


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    return grad.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_suffix(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor.from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_suffix(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor.from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, b)
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_suffix(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor.from_op(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, 1.0 / b)
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_suffix(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape))

    return Tensor.from_op(out, (a, b), back)


def scale(a, c):
    """Multiply by a constant Python/NumPy scalar."""
    c = a.data.dtype.type(c)
    return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,))


def neg(a):
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return Tensor.from_op(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a):
    out = np.tanh(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _sigmoid(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def swish(a):
    """x * sigmoid(x), also known as SiLU."""
    x = a.data
    s = _sigmoid(x)
    out = x * s
    return Tensor.from_op(out, (a,), lambda g: (g * (s + out * (1.0 - s)),))


def relu(a):
    x = a.data
    mask = x > 0
    return Tensor.from_op(x * mask, (a,), lambda g: (g * mask,))


def glu(a, axis=-1):
    """Gated linear unit: first half times sigmoid of second half."""
    x = a.data
    if x.shape[axis] % 2:
        raise ShapeError(f"glu: axis {axis} of shape {x.shape} is not even")
    first, second = np.split(x, 2, axis=axis)
    gate = _sigmoid(second)
    out = first * gate

    def back(g):
        return (np.concatenate([g * gate, g * first * gate * (1.0 - gate)], axis=axis),)

    return Tensor.from_op(out, (a,), back)


# -- reductions and shape manipulation -------------------------------------


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor.from_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape):
    old = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def expand(a, shape):
    """Broadcast ``a`` to ``shape`` (NumPy rules); gradient sums back."""
    shape = tuple(shape)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"expand: cannot broadcast {old} to {shape}") from exc

    def back(g):
        lead = g.ndim - len(old)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, (o, n) in enumerate(zip(old, g.shape)) if o == 1 and n != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return Tensor.from_op(out, (a,), back)


def getitem(a, index):
    shape, dtype = a.shape, a.dtype
    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return Tensor.from_op(a.data[index], (a,), back)


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concatenate: incompatible shapes {[t.shape for t in tensors]}") from exc
    splits = np.cumsum(sizes)[:-1]
    return Tensor.from_op(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def masked_fill(a, mask, value):
    """Replace entries where the boolean ``mask`` (broadcastable) is True."""
    mask = np.asarray(mask, dtype=bool)
    keep = ~mask
    out = np.where(mask, a.data.dtype.type(value), a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * keep,))


# -- linear algebra ---------------------------------------------------------


def matmul(a, b):
    """Matrix product over the last two axes; ``b`` may be 2-D and shared."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} are not aligned")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions of {ad.shape} and {bd.shape} differ")
    if bd.ndim == 2 and ad.ndim > 2:
        def back(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def back(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g
    return Tensor.from_op(ad @ bd, (a, b), back)


def linear(x, weight, bias=None):
    """Affine map ``x @ weight + bias`` with weight of shape (in, out)."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear: input {xd.shape} does not match weight {wd.shape}")
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor.from_op(out, parents, back)


def pointwise_conv1d(x, weight, bias=None):
    """Kernel-size-1 convolution over time for (..., T, C_in) input."""
    return linear(x, weight, bias)


def depthwise_conv1d(x, weight, bias=None):
    """Per-channel 'same' convolution over time.

    x: (B, T, C); weight: (K, C) with K odd; bias: (C,).
    out[b, t, c] = sum_k x[b, t + k - K//2, c] * weight[k, c]
    """
    xd, wd = x.data, weight.data
    k, channels = wd.shape
    if k % 2 == 0:
        raise ShapeError(f"depthwise_conv1d: kernel size {k} must be odd")
    if xd.shape[-1] != channels:
        raise ShapeError(f"depthwise_conv1d: input {xd.shape} does not match weight {wd.shape}")
    pad = k // 2
    steps = xd.shape[1]
    padded = np.pad(xd, ((0, 0), (pad, pad), (0, 0)))
    out = np.zeros_like(xd)
    for j in range(k):
        out += padded[:, j:j + steps] * wd[j]
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gpad = np.zeros_like(padded)
        gw = np.empty_like(wd)
        for j in range(k):
            gpad[:, j:j + steps] += g * wd[j]
            gw[j] = (padded[:, j:j + steps] * g).sum(axis=(0, 1))
        gx = gpad[:, pad:pad + steps]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1))

    return Tensor.from_op(out, parents, back)


def conv2d(x, weight, bias=None, stride=2):
    """Unpadded 2-D convolution.

    x: (B, C_in, H, W); weight: (C_out, C_in, kh, kw).
    Output spatial size is ``(H - kh) // stride + 1`` per axis.
    """
    xd, wd = x.data, weight.data
    cout, cin, kh, kw = wd.shape
    if xd.ndim != 4 or xd.shape[1] != cin:
        raise ShapeError(f"conv2d: input {xd.shape} does not match weight {wd.shape}")
    batch, _, height, width = xd.shape
    oh = (height - kh) // stride + 1
    ow = (width - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: input {xd.shape} smaller than kernel {(kh, kw)}")
    # cols: (B, oh, ow, C_in, kh, kw)
    windows = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    cols = windows[:, :, ::stride, ::stride][:, :, :oh, :ow].transpose(0, 2, 3, 1, 4, 5)
    cols = np.ascontiguousarray(cols).reshape(batch * oh * ow, cin * kh * kw)
    wmat = wd.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(batch, oh, ow, cout).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(wd.shape)
        gcols = (g2 @ wmat).reshape(batch, oh, ow, cin, kh, kw)
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor.from_op(np.ascontiguousarray(out), parents, back)


def embedding(ids, table):
    """Row lookup ``table[ids]`` for an integer array of ids."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise ShapeError(f"embedding: ids outside [0, {rows})")
    shape = table.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return Tensor.from_op(table.data[ids], (table,), back)


# -- normalisation ----------------------------------------------------------


def _require_finite(x, op):
    if not np.isfinite(x).all():
        raise NumericError(f"{op}: non-finite input")


def softmax(a, axis=-1):
    x = a.data
    _require_finite(x, "softmax")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (a,), back)


def log_softmax(a, axis=-1):
    x = a.data
    _require_finite(x, "log_softmax")
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (a,), back)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    xd = x.data
    if gain.shape != (xd.shape[-1],) or bias.shape != (xd.shape[-1],):
        raise ShapeError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs input {xd.shape}")
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def back(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        g2 = g.reshape(-1, g.shape[-1])
        return gx, (g2 * xhat.reshape(g2.shape)).sum(axis=0), g2.sum(axis=0)

    return Tensor.from_op(out, (x, gain, bias), back)


# -- randomness -------------------------------------------------------------


class CounterRNG:
    """Counter-based random stream.

    Each call to :meth:`generator` returns a Philox generator keyed by
    ``(seed, stream)`` at counter position ``(step, draw)``, so any draw can be
    recreated from those four integers alone.
    """

    def __init__(self, seed, stream=0, step=0):
        self.seed = int(seed)
        self.stream = int(stream)
        self.step = int(step)
        self.draw = 0

    def at_step(self, step):
        self.step = int(step)
        self.draw = 0
        return self

    def generator(self):
        bitgen = np.random.Philox(
            key=np.array([self.seed, self.stream], dtype=np.uint64),
            counter=np.array([0, 0, self.draw, self.step], dtype=np.uint64),
        )
        self.draw += 1
        return np.random.Generator(bitgen)


def dropout(a, rate, rng=None):
    """Inverted dropout.  ``rng=None`` (eval mode) or ``rate=0`` is the identity."""
    if rng is None or rate <= 0.0:
        return a
    if isinstance(rng, CounterRNG):
        rng = rng.generator()
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / a.dtype.type(1.0 - rate)
    return Tensor.from_op(a.data * keep, (a,), lambda g: (g * keep,))


# -- backward pass ----------------------------------------------------------


def _topological_order(root):
    order, seen = [], set()
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate across calls; reset with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any requires_grad tensor")
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
