"""Dense float tensors with reverse-mode automatic differentiation.

The engine is deliberately small: numpy arrays wrapped in a ``Tensor``
node, a handful of elementwise/reduction primitives, and exactly the
layer vocabulary the dynamics network needs (convolutions, pooling,
normalisation, attention).  Compute dtype is float32; float64 inputs
are preserved end to end so the gradient-check harness can run the
same code path in 64-bit.

Gradients accumulate with ``+=`` into ``Tensor.grad`` of every
reachable ``requires_grad`` tensor; call :func:`zero_grads` (or
``ParameterStore.zero_grads``) between backward passes.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

Array = np.ndarray


def _coerce(data) -> Array:
    arr = np.asarray(data)
    if arr.dtype == np.float64:
        return np.ascontiguousarray(arr)
    return np.ascontiguousarray(arr, dtype=np.float32)


class Tensor:
    """A numpy array plus autodiff bookkeeping.

    ``data`` is row-major float32 (or float64 on the shadow path),
    ``grad`` is lazily allocated with the same shape and dtype.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_needs")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _coerce(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._needs = self.requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _node(data: Array, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    needs = any(p._needs for p in parents)
    out._needs = needs
    out._parents = parents if needs else ()
    out._backward = backward if needs else None
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(grads: dict, t: Tensor, value: Array) -> None:
    if not t._needs:
        return
    key = id(t)
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value.astype(t.data.dtype, copy=True) if value.dtype != t.data.dtype else value.copy()


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss, accumulating into ``.grad``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward is not None:
            node._backward(g, grads)


def zero_grads(tensors) -> None:
    """Set grads of the given tensors (or a ParameterStore) to zero."""
    if isinstance(tensors, ParameterStore):
        tensors = (t for _, t in tensors.items())
    for t in tensors:
        t.zero_grad()


class ParameterStore:
    """Named trainable tensors with deterministic (lexicographic) order."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name!r}")
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.requires_grad = True
        t._needs = True
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self):
        for name in self.names():
            yield name, self._entries[name]

    def zero_grads(self) -> None:
        for _, t in self.items():
            t.zero_grad()

    def total_parameters(self) -> int:
        return sum(t.size for _, t in self.items())

    def state_dict(self) -> dict[str, Array]:
        return {name: t.data.copy() for name, t in self.items()}

    def load_state_dict(self, state: dict[str, Array]) -> None:
        missing = set(self._entries) - set(state)
        extra = set(state) - set(self._entries)
        if missing or extra:
            raise KeyError(f"parameter name mismatch: missing={sorted(missing)}, unexpected={sorted(extra)}")
        for name, value in state.items():
            t = self._entries[name]
            if t.data.shape != value.shape:
                raise ShapeError(f"parameter {name!r}: expected shape {t.data.shape}, got {value.shape}")
            t.data = value.astype(t.data.dtype, copy=True)


# --------------------------------------------------------------------------
# elementwise / reduction primitives
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def back(g, grads):
        _accum(grads, a, _unbroadcast(g, a.data.shape))
        _accum(grads, b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def back(g, grads):
        _accum(grads, a, _unbroadcast(g, a.data.shape))
        _accum(grads, b, _unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def back(g, grads):
        _accum(grads, a, _unbroadcast(g * b.data, a.data.shape))
        _accum(grads, b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), back)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    data = x.data * c

    def back(g, grads):
        _accum(grads, x, g * c)

    return _node(data, (x,), back)


def mul_const(x: Tensor, c: Array) -> Tensor:
    """Multiply by a constant array (no gradient into ``c``)."""
    c = np.asarray(c, dtype=x.data.dtype)
    data = x.data * c

    def back(g, grads):
        _accum(grads, x, _unbroadcast(g * c, x.data.shape))

    return _node(data, (x,), back)


def neg(x: Tensor) -> Tensor:
    def back(g, grads):
        _accum(grads, x, -g)

    return _node(-x.data, (x,), back)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g, grads):
        if axis is None:
            _accum(grads, x, np.broadcast_to(g, x.data.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(grads, x, np.broadcast_to(ge, x.data.shape).copy())

    return _node(np.asarray(data), (x,), back)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def back(g, grads):
        _accum(grads, x, g * (x.data > 0))

    return _node(data, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    data = _sigmoid_np(x.data)

    def back(g, grads):
        _accum(grads, x, g * data * (1 - data))

    return _node(data, (x,), back)


def _sigmoid_np(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: Tensor) -> Tensor:
    # log(1 + e^x), stable for large |x|
    data = np.maximum(x.data, 0) + np.log1p(np.exp(-np.abs(x.data)))

    def back(g, grads):
        _accum(grads, x, g * _sigmoid_np(x.data))

    return _node(data, (x,), back)


def tlog(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def back(g, grads):
        _accum(grads, x, g / x.data)

    return _node(data, (x,), back)


def texp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def back(g, grads):
        _accum(grads, x, g * data)

    return _node(data, (x,), back)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last dimension."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def back(g, grads):
        dot = (g * data).sum(axis=-1, keepdims=True)
        _accum(grads, x, (g - dot) * data)

    return _node(data, (x,), back)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    data = z - lse

    def back(g, grads):
        sm = np.exp(data)
        _accum(grads, x, g - sm * g.sum(axis=-1, keepdims=True))

    return _node(data, (x,), back)


def take(x: Tensor, flat_indices) -> Tensor:
    """Gather entries of the flattened tensor; backward scatter-adds."""
    idx = np.asarray(flat_indices, dtype=np.intp)
    data = x.data.reshape(-1)[idx].copy()

    def back(g, grads):
        gx = np.zeros(x.data.size, dtype=x.data.dtype)
        np.add.at(gx, idx, g.reshape(-1))
        _accum(grads, x, gx.reshape(x.data.shape))

    return _node(data, (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def back(g, grads):
        _accum(grads, x, g.reshape(x.data.shape))

    return _node(data, (x,), back)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))

    def back(g, grads):
        _accum(grads, x, np.ascontiguousarray(g.transpose(inv)))

    return _node(data, (x,), back)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries along ``axis`` starting at ``start``."""
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = np.ascontiguousarray(x.data[sl])

    def back(g, grads):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        _accum(grads, x, gx)

    return _node(data, (x,), back)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g, grads):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(grads, t, np.ascontiguousarray(g[tuple(sl)]))

    return _node(data, tuple(tensors), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix multiplication with numpy broadcasting semantics."""
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: expected inner dims to match, got {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def back(g, grads):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(grads, a, _unbroadcast(ga, a.data.shape))
        _accum(grads, b, _unbroadcast(gb, b.data.shape))

    return _node(data, (a, b), back)


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` over the last dimension; ``w`` is (out, in)."""
    if x.data.shape[-1] != w.data.shape[1]:
        raise ShapeError(f"linear: expected input dim {w.data.shape[1]}, got {x.data.shape}")
    data = x.data @ w.data.T
    if b is not None:
        data += b.data

    def back(g, grads):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.data.shape[-1])
        _accum(grads, w, g2.T @ x2)
        if b is not None:
            _accum(grads, b, g2.sum(axis=0))
        _accum(grads, x, (g @ w.data).reshape(x.data.shape))

    parents = (x, w) if b is None else (x, w, b)
    return _node(data, parents, back)


def _conv1d_windows(xp: Array, k: int) -> Array:
    # (B, C, T+k-1) -> (B, T, C*k) contiguous im2col buffer
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)  # (B, C, T, k)
    b, c, t, _ = win.shape
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(b, t, c * k)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-length 1D convolution over the last axis.

    ``x`` is (B, C_in, T), ``w`` is (C_out, C_in, K) with odd K.
    """
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"conv1d: expected x (B,C,T) and w (O,I,K), got {x.data.shape} and {w.data.shape}")
    bsz, cin, t = x.data.shape
    cout, win, k = w.data.shape
    if win != cin:
        raise ShapeError(f"conv1d: expected {win} input channels, got {cin}")
    if k % 2 != 1:
        raise ShapeError(f"conv1d: same padding requires odd kernel, got {k}")
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    cols = _conv1d_windows(xp, k)  # (B, T, cin*k)
    w2 = w.data.reshape(cout, cin * k)
    data = np.ascontiguousarray((cols @ w2.T).transpose(0, 2, 1))  # (B, cout, T)
    if b is not None:
        data += b.data[None, :, None]

    def back(g, grads):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(bsz * t, cout)
        cols2 = _conv1d_windows(xp, k).reshape(bsz * t, cin * k)
        _accum(grads, w, (g2.T @ cols2).reshape(cout, cin, k))
        if b is not None:
            _accum(grads, b, g.sum(axis=(0, 2)))
        if x._needs:
            gcols = (g2 @ w2).reshape(bsz, t, cin, k)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j:j + t] += gcols[:, :, :, j].transpose(0, 2, 1)
            _accum(grads, x, gxp[:, :, pad:pad + t])

    parents = (x, w) if b is None else (x, w, b)
    return _node(data, parents, back)


def _conv2d_windows(xp: Array, k: int) -> Array:
    # (B, C, H+k-1, W+k-1) -> (B, H*W, C*k*k)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))  # (B, C, H, W, k, k)
    b, c, h, w, _, _ = win.shape
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, h * w, c * k * k)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-size 2D convolution; ``x`` (B,C,H,W), ``w`` (O,I,K,K), odd K."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected x (B,C,H,W) and w (O,I,K,K), got {x.data.shape} and {w.data.shape}")
    bsz, cin, h, wd = x.data.shape
    cout, win_c, k, k2 = w.data.shape
    if win_c != cin or k != k2:
        raise ShapeError(f"conv2d: expected weight ({cout},{cin},K,K), got {w.data.shape}")
    if k % 2 != 1:
        raise ShapeError(f"conv2d: same padding requires odd kernel, got {k}")
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _conv2d_windows(xp, k)  # (B, H*W, cin*k*k)
    w2 = w.data.reshape(cout, cin * k * k)
    out = cols @ w2.T  # (B, H*W, cout)
    data = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(bsz, cout, h, wd)
    if b is not None:
        data += b.data[None, :, None, None]

    def back(g, grads):
        g2 = np.ascontiguousarray(g.reshape(bsz, cout, h * wd).transpose(0, 2, 1)).reshape(bsz * h * wd, cout)
        cols2 = _conv2d_windows(xp, k).reshape(bsz * h * wd, cin * k * k)
        _accum(grads, w, (g2.T @ cols2).reshape(cout, cin, k, k))
        if b is not None:
            _accum(grads, b, g.sum(axis=(0, 2, 3)))
        if x._needs:
            gcols = (g2 @ w2).reshape(bsz, h, wd, cin, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + h, j:j + wd] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            _accum(grads, x, gxp[:, :, pad:pad + h, pad:pad + wd])

    parents = (x, w) if b is None else (x, w, b)
    return _node(data, parents, back)


def conv_transpose1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Transposed 1D convolution with kernel size == stride.

    ``x`` is (B, C_in, T), ``w`` is (C_in, C_out, K) with K == stride, so
    the output length is exactly ``T * stride`` (inverse of a stride-K
    max-pool's length change).
    """
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"conv_transpose1d: expected x (B,C,T) and w (I,O,K), got {x.data.shape} and {w.data.shape}")
    bsz, cin, t = x.data.shape
    win_c, cout, k = w.data.shape
    if win_c != cin:
        raise ShapeError(f"conv_transpose1d: expected {win_c} input channels, got {cin}")
    if k != stride:
        raise ShapeError(f"conv_transpose1d: kernel size {k} must equal stride {stride}")
    x2 = x.data.transpose(0, 2, 1).reshape(bsz * t, cin)
    w2 = w.data.reshape(cin, cout * k)
    y = (x2 @ w2).reshape(bsz, t, cout, k)
    data = np.ascontiguousarray(y.transpose(0, 2, 1, 3)).reshape(bsz, cout, t * k)
    if b is not None:
        data += b.data[None, :, None]

    def back(g, grads):
        g4 = np.ascontiguousarray(g.reshape(bsz, cout, t, k).transpose(0, 2, 1, 3)).reshape(bsz * t, cout * k)
        _accum(grads, w, (x2.T @ g4).reshape(cin, cout, k))
        if b is not None:
            _accum(grads, b, g.sum(axis=(0, 2)))
        if x._needs:
            gx = (g4 @ w2.T).reshape(bsz, t, cin).transpose(0, 2, 1)
            _accum(grads, x, np.ascontiguousarray(gx))

    parents = (x, w) if b is None else (x, w, b)
    return _node(data, parents, back)


def maxpool1d(x: Tensor, stride: int) -> Tensor:
    """Non-overlapping max pooling over the last axis (kernel == stride)."""
    t = x.data.shape[-1]
    if t % stride != 0:
        raise ShapeError(f"maxpool1d: length {t} not divisible by stride {stride}")
    if stride == 1:
        return x
    lead = x.data.shape[:-1]
    xr = x.data.reshape(*lead, t // stride, stride)
    idx = xr.argmax(axis=-1)
    data = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def back(g, grads):
        gr = np.zeros_like(xr)
        np.put_along_axis(gr, idx[..., None], g[..., None], axis=-1)
        _accum(grads, x, gr.reshape(x.data.shape))

    return _node(np.ascontiguousarray(data), (x,), back)


class BatchNormState:
    """Running mean/variance for one batchnorm2d layer."""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def copy(self) -> "BatchNormState":
        out = BatchNormState(len(self.running_mean), dtype=self.running_mean.dtype)
        out.running_mean = self.running_mean.copy()
        out.running_var = self.running_var.copy()
        return out


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState | None = None,
                training: bool = True, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Channelwise batch normalisation of a (B, C, H, W) tensor.

    Training mode normalises with batch statistics and, when ``state``
    is given, updates running estimates with the stated momentum; eval
    mode normalises with the running estimates.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d: expected (B,C,H,W), got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batchnorm2d: expected scale/shift of shape ({c},), got {gamma.data.shape} and {beta.data.shape}")
    axes = (0, 2, 3)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if state is not None:
            n = x.data.size // c
            unbiased = var * (n / max(n - 1, 1))
            state.running_mean *= 1.0 - momentum
            state.running_mean += momentum * mean.astype(state.running_mean.dtype)
            state.running_var *= 1.0 - momentum
            state.running_var += momentum * unbiased.astype(state.running_var.dtype)
    else:
        if state is None:
            raise ShapeError("batchnorm2d: eval mode requires running statistics")
        mean = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def back(g, grads):
        _accum(grads, gamma, (g * xhat).sum(axis=axes))
        _accum(grads, beta, g.sum(axis=axes))
        if x._needs:
            coeff = (gamma.data * inv)[None, :, None, None]
            if training:
                gm = g.mean(axis=axes)[None, :, None, None]
                gx = (g * xhat).mean(axis=axes)[None, :, None, None]
                _accum(grads, x, coeff * (g - gm - xhat * gx))
            else:
                _accum(grads, x, coeff * g)

    return _node(data, (x, gamma, beta), back)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalisation over the last dimension."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layernorm: expected scale/shift of shape ({d},), got {gamma.data.shape} and {beta.data.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    data = gamma.data * xhat + beta.data

    def back(g, grads):
        red = tuple(range(g.ndim - 1))
        _accum(grads, gamma, (g * xhat).sum(axis=red))
        _accum(grads, beta, g.sum(axis=red))
        if x._needs:
            gg = g * gamma.data
            gm = gg.mean(axis=-1, keepdims=True)
            gx = (gg * xhat).mean(axis=-1, keepdims=True)
            _accum(grads, x, inv * (gg - gm - xhat * gx))

    return _node(data, (x, gamma, beta), back)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head scaled dot-product attention over the time axis.

    ``q/k/v`` are (B, T, D); composed from checked primitives so the
    gradient comes for free.
    """
    d = q.data.shape[-1]
    if k.data.shape[-1] != d or v.data.shape[-2] != k.data.shape[-2]:
        raise ShapeError(f"attention: incompatible shapes q={q.data.shape}, k={k.data.shape}, v={v.data.shape}")
    scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(d))
    return matmul(softmax(scores), v)


LAYER_KINDS = {
    "conv1d": conv1d,
    "conv2d": conv2d,
    "conv_transpose1d": conv_transpose1d,
    "linear": linear,
    "relu": relu,
    "softmax-over-last-dim": softmax,
    "batchnorm2d": batchnorm2d,
    "maxpool1d": maxpool1d,
    "add": add,
    "concat": concat,
    "layernorm": layernorm,
    "scaled-dot-product-attention": attention,
}


def layer_forward(kind: str, *args, **kwargs) -> Tensor:
    """Dispatch a forward pass by layer-kind name."""
    try:
        fn = LAYER_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}; expected one of {sorted(LAYER_KINDS)}") from None
    return fn(*args, **kwargs)
