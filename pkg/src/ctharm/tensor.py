"""Minimal reverse-mode autodiff engine over numpy arrays.

Tensors carry float32 data by default (float64 is accepted and preserved,
which lets reference checks run the same graph in higher precision).
Every forward op validates its output for NaN/Inf and registers a backward
closure only when some input requires gradients; `backward()` walks the
graph in reverse topological order and accumulates parent gradients.

Scope is exactly what the networks here need: conv2d, 2x pooling and
upsampling, elementwise activations, instance norm, channel concat, a few
arithmetic/reduction ops, the two losses, and Adam.  Single-threaded by
design; independent graphs never share state.
"""

from __future__ import annotations

import threading

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class GradientError(RuntimeError):
    """Raised for misuse of the gradient machinery."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


# per-thread so independent graphs on different threads stay independent
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph construction (inference mode)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype == np.float64:
        return np.ascontiguousarray(arr)
    return np.ascontiguousarray(arr, dtype=np.float32)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced in {what}")


class Tensor:
    """N-dimensional float array with optional gradient tracking.

    `grad` is populated (same shape/dtype as `data`) by `backward()` for
    every tensor in the graph that requires grad.  Frozen tensors
    (requires_grad=False) never receive gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        _check_finite(self.data, "tensor construction")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return (f"Tensor(shape={tuple(self.data.shape)}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad}, op={self._op})")


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    _check_finite(data, f"forward op {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def backward(loss: Tensor) -> None:
    """Populate grads of everything reachable from a scalar loss.

    Gradients accumulate (+=) into `.grad`; callers zero them between steps.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise GradientError("backward() on a tensor that does not require grad")

    # iterative topological order (reverse postorder DFS)
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
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is None or node.grad is None:
            continue
        contribs = node._backward_fn(node.grad)
        for parent, contrib in zip(node._parents, contribs):
            if contrib is None or not parent.requires_grad:
                continue
            _check_finite(contrib, f"backward of {node._op}")
            if parent.grad is None:
                parent.grad = contrib.astype(parent.data.dtype, copy=True)
            else:
                parent.grad += contrib


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(w, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(cols: np.ndarray, x_shape, kh, kw, stride, padding, oh, ow) -> np.ndarray:
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    cg = cols.reshape(n, c, kh, kw, oh, ow)
    dx = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cg[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:hp - padding, padding:wp - padding]
    return dx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation with zero padding, im2col + GEMM."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input/weight, got {x.data.shape} and {weight.data.shape}")
    n, c, h, w = x.data.shape
    k, cw, kh, kw = weight.data.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if bias.data.shape != (k,):
        raise ShapeError(f"conv2d bias must have shape ({k},), got {bias.data.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride>=1 and padding>=0, got {stride}, {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input "
                         f"{h + 2 * padding}x{w + 2 * padding}")

    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    w_mat = weight.data.reshape(k, c * kh * kw)
    out = np.matmul(w_mat, cols)        # (n, k, oh*ow)
    out += bias.data.reshape(1, k, 1)
    out = out.reshape(n, k, oh, ow)
    # keep cols for the weight gradient only when it will be needed
    saved_cols = cols if weight.requires_grad else None

    def backward_fn(g):
        g_mat = g.reshape(n, k, oh * ow)
        gx = gw = gb = None
        if x.requires_grad:
            cols_grad = np.matmul(w_mat.T, g_mat)
            gx = _col2im(cols_grad, x.data.shape, kh, kw, stride, padding, oh, ow)
        if weight.requires_grad:
            gw = np.matmul(g_mat, saved_cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.data.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _make(out, (x, weight, bias), backward_fn, "conv2d")


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Requires even spatial dims."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    win = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)           # first max wins on ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gw = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make(out, (x,), backward_fn, "maxpool2")


def upsample_nearest2(x: Tensor) -> Tensor:
    """Double H and W by pixel replication."""
    n, c, h, w = x.data.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)
    out = np.ascontiguousarray(out)

    def backward_fn(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), backward_fn, "upsample_nearest2")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward_fn(g):
        return (g * (x.data > 0),)

    return _make(out, (x,), backward_fn, "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    out = np.where(x.data > 0, x.data, x.data * slope)

    def backward_fn(g):
        return (g * np.where(x.data > 0, 1.0, slope).astype(g.dtype),)

    return _make(out, (x,), backward_fn, "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic, clamped to the open interval (0, 1)."""
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    fi = np.finfo(z.dtype)
    np.clip(out, fi.tiny, 1.0 - fi.epsneg, out=out)

    def backward_fn(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward_fn, "sigmoid")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def backward_fn(g):
        return g, g

    return _make(out, (a, b), backward_fn, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data * b.data

    def backward_fn(g):
        return g * b.data, g * a.data

    return _make(out, (a, b), backward_fn, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * factor

    def backward_fn(g):
        return (g * factor,)

    return _make(out, (x,), backward_fn, "scale")


def add_scalar(x: Tensor, value: float) -> Tensor:
    out = x.data + value

    def backward_fn(g):
        return (g,)

    return _make(out, (x,), backward_fn, "add_scalar")


# ---------------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------------

def mean_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)
    inv = 1.0 / x.data.size

    def backward_fn(g):
        return (np.full_like(x.data, g.reshape(()) * inv),)

    return _make(out, (x,), backward_fn, "mean_all")


def mean_hw(x: Tensor) -> Tensor:
    """Global average pool: (N, C, H, W) -> (N, C)."""
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))
    inv = 1.0 / (h * w)

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None] * inv, x.data.shape).astype(g.dtype, copy=True),)

    return _make(out, (x,), backward_fn, "mean_hw")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ShapeError(f"concat_channels mismatch: {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward_fn(g):
        return g[:, :ca], g[:, ca:]

    return _make(out, (a, b), backward_fn, "concat_channels")


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over H, W with learned affine."""
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"instance_norm affine params must have shape ({c},)")
    if h * w < 2:
        raise ShapeError("instance_norm needs at least 2 spatial elements")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward_fn(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gbeta = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gh = g * gamma.data[None, :, None, None]
            m1 = gh.mean(axis=(2, 3), keepdims=True)
            m2 = (gh * xhat).mean(axis=(2, 3), keepdims=True)
            gx = inv * (gh - m1 - xhat * m2)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward_fn, "instance_norm")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """(N, F) @ (C, F).T + (C,) -> (N, C)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(f"linear mismatch: x {x.data.shape}, weight {weight.data.shape}")
    out = x.data @ weight.data.T + bias.data[None, :]

    def backward_fn(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, (x, weight, bias), backward_fn, "linear")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_with_logits(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy on raw logits, log-sum-exp stabilized."""
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"bce_with_logits shape mismatch: {pred.data.shape} vs {target.data.shape}")
    z, t = pred.data, target.data
    loss_el = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(loss_el.mean(), dtype=z.dtype)
    inv = 1.0 / z.size

    def backward_fn(g):
        gs = g.reshape(()) * inv
        gp = gt = None
        if pred.requires_grad:
            sig = np.empty_like(z)
            pos = z >= 0
            sig[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
            ez = np.exp(z[~pos])
            sig[~pos] = ez / (1.0 + ez)
            gp = gs * (sig - t)
        if target.requires_grad:
            gt = gs * (-z)
        return gp, gt

    return _make(out, (pred, target), backward_fn, "bce_with_logits")


def l1_mean(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference."""
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"l1_mean shape mismatch: {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    out = np.asarray(np.abs(diff).mean(), dtype=pred.data.dtype)
    inv = 1.0 / diff.size

    def backward_fn(g):
        s = np.sign(diff) * (g.reshape(()) * inv)
        return s, -s

    return _make(out, (pred, target), backward_fn, "l1_mean")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of (N, C) logits against integer class labels."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (N, C) logits, got {logits.data.shape}")
    labels = np.asarray(labels)
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    lse = np.log(sez) + zmax
    picked = z[np.arange(n), labels][:, None]
    out = np.asarray((lse - picked).mean(), dtype=z.dtype)

    def backward_fn(g):
        soft = ez / sez
        soft[np.arange(n), labels] -= 1.0
        return (soft * (g.reshape(()) / n),)

    return _make(out, (logits,), backward_fn, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class OptimState:
    """Per-parameter Adam buffers: first/second moments and step count."""

    __slots__ = ("m", "v", "t")

    def __init__(self, shape, dtype):
        self.m = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.t = 0


def adam_step(named_params, state: dict, lr: float, beta1: float, beta2: float,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update on trainable params; zeroes grads after.

    Frozen tensors (requires_grad=False) are skipped entirely.  A trainable
    parameter without a populated gradient is an error.
    """
    for name, p in named_params:
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise GradientError(f"parameter '{name}' is trainable but has no gradient")
        st = state.get(name)
        if st is None:
            st = state[name] = OptimState(p.data.shape, p.data.dtype)
        g = p.grad
        st.t += 1
        st.m += (1.0 - beta1) * (g - st.m)
        st.v += (1.0 - beta2) * (g * g - st.v)
        mhat = st.m / (1.0 - beta1 ** st.t)
        vhat = st.v / (1.0 - beta2 ** st.t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)
        _check_finite(p.data, f"adam update of '{name}'")
        p.grad = None


class Adam:
    """Convenience wrapper binding an Adam state dict to a parameter list."""

    def __init__(self, named_params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict[str, OptimState] = {}

    def step(self) -> None:
        adam_step(self.named_params, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None
