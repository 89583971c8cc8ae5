"""Dense float64 tensors with taped reverse-mode gradients.

Image tensors follow the [batch, channel, height, width] layout. Every
operation is a pure function: it allocates a fresh output tensor and, when a
GradTape is supplied, registers the matching backward rule on it. Replaying
the tape in reverse accumulates gradients into each tensor's ``grad`` buffer.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


class TensorError(Exception):
    """Base class for tensor-level failures."""


class DimensionError(TensorError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigurationError(TensorError):
    """Operation hyperparameters do not fit the operand geometry."""


class NonFiniteError(TensorError):
    """An operation produced NaN or Inf values."""


class Tensor:
    """A dense N-dimensional float64 array plus a gradient accumulator."""

    __slots__ = ("data", "grad")

    def __init__(self, data, copy: bool = False):
        if copy:
            self.data = np.array(data, dtype=np.float64)
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


class GradTape:
    """Ordered record of executed primitives for one backward replay.

    A tape is confined to a single training task; independent tasks use
    independent tapes and may run concurrently.
    """

    def __init__(self):
        self._ops: list = []

    def record(self, out: Tensor, backward_fn) -> None:
        self._ops.append((out, backward_fn))

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, output: Tensor) -> None:
        if output.data.size != 1:
            raise DimensionError("backward requires a scalar output tensor")
        output.grad = np.ones_like(output.data)
        for out, fn in reversed(self._ops):
            # ops whose result never fed the scalar carry no gradient
            if out.grad is not None:
                fn()


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into the gradient buffer of ``t``, allocating on first use."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _require_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _require_4d(t: Tensor, op: str, name: str = "input") -> None:
    if t.data.ndim != 4:
        raise DimensionError(f"{op}: {name} must be 4-D [B,C,H,W], got shape {t.shape}")


# ---------------------------------------------------------------------------
# convolution

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(b, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
    )
    return np.ascontiguousarray(view).reshape(b, c * kh * kw, ho * wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0, tape: GradTape | None = None) -> Tensor:
    """Cross-correlation with zero padding.

    x: [B,Cin,H,W], kernel: [Cout,Cin,kh,kw], bias: [Cout].
    """
    _require_4d(x, "conv2d")
    _require_4d(kernel, "conv2d", "kernel")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if bias.data.ndim != 1 or bias.shape[0] != cout:
        raise DimensionError(f"conv2d: bias must have shape [{cout}], got {bias.shape}")
    if kcin != cin:
        raise DimensionError(f"conv2d: kernel expects {kcin} input channels, input has {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ConfigurationError("conv2d: stride must be >= 1 and padding >= 0")
    span_h = h + 2 * padding - kh
    span_w = w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ConfigurationError(
            f"conv2d: output size not a positive integer for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}")
    ho = span_h // stride + 1
    wo = span_w // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = kernel.data.reshape(cout, cin * kh * kw)
    out_flat = np.matmul(w2, cols) + bias.data[:, None]
    out = Tensor(out_flat.reshape(b, cout, ho, wo))
    _require_finite(out.data, "conv2d")

    if tape is not None:
        hp, wp = xp.shape[2], xp.shape[3]

        def backward():
            g2 = out.grad.reshape(b, cout, ho * wo)
            accumulate(bias, g2.sum(axis=(0, 2)))
            dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            accumulate(kernel, dw.reshape(kernel.shape))
            dcols = np.matmul(w2.T, g2).reshape(b, cin, kh, kw, ho, wo)
            dxp = np.zeros((b, cin, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride,
                        j:j + stride * wo:stride] += dcols[:, :, i, j]
            if padding:
                accumulate(x, dxp[:, :, padding:padding + h, padding:padding + w])
            else:
                accumulate(x, dxp)

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# normalization and activations

def instance_norm(x: Tensor, eps: float = 1e-5, tape: GradTape | None = None) -> Tensor:
    """Normalize each (batch, channel) plane to zero mean, unit variance."""
    _require_4d(x, "instance_norm")
    _, _, h, w = x.shape
    if h * w < 2:
        raise ConfigurationError("instance_norm: plane must contain at least 2 pixels")
    if eps <= 0:
        raise ConfigurationError("instance_norm: eps must be positive")
    mean = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = Tensor(xhat)
    _require_finite(out.data, "instance_norm")

    if tape is not None:
        def backward():
            g = out.grad
            gm = g.mean(axis=(2, 3), keepdims=True)
            gx = (g * xhat).mean(axis=(2, 3), keepdims=True)
            accumulate(x, inv * (g - gm - xhat * gx))

        tape.record(out, backward)
    return out


def leaky_relu(x: Tensor, slope: float = 0.01, tape: GradTape | None = None) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ConfigurationError("leaky_relu: slope must be in [0, 1)")
    pos = x.data >= 0
    out = Tensor(np.where(pos, x.data, slope * x.data))
    _require_finite(out.data, "leaky_relu")

    if tape is not None:
        def backward():
            accumulate(x, out.grad * np.where(pos, 1.0, slope))

        tape.record(out, backward)
    return out


def softmax_channels(x: Tensor, tape: GradTape | None = None) -> Tensor:
    """Per-pixel softmax across the channel axis, max-subtracted for stability."""
    _require_4d(x, "softmax_channels")
    if x.shape[1] < 2:
        raise DimensionError("softmax_channels: need at least 2 channels")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor(s)
    _require_finite(out.data, "softmax_channels")

    if tape is not None:
        def backward():
            g = out.grad
            accumulate(x, s * (g - (g * s).sum(axis=1, keepdims=True)))

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# pooling and resampling

def maxpool2(x: Tensor, tape: GradTape | None = None) -> Tensor:
    """2x2 max pooling, stride 2. Ties route to the first window position in
    row-major scan order."""
    _require_4d(x, "maxpool2")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"maxpool2: spatial dims must be even, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = (x.data.reshape(b, c, ho, 2, wo, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(b, c, ho, wo, 4))
    idx = windows.argmax(axis=-1)
    out = Tensor(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0])
    _require_finite(out.data, "maxpool2")

    if tape is not None:
        def backward():
            buf = np.zeros((b, c, ho, wo, 4))
            np.put_along_axis(buf, idx[..., None], out.grad[..., None], axis=-1)
            dx = (buf.reshape(b, c, ho, wo, 2, 2)
                  .transpose(0, 1, 2, 4, 3, 5)
                  .reshape(b, c, h, w))
            accumulate(x, dx)

        tape.record(out, backward)
    return out


def upsample2(x: Tensor, tape: GradTape | None = None) -> Tensor:
    """Nearest-neighbor 2x upsampling; backward sums each 2x2 block."""
    _require_4d(x, "upsample2")
    b, c, h, w = x.shape
    out = Tensor(x.data.repeat(2, axis=2).repeat(2, axis=3))
    _require_finite(out.data, "upsample2")

    if tape is not None:
        def backward():
            accumulate(x, out.grad.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# channel plumbing

def concat_channels(parts: list[Tensor], tape: GradTape | None = None) -> Tensor:
    """Channel-axis concatenation in argument order."""
    if not parts:
        raise DimensionError("concat_channels: need at least one part")
    for p in parts:
        _require_4d(p, "concat_channels", "part")
    b, _, h, w = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != b or p.shape[2] != h or p.shape[3] != w:
            raise DimensionError(
                f"concat_channels: spatial mismatch {p.shape} vs {(b, '*', h, w)}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    _require_finite(out.data, "concat_channels")

    if tape is not None:
        offsets = np.cumsum([0] + [p.shape[1] for p in parts])

        def backward():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                accumulate(p, out.grad[:, lo:hi])

        tape.record(out, backward)
    return out


def select_channels(x: Tensor, ids: list[int], tape: GradTape | None = None) -> Tensor:
    """Slice the listed channels, preserving their order."""
    _require_4d(x, "select_channels")
    c = x.shape[1]
    if any(i < 0 or i >= c for i in ids):
        raise DimensionError(f"select_channels: ids {ids} out of range for {c} channels")
    ids = list(ids)
    out = Tensor(x.data[:, ids].copy())

    if tape is not None:
        def backward():
            g = np.zeros_like(x.data)
            for pos, i in enumerate(ids):
                g[:, i] += out.grad[:, pos]
            accumulate(x, g)

        tape.record(out, backward)
    return out


def merge_channels(x: Tensor, ids: list[int], tape: GradTape | None = None) -> Tensor:
    """Sum the listed channels into a single channel [B,1,H,W]."""
    _require_4d(x, "merge_channels")
    c = x.shape[1]
    if any(i < 0 or i >= c for i in ids):
        raise DimensionError(f"merge_channels: ids {ids} out of range for {c} channels")
    ids = list(ids)
    out = Tensor(x.data[:, ids].sum(axis=1, keepdims=True))
    _require_finite(out.data, "merge_channels")

    if tape is not None:
        def backward():
            g = np.zeros_like(x.data)
            for i in ids:
                g[:, i] += out.grad[:, 0]
            accumulate(x, g)

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# elementwise and scalar plumbing

def add(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    _require_finite(out.data, "add")

    if tape is not None:
        def backward():
            accumulate(a, out.grad)
            accumulate(b, out.grad)

        tape.record(out, backward)
    return out


def scale_add(x: Tensor, scale: float = 1.0, offset: float = 0.0,
              tape: GradTape | None = None) -> Tensor:
    """Affine map ``scale * x + offset``."""
    out = Tensor(scale * x.data + offset)
    _require_finite(out.data, "scale_add")

    if tape is not None:
        def backward():
            accumulate(x, scale * out.grad)

        tape.record(out, backward)
    return out


def clamp(x: Tensor, lo: float, hi: float, tape: GradTape | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where x lies strictly inside."""
    if lo >= hi:
        raise ConfigurationError("clamp: lo must be < hi")
    out = Tensor(np.clip(x.data, lo, hi))

    if tape is not None:
        inside = (x.data > lo) & (x.data < hi)

        def backward():
            accumulate(x, out.grad * inside)

        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# gradient verification

def grad_check(fn, tensors: list[Tensor], step: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn(tape)`` must evaluate a scalar Tensor from the current contents of
    ``tensors``, recording on ``tape`` when one is given. Returns the maximum
    over all components of |analytic - numeric| / max(1, |numeric|).
    """
    if not 1e-6 <= step <= 1e-3:
        raise ConfigurationError("grad_check: step must lie in [1e-6, 1e-3]")
    tape = GradTape()
    for t in tensors:
        t.grad = None
    loss = fn(tape)
    if loss.data.size != 1:
        raise DimensionError("grad_check: fn must return a scalar tensor")
    _require_finite(loss.data, "grad_check")
    tape.backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]
    for t in tensors:
        t.grad = None

    max_err = 0.0
    for t, ag in zip(tensors, analytic):
        flat = t.data.ravel()
        aflat = ag.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_hi = float(fn(None).data)
            flat[i] = orig - step
            f_lo = float(fn(None).data)
            flat[i] = orig
            if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
                raise NonFiniteError("grad_check: non-finite evaluation at perturbed point")
            numeric = (f_hi - f_lo) / (2.0 * step)
            err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            if err > max_err:
                max_err = err
    return max_err
