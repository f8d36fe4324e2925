"""Dense 1-D tensor kernels with explicit forward and backward passes.

Every layer the disaggregation network needs is implemented as a pair of
functions: a forward kernel and a matching backward kernel that maps the
upstream gradient to gradients of the kernel's inputs.  Arrays follow the
(batch, channels, length) convention.  Convolutions are lowered to GEMM via
im2col so float32 training runs at BLAS speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Dimension mismatch; carries the name of the offending axis."""

    def __init__(self, axis: str, message: str):
        self.axis = axis
        super().__init__(f"axis '{axis}': {message}")


class LayoutError(ValueError):
    """Two parameter vectors disagree on layout; names the first divergent layer."""


class OracleError(RuntimeError):
    """The finite-difference oracle could not produce a verdict."""


class Tensor:
    """Value buffer plus an optional same-shape gradient buffer.

    Used for layer parameters; activations travel as plain ndarrays.  A
    Tensor is single-owner: it must not be mutated from two threads.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray, grad: np.ndarray | None = None):
        if grad is not None and grad.shape != data.shape:
            raise ShapeError("grad", f"grad shape {grad.shape} != data shape {data.shape}")
        self.data = data
        self.grad = grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0


# ---------------------------------------------------------------------------
# parameter vectors and the optimizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayoutEntry:
    """Placement of one named parameter array inside a flat vector."""

    layer: str
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


@dataclass
class ParamVector:
    """Canonical flat ordering of all model parameters.

    The layout lists (layer, name, shape, offset) entries whose offsets are
    contiguous, non-overlapping and cover the whole value array.  Two models
    built from the same configuration produce identical layouts, which is
    what makes federated averaging and wire transfer well defined.
    """

    values: np.ndarray
    layout: tuple[LayoutEntry, ...] = field(default=())

    def __post_init__(self):
        if self.values.ndim != 1:
            raise ShapeError("values", "parameter vector must be 1-D")
        expect = 0
        for entry in self.layout:
            if entry.offset != expect:
                raise LayoutError(
                    f"layer '{entry.layer}': offset {entry.offset}, expected {expect}"
                )
            expect += entry.size
        if self.layout and expect != self.values.size:
            raise LayoutError(
                f"layout covers {expect} values but vector holds {self.values.size}"
            )

    @property
    def size(self) -> int:
        return int(self.values.size)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def view(self, layer: str, name: str) -> np.ndarray:
        for entry in self.layout:
            if entry.layer == layer and entry.name == name:
                return self.values[entry.offset : entry.offset + entry.size].reshape(entry.shape)
        raise KeyError(f"no parameter '{name}' in layer '{layer}'")


def check_same_layout(a: ParamVector, b: ParamVector) -> None:
    """Raise LayoutError naming the first divergent layer if layouts differ."""
    if a.size != b.size:
        raise LayoutError(f"vector sizes differ: {a.size} vs {b.size}")
    for ea, eb in zip(a.layout, b.layout):
        if ea != eb:
            raise LayoutError(f"layouts diverge at layer '{ea.layer}' vs '{eb.layer}'")
    if len(a.layout) != len(b.layout):
        extra = a.layout[len(b.layout)] if len(a.layout) > len(b.layout) else b.layout[len(a.layout)]
        raise LayoutError(f"layouts diverge at layer '{extra.layer}'")


@dataclass
class OptimizerState:
    """SGD-with-momentum state: the moment estimate plus its hyperparameters."""

    velocity: np.ndarray
    eta: float
    rho: float

    def __post_init__(self):
        # eta = 0 is admitted so a no-op learning rate still updates momentum
        if self.eta < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.eta}")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.rho}")


def sgd_momentum_step_raw(
    values: np.ndarray, grads: np.ndarray, velocity: np.ndarray, eta: float, rho: float
) -> None:
    """In-place update: v <- rho·v + d, then w <- w − eta·v, in that order."""
    if grads.shape != values.shape or velocity.shape != values.shape:
        raise ShapeError("values", "params, grads and velocity must have equal length")
    np.multiply(velocity, rho, out=velocity)
    velocity += grads
    values -= eta * velocity


def sgd_momentum_step(
    params: ParamVector, grads: ParamVector, state: OptimizerState
) -> tuple[ParamVector, OptimizerState]:
    """Apply one momentum-SGD step in place and return the updated pair."""
    if grads.size != params.size:
        raise LayoutError(f"gradient length {grads.size} != parameter length {params.size}")
    if state.velocity.size != params.size:
        raise LayoutError(f"velocity length {state.velocity.size} != parameter length {params.size}")
    sgd_momentum_step_raw(params.values, grads.values, state.velocity, state.eta, state.rho)
    return params, state


# ---------------------------------------------------------------------------
# layer kernels
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kernel: int) -> np.ndarray:
    """(B, C, L) -> (B·Lout, C·K) patch matrix for GEMM-based convolution."""
    b, c, length = x.shape
    lout = length - kernel + 1
    win = sliding_window_view(x, kernel, axis=2)  # (B, C, Lout, K)
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(b * lout, c * kernel)


def conv1d(
    x: np.ndarray, weight: np.ndarray, bias: np.ndarray, padding: int
) -> np.ndarray:
    """Cross-correlate (B, Cin, L) with (Cout, Cin, K) kernels.

    Output length is L + 2·padding − K + 1.  The kernel size must be odd.
    """
    if x.ndim != 3:
        raise ShapeError("batch", f"expected (B, C, L) input, got ndim={x.ndim}")
    b, cin, length = x.shape
    cout, wcin, kernel = weight.shape
    if wcin != cin:
        raise ShapeError("channels", f"input has {cin} channels, weight expects {wcin}")
    if bias.shape != (cout,):
        raise ShapeError("channels", f"bias shape {bias.shape} != ({cout},)")
    if kernel % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {kernel}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    lout = length + 2 * padding - kernel + 1
    if lout < 1:
        raise ShapeError("length", f"output length {lout} < 1 (L={length}, K={kernel}, pad={padding})")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    cols = _im2col(xp, kernel)
    out = cols @ weight.reshape(cout, cin * kernel).T
    out += bias
    return np.ascontiguousarray(out.reshape(b, lout, cout).transpose(0, 2, 1))


def conv1d_backward(
    x: np.ndarray,
    weight: np.ndarray,
    padding: int,
    grad_out: np.ndarray,
    need_input_grad: bool = True,
    cols: np.ndarray | None = None,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of conv1d w.r.t. (input, weight, bias).

    `cols` may carry the forward pass's im2col matrix to avoid recomputing it.
    """
    b, cin, length = x.shape
    cout, _, kernel = weight.shape
    lout = grad_out.shape[2]
    gy = np.ascontiguousarray(grad_out.transpose(0, 2, 1)).reshape(b * lout, cout)
    if cols is None:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
        cols = _im2col(xp, kernel)
    grad_w = (gy.T @ cols).reshape(cout, cin, kernel)
    grad_b = gy.sum(axis=0)
    grad_x = None
    if need_input_grad:
        # full correlation of grad_out with the flipped kernel, then crop padding
        gyp = np.pad(grad_out, ((0, 0), (0, 0), (kernel - 1, kernel - 1)))
        gcols = _im2col(gyp, kernel)  # (B·(L+2p), Cout·K)
        wflip = np.ascontiguousarray(weight[:, :, ::-1].transpose(0, 2, 1)).reshape(
            cout * kernel, cin
        )
        gxp = (gcols @ wflip).reshape(b, length + 2 * padding, cin).transpose(0, 2, 1)
        grad_x = np.ascontiguousarray(gxp[:, :, padding : padding + length])
    return grad_x, grad_w, grad_b


def avg_pool1d_out_len(length: int, size: int, stride: int) -> int:
    """Ceiling-mode output length; a too-large window still yields one output.

    Every window must start inside the signal, so for stride > size the count
    is additionally clamped to ceil(length/stride).
    """
    return max(1, min(-(-(length - size) // stride) + 1, -(-length // stride)))


def avg_pool1d(x: np.ndarray, size: int, stride: int) -> np.ndarray:
    """Average pooling with ceiling semantics.

    A partial final window is averaged over only its available elements, and
    a window larger than the signal pools the whole signal into one output.
    """
    if size < 1 or stride < 1:
        raise ValueError(f"pool size and stride must be >= 1, got {size}, {stride}")
    b, c, length = x.shape
    lout = avg_pool1d_out_len(length, size, stride)
    if size == stride:
        full = min(length // size, lout)
        out = np.empty((b, c, lout), dtype=x.dtype)
        if full:
            out[:, :, :full] = x[:, :, : full * size].reshape(b, c, full, size).mean(axis=3)
        if lout > full:
            out[:, :, full] = x[:, :, full * size :].mean(axis=2)
        return out
    out = np.empty((b, c, lout), dtype=x.dtype)
    for t in range(lout):
        lo = t * stride
        hi = min(lo + size, length)
        out[:, :, t] = x[:, :, lo:hi].mean(axis=2)
    return out


def avg_pool1d_backward(
    grad_out: np.ndarray, length: int, size: int, stride: int
) -> np.ndarray:
    """Distribute each pooled gradient equally over its contributing elements."""
    b, c, lout = grad_out.shape
    gx = np.zeros((b, c, length), dtype=grad_out.dtype)
    if size == stride:
        full = min(length // size, lout)
        if full:
            gx[:, :, : full * size] = np.repeat(grad_out[:, :, :full] / size, size, axis=2)
        if lout > full:
            tail = length - full * size
            gx[:, :, full * size :] = grad_out[:, :, full : full + 1] / tail
        return gx
    for t in range(lout):
        lo = t * stride
        hi = min(lo + size, length)
        gx[:, :, lo:hi] += grad_out[:, :, t : t + 1] / (hi - lo)
    return gx


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    """Repeat every element `factor` times along the length axis."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    return np.repeat(x, factor, axis=2)


def upsample_nearest_backward(grad_out: np.ndarray, factor: int) -> np.ndarray:
    """Sum gradients over each repeat group."""
    if factor == 1:
        return grad_out
    b, c, length = grad_out.shape
    if length % factor != 0:
        raise ShapeError("length", f"gradient length {length} not divisible by factor {factor}")
    return grad_out.reshape(b, c, length // factor, factor).sum(axis=3)


def concat_channels(inputs: list[np.ndarray]) -> np.ndarray:
    """Concatenate along the channel axis; all inputs must share B and L."""
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    b, _, length = inputs[0].shape
    for i, arr in enumerate(inputs[1:], start=1):
        if arr.shape[0] != b:
            raise ShapeError("batch", f"input {i} has batch {arr.shape[0]}, expected {b}")
        if arr.shape[2] != length:
            raise ShapeError("length", f"input {i} has length {arr.shape[2]}, expected {length}")
    return np.concatenate(inputs, axis=1)


def concat_channels_backward(
    grad_out: np.ndarray, channel_sizes: list[int]
) -> list[np.ndarray]:
    """Slice the gradient back into per-input channel blocks."""
    splits = np.cumsum(channel_sizes)[:-1]
    return np.split(grad_out, splits, axis=1)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gate the gradient at x > 0; the subgradient at exactly 0 is 0."""
    return grad_out * (x > 0)


def dropout_mask(shape: tuple[int, ...], p: float, rng: np.random.Generator, dtype) -> np.ndarray:
    """Inverted-dropout multiplier: survivors carry 1/(1−p), dropped entries 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / dtype(1.0 - p)


def dropout(
    x: np.ndarray, p: float, rng: np.random.Generator | None, training: bool
) -> tuple[np.ndarray, np.ndarray | None]:
    """Apply inverted dropout; returns (output, multiplier-or-None).

    In evaluation mode or at p = 0 the input passes through unchanged and no
    random numbers are consumed.
    """
    if not training or p == 0.0:
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit random stream")
    mult = dropout_mask(x.shape, p, rng, x.dtype.type)
    return x * mult, mult


LOG_CLAMP = 1e-12


def softmax2_bce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Two-way-softmax binary cross-entropy over per-appliance channel pairs.

    Channels come in (OFF, ON) pairs, one pair per appliance.  The loss is
    the mean over batch and steps of −[s·log p + (1−s)·log(1−p)] for each
    appliance, summed over appliances, with log arguments clamped at 1e-12.
    Returns the loss and its analytic gradient w.r.t. the logits.
    """
    if logits.ndim != 3 or labels.ndim != 3:
        raise ShapeError("batch", "logits and labels must be (B, C, L) arrays")
    b, channels, steps = logits.shape
    if channels != 2 * labels.shape[1]:
        raise ShapeError(
            "channels", f"got {channels} logit channels for {labels.shape[1]} appliances"
        )
    if labels.shape[0] != b or labels.shape[2] != steps:
        raise ShapeError("length", f"labels shape {labels.shape} does not match logits {logits.shape}")
    lab = np.asarray(labels)
    if not np.isin(lab, (0, 1)).all():
        raise ValueError("labels must be binary (0 or 1)")
    lab = lab.astype(logits.dtype)

    z_off = logits[:, 0::2, :]
    z_on = logits[:, 1::2, :]
    diff = z_on - z_off
    # numerically stable sigmoid of the logit difference
    p = np.empty_like(diff)
    pos = diff >= 0
    p[pos] = 1.0 / (1.0 + np.exp(-diff[pos]))
    ez = np.exp(diff[~pos])
    p[~pos] = ez / (1.0 + ez)

    terms = -(
        lab * np.log(np.maximum(p, LOG_CLAMP))
        + (1.0 - lab) * np.log(np.maximum(1.0 - p, LOG_CLAMP))
    )
    loss = float(terms.mean(axis=(0, 2)).sum())

    g = (p - lab) / logits.dtype.type(b * steps)
    grad = np.empty_like(logits)
    grad[:, 1::2, :] = g
    grad[:, 0::2, :] = -g
    return loss, grad


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_check(
    f,
    point: np.ndarray,
    analytic: np.ndarray,
    epsilon: float = 1e-5,
    max_coords: int = 512,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> float:
    """Max relative error between `analytic` and central differences of `f`.

    All coordinates are probed when the point is small; otherwise a random
    subset of at least 64 coordinates is drawn from `rng`.  The relative
    error denominator is floored so that a pair of exact zeros scores 0.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    point = np.asarray(point, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != point.shape:
        raise ShapeError("values", "analytic gradient must match the point's shape")
    n = point.size
    if n <= max_coords:
        coords = np.arange(n)
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        coords = rng.choice(n, size=max(64, max_coords), replace=False)
    worst = 0.0
    work = point.copy()
    for i in coords:
        orig = work[i]
        work[i] = orig + epsilon
        f_hi = float(f(work))
        work[i] = orig - epsilon
        f_lo = float(f(work))
        work[i] = orig
        if not (math.isfinite(f_hi) and math.isfinite(f_lo)):
            raise OracleError(f"objective is non-finite near coordinate {i}")
        numeric = (f_hi - f_lo) / (2.0 * epsilon)
        denom = max(abs(analytic[i]), abs(numeric), floor)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
