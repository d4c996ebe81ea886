"""Minimal differentiable tensor ops for the counting networks.

Every layer used by the models lives here as a pure function with an exact
adjoint. Tensors are plain numpy arrays of shape (batch, channels, rows, cols)
in float32; scalar reductions accumulate in float64.

Fixed numeric conventions (tests rely on these):
  * conv2d is stride-1 cross-correlation with zero "same" padding of (k-1)/2.
  * relu passes gradient only where the input is strictly positive.
  * maxpool2x2 breaks ties toward the first maximum in row-major window order.
  * upsample2x_bilinear uses half-pixel-centered interpolation with edge
    clamping (the 1D weight table is spelled out on the function).
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass
class ConvFilter:
    """Trainable parameters of one convolution: weights (O, I, k, k) + bias (O,)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float32)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float32)
        if self.weights.ndim != 4:
            raise ValueError(f"conv weights must be 4D, got shape {self.weights.shape}")
        k = self.weights.shape[2]
        if self.weights.shape[3] != k:
            raise ValueError("conv kernels must be square")
        if k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {k}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} output channels"
            )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]


def _check_input(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"expected a (B, C, H, W) tensor, got shape {x.shape}")
    return x


def _conv_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Stride-1 same-padded cross-correlation, no bias. x (B,C,H,W), w (O,C,k,k).

    Evaluated as one channel-mixing GEMM per kernel offset on the padded
    input, accumulating shifted slices of each product; this avoids im2col
    buffers entirely. Offsets accumulate in fixed (u, v) order, so results
    are bitwise reproducible.
    """
    b, c, h, wid = x.shape
    o, _, k, _ = w.shape
    if k == 1:
        y = np.matmul(w.reshape(o, c), x.reshape(b, c, h * wid))
        return y.reshape(b, o, h, wid)
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    hp, wp = h + 2 * p, wid + 2 * p
    xf = xp.reshape(b, c, hp * wp)
    w_off = np.ascontiguousarray(w.transpose(2, 3, 0, 1))  # contiguous (O, C) per offset
    y = np.zeros((b, o, h, wid), dtype=np.float32)
    buf = np.empty((b, o, hp * wp), dtype=np.float32)
    for u in range(k):
        for v in range(k):
            np.matmul(w_off[u, v], xf, out=buf)
            y += buf.reshape(b, o, hp, wp)[:, :, u : u + h, v : v + wid]
    return y


def conv2d(x: np.ndarray, filt: ConvFilter) -> np.ndarray:
    """Same-padded stride-1 convolution. Output shape (B, out_channels, H, W)."""
    x = _check_input(x)
    if x.shape[1] != filt.in_channels:
        raise ValueError(
            f"input has {x.shape[1]} channels, filter expects {filt.in_channels}"
        )
    y = _conv_same(x, filt.weights)
    y += filt.bias[None, :, None, None]
    return y


def conv2d_backward(x: np.ndarray, filt: ConvFilter, grad_out: np.ndarray):
    """Adjoint of conv2d: gradients w.r.t. input, weights and bias.

    The input gradient is itself a same-padded convolution of grad_out with
    the spatially flipped, channel-transposed weights; the weight gradient is
    the correlation of grad_out with the padded input windows.
    """
    x = _check_input(x)
    grad_out = _check_input(grad_out)
    o, c, k, _ = filt.weights.shape
    if grad_out.shape != (x.shape[0], o, x.shape[2], x.shape[3]):
        raise ValueError(
            f"upstream gradient shape {grad_out.shape} does not match conv output"
        )

    w_flip = np.ascontiguousarray(filt.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_x = _conv_same(grad_out, w_flip)

    b, _, h, wid = x.shape
    gf = grad_out.reshape(b, o, h * wid)
    if k == 1:
        grad_w = np.zeros((o, c), dtype=np.float32)
        xf = x.reshape(b, c, h * wid)
        for bi in range(b):
            grad_w += gf[bi] @ xf[bi].T
        grad_w = grad_w.reshape(o, c, 1, 1)
    else:
        p = (k - 1) // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        grad_w = np.zeros((o, c, k, k), dtype=np.float32)
        for u in range(k):
            for v in range(k):
                # reshape of the strided slice makes one contiguous copy
                xs = xp[:, :, u : u + h, v : v + wid].reshape(b, c, h * wid)
                acc = grad_w[:, :, u, v]
                for bi in range(b):
                    acc += gf[bi] @ xs[bi].T
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_w, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(_check_input(x), np.float32(0.0))


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Pass gradient where x > 0; the subgradient at exactly 0 is taken as 0.

    ``x`` may be either the layer input or its relu output: both have the same
    strict-positivity mask.
    """
    return np.where(x > 0, grad_out, np.float32(0.0))


def maxpool2x2(x: np.ndarray) -> np.ndarray:
    """2x2 max pooling with stride 2. H and W must be even."""
    y, _ = maxpool2x2_indices(x)
    return y


def maxpool2x2_indices(x: np.ndarray):
    """Max pool returning (pooled, argmax) where argmax in {0,1,2,3} encodes the
    winning position in row-major window order ((0,0), (0,1), (1,0), (1,1));
    ties go to the first maximum."""
    x = _check_input(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    win = (
        x.reshape(b, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h // 2, w // 2, 4)
    )
    idx = win.argmax(axis=-1)  # argmax returns the first maximum
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx.astype(np.uint8)


def maxpool2x2_backward(indices: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Route each upstream gradient entry to its recorded argmax position."""
    grad_out = _check_input(grad_out)
    if indices.shape != grad_out.shape:
        raise ValueError("argmax indices do not match the upstream gradient shape")
    b, c, hh, ww = grad_out.shape
    flat = np.zeros((b, c, hh, ww, 4), dtype=grad_out.dtype)
    np.put_along_axis(flat, indices[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    return np.ascontiguousarray(
        flat.reshape(b, c, hh, ww, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, 2 * hh, 2 * ww)
    )


@lru_cache(maxsize=64)
def _upsample_matrix(n: int) -> np.ndarray:
    """1D 2x bilinear interpolation matrix (2n x n), half-pixel centers, edges
    clamped.

    Output sample i sits at source coordinate i/2 - 1/4, which gives the rows
        out[0]      = in[0]
        out[2m]     = 0.25*in[m-1] + 0.75*in[m]    (1 <= m <= n-1)
        out[2m+1]   = 0.75*in[m]   + 0.25*in[m+1]  (0 <= m <= n-2)
        out[2n-1]   = in[n-1]
    Each input column sums to 2, so constants and the total mass scale exactly.
    """
    u = np.zeros((2 * n, n), dtype=np.float32)
    for i in range(2 * n):
        src = i / 2.0 - 0.25
        lo = int(np.floor(src))
        frac = src - lo
        i0 = min(max(lo, 0), n - 1)
        i1 = min(max(lo + 1, 0), n - 1)
        u[i, i0] += 1.0 - frac
        u[i, i1] += frac
    return u


def upsample2x_bilinear(x: np.ndarray) -> np.ndarray:
    """Double both spatial dims by separable bilinear interpolation.

    See _upsample_matrix for the exact weight table; the adjoint is the exact
    transpose of the same matrices.
    """
    x = _check_input(x)
    h, w = x.shape[2], x.shape[3]
    return np.matmul(np.matmul(_upsample_matrix(h), x), _upsample_matrix(w).T)


def upsample2x_bilinear_backward(grad_out: np.ndarray) -> np.ndarray:
    """Exact transpose of upsample2x_bilinear."""
    grad_out = _check_input(grad_out)
    h2, w2 = grad_out.shape[2], grad_out.shape[3]
    if h2 % 2 or w2 % 2:
        raise ValueError("upstream gradient of a 2x upsample must have even dims")
    return np.matmul(
        np.matmul(_upsample_matrix(h2 // 2).T, grad_out), _upsample_matrix(w2 // 2)
    )


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Concatenate along the channel axis, a's channels first."""
    a = _check_input(a)
    b = _check_input(b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(
            f"cannot concat tensors with shapes {a.shape} and {b.shape}: "
            "batch and spatial dims must agree"
        )
    return np.concatenate([a, b], axis=1)


def split_channels(grad_out: np.ndarray, first_channels: int):
    """Adjoint of concat_channels: slice the gradient back apart."""
    grad_out = _check_input(grad_out)
    if not 0 <= first_channels <= grad_out.shape[1]:
        raise ValueError("split point outside the channel range")
    return grad_out[:, :first_channels], grad_out[:, first_channels:]


def orthogonal_init(shape, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    """Orthogonal weight tensor for the given (out, in, k, k) shape.

    The tensor is flattened to (out, in*k*k), filled with unit normals and
    orthogonalized by QR with sign correction so that the smaller of
    rows/columns is orthonormal, then scaled by gain. float32 result.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or any(s <= 0 for s in shape):
        raise ValueError(f"expected 4 positive dims, got {shape}")
    rows = shape[0]
    cols = shape[1] * shape[2] * shape[3]
    a = rng.standard_normal((rows, cols))
    if rows < cols:
        a = a.T
    q, r = np.linalg.qr(a)
    q = q * np.where(np.diag(r) >= 0, 1.0, -1.0)
    if rows < cols:
        q = q.T
    return np.ascontiguousarray((gain * q).reshape(shape), dtype=np.float32)


def init_conv_filter(
    out_channels: int, in_channels: int, kernel_size: int, rng: np.random.Generator
) -> ConvFilter:
    """ConvFilter with orthogonal weights (gain 1) and zero bias."""
    w = orthogonal_init((out_channels, in_channels, kernel_size, kernel_size), rng)
    return ConvFilter(w, np.zeros(out_channels, dtype=np.float32))


@dataclass
class CoordCheck:
    """One sampled coordinate of a finite-difference gradient comparison."""

    tensor: str
    flat_index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckResult:
    max_rel_error: float
    floor: float
    checks: list
    skipped: int = 0  # probes discarded because they left the base linear region

    def __float__(self):
        return self.max_rel_error


def finite_diff_check(
    value_fn,
    grad_fn,
    tensors: dict,
    *,
    step: float,
    samples: int,
    rng: np.random.Generator,
    probe_fn=None,
) -> GradCheckResult:
    """Compare analytic gradients against central finite differences.

    value_fn() evaluates the scalar objective at the current tensor contents;
    grad_fn() returns {name: gradient array} for (at least) the given tensors.
    `samples` coordinates are drawn (without replacement) across the flattened
    tensors; each is probed in place with the realized float32 step
    (f(p+h) - f(p-h)) / (fl(p+h) - fl(p-h)).

    Errors are measured relative to the checked tensors' gradient scale:
    rel = |a - n| / max(scale, floor) with scale the largest analytic
    gradient magnitude among the tensors under test and
    floor = max(1e-6, |f0| * 2^-23 / step). The floor is the resolution limit
    of central differences on a float32-evaluated objective; coordinates far
    below the gradient scale sit in that noise and cannot be resolved more
    finely, while any error that matters relative to the true gradient
    magnitude shows up directly.

    Piecewise-linear objectives (relu networks, max pooling) are only
    differentiable inside one linear region, and a central difference that
    straddles a kink estimates no derivative at all. probe_fn(), when given,
    returns (value, region_key) per evaluation; coordinates whose probes land
    in a different region than the base point are discarded and replaced by
    fresh samples, and the discarded count is reported.
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    names = list(tensors)
    sizes = np.array([tensors[n].size for n in names], dtype=np.int64)
    total = int(sizes.sum())
    if total == 0:
        raise ValueError("no parameters to check")
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    grads = grad_fn()
    if probe_fn is not None:
        f0, base_key = probe_fn()
        f0 = float(f0)
    else:
        f0 = float(value_fn())
        base_key = None
    floor = max(1e-6, abs(f0) * 2.0**-23 / step)
    scale = max((float(np.abs(grads[n]).max()) for n in names), default=0.0)
    denom = max(scale, floor)

    def evaluate():
        if probe_fn is None:
            return float(value_fn()), None
        v, key = probe_fn()
        return float(v), key

    order = rng.permutation(total)
    checks = []
    skipped = 0
    for pick in order:
        if len(checks) >= samples:
            break
        pick = int(pick)
        t = int(np.searchsorted(offsets, pick, side="right") - 1)
        name = names[t]
        idx = pick - int(offsets[t])
        arr = tensors[name]
        midx = np.unravel_index(idx, arr.shape)  # C-order, matching reshape(-1)
        orig = arr[midx].copy()

        p_plus = np.float32(float(orig) + step)
        p_minus = np.float32(float(orig) - step)
        arr[midx] = p_plus
        f_plus, key_plus = evaluate()
        arr[midx] = p_minus
        f_minus, key_minus = evaluate()
        arr[midx] = orig

        if base_key is not None and (key_plus != base_key or key_minus != base_key):
            skipped += 1
            continue

        numeric = (f_plus - f_minus) / (float(p_plus) - float(p_minus))
        analytic = float(grads[name].reshape(-1)[idx])
        rel = abs(analytic - numeric) / denom
        checks.append(CoordCheck(name, int(idx), analytic, numeric, rel))

    if not checks:
        raise ValueError("no finite-difference probe stayed within one linear region")
    max_rel = max(c.rel_error for c in checks)
    return GradCheckResult(max_rel, floor, checks, skipped)
