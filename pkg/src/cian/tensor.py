"""Dense-tensor substrate: conv/pool/relu with hand-derived backward passes,
a finite-difference gradient checker, and the CIAN1 binary tensor container.

Arrays are plain numpy ndarrays in row-major H x W x C layout. Training runs
in float32, gradient checking in float64.
"""

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GradCheckReport",
    "assert_finite",
    "conv2d",
    "conv2d_backward",
    "maxpool2d",
    "maxpool2d_backward",
    "relu",
    "relu_backward",
    "grad_check",
    "nearest_resize",
    "save_tensor",
    "load_tensor",
]


def assert_finite(x, name="tensor"):
    """Raise ValueError if x contains NaN or Inf."""
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite values in {name}")
    return x


def conv2d(x, kernel, stride=1, pad=0):
    """2-D convolution (cross-correlation) of x (H,W,Cin) with kernel
    (k,k,Cin,Cout). Output spatial size floor((H+2*pad-k)/stride)+1.
    """
    h, w, cin = x.shape
    k, k2, kcin, cout = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd side, got {kernel.shape}")
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    if kcin != cin:
        raise ValueError(
            f"channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(
            f"kernel {kernel.shape} does not fit input {x.shape} with pad {pad}")
    if k == 1 and stride == 1 and pad == 0:
        # 1x1 fast path: a single matmul over flattened pixels
        out = x.reshape(h * w, cin) @ kernel.reshape(cin, cout)
        return out.reshape(h, w, cout)
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
    out = np.zeros((ho, wo, cout), dtype=x.dtype)
    flat = out.reshape(ho * wo, cout)
    for ki in range(k):
        for kj in range(k):
            patch = xp[ki:ki + stride * ho:stride, kj:kj + stride * wo:stride, :]
            flat += patch.reshape(ho * wo, cin) @ kernel[ki, kj]
    return out


def conv2d_backward(grad_out, x, kernel, stride=1, pad=0):
    """Gradients of conv2d w.r.t. input and kernel."""
    h, w, cin = x.shape
    k = kernel.shape[0]
    cout = kernel.shape[3]
    ho, wo = grad_out.shape[:2]
    g = grad_out.reshape(ho * wo, cout)
    if k == 1 and stride == 1 and pad == 0:
        grad_x = (g @ kernel.reshape(cin, cout).T).reshape(h, w, cin)
        grad_k = (x.reshape(h * w, cin).T @ g).reshape(kernel.shape)
        return grad_x, grad_k
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
    grad_xp = np.zeros_like(xp)
    grad_k = np.zeros_like(kernel)
    for ki in range(k):
        for kj in range(k):
            patch = xp[ki:ki + stride * ho:stride, kj:kj + stride * wo:stride, :]
            grad_k[ki, kj] = patch.reshape(ho * wo, cin).T @ g
            gslice = grad_xp[ki:ki + stride * ho:stride, kj:kj + stride * wo:stride, :]
            gslice += (g @ kernel[ki, kj].T).reshape(ho, wo, cin)
    grad_x = grad_xp[pad:pad + h, pad:pad + w, :] if pad else grad_xp
    return grad_x, grad_k


def maxpool2d(x, window=2, stride=2, return_indices=False):
    """Max-pool x (H,W,C) with a square window. Channels are independent.

    With return_indices=True also returns the within-window argmax (ties
    broken by lowest flat input index) for gradient routing.
    """
    h, w, c = x.shape
    if window > h or window > w:
        raise ValueError(f"window {window} exceeds input {x.shape}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    # slices ordered row-major within the window == ascending flat index
    stack = np.empty((ho, wo, c, window * window), dtype=x.dtype)
    for di in range(window):
        for dj in range(window):
            stack[:, :, :, di * window + dj] = \
                x[di:di + stride * ho:stride, dj:dj + stride * wo:stride, :]
    idx = np.argmax(stack, axis=3)
    out = np.take_along_axis(stack, idx[..., None], axis=3)[..., 0]
    if return_indices:
        return out, idx
    return out


def maxpool2d_backward(grad_out, idx, in_shape, window=2, stride=2):
    """Route pooled gradients back to the argmax input elements."""
    grad_x = np.zeros(in_shape, dtype=grad_out.dtype)
    ho, wo, c = grad_out.shape
    ii, jj, cc = np.meshgrid(np.arange(ho), np.arange(wo), np.arange(c),
                             indexing="ij")
    di = idx // window
    dj = idx % window
    np.add.at(grad_x, (ii * stride + di, jj * stride + dj, cc), grad_out)
    return grad_x


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def nearest_resize(x, out_h, out_w):
    """Nearest-neighbour resize of x (H,W) or (H,W,C) to (out_h,out_w)."""
    h, w = x.shape[:2]
    ri = (np.arange(out_h) * h // out_h).clip(0, h - 1)
    ci = (np.arange(out_w) * w // out_w).clip(0, w - 1)
    return x[np.ix_(ri, ci)]


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    analytic: float
    numeric: float


def grad_check(f, params, analytic_grad, eps=1e-5, indices=None):
    """Compare an analytic gradient against central differences of f.

    f takes the parameter array and returns a scalar. Checks every flat
    coordinate, or only `indices` when given (large tensors). Relative
    error is |a-n| / max(|a|,|n|,1e-8).
    """
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(analytic_grad, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: params {p.shape} vs grad {g.shape}")
    flat = p.ravel().copy()
    gflat = g.ravel()
    if indices is None:
        indices = range(flat.size)
    worst = GradCheckReport(0.0, -1, 0.0, 0.0)
    for i in indices:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(flat.reshape(p.shape)))
        flat[i] = orig - eps
        fm = float(f(flat.reshape(p.shape)))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite loss at coordinate {i}")
        numeric = (fp - fm) / (2 * eps)
        analytic = gflat[i]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        if rel > worst.max_rel_error:
            worst = GradCheckReport(rel, int(i), float(analytic), float(numeric))
    return worst


# CIAN1 container: magic "CIAN1", u8 dtype tag (0=f32, 1=f64), u8 ndim,
# ndim little-endian u32 dims, then data little-endian.

_MAGIC = b"CIAN1"
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_tensor(path, arr):
    """Write arr (float32 or float64) in the CIAN1 container format."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _TAGS:
        raise ValueError(f"unsupported dtype {arr.dtype}; expose as f32 or f64")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BB", _TAGS[arr.dtype], arr.ndim))
        for d in arr.shape:
            fh.write(struct.pack("<I", d))
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_tensor(path):
    """Read a CIAN1 container back into an ndarray."""
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        tag, ndim = struct.unpack("<BB", fh.read(2))
        if tag not in _DTYPES:
            raise ValueError(f"{path}: unknown dtype tag {tag}")
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
        dt = _DTYPES[tag]
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(fh.read(n * dt.itemsize), dtype=dt)
        if data.size != n:
            raise ValueError(f"{path}: truncated payload")
        return data.reshape(shape).astype(dt.newbyteorder("="))
