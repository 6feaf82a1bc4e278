"""Forward primitives with reverse-mode rules.

Every function here computes eagerly on numpy arrays and, when a tape is
active, registers a node whose closure holds the intermediates the backward
pass needs. Convolution follows the cross-correlation convention (no kernel
flip). ``log_clamped`` is the single place log(0) is handled: ln(max(x, 1e-12)).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, record

__all__ = [
    "matmul",
    "conv2d",
    "batchnorm",
    "relu",
    "softmax",
    "log_clamped",
    "add",
    "mul",
    "scale",
    "neg",
    "sum_",
    "mean",
    "concat",
    "slice_batch",
    "reshape",
    "LOG_EPS",
    "BN_EPS",
    "ShapeError",
]

LOG_EPS = 1e-12
BN_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes do not satisfy the operation's contract."""


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out = Tensor._wrap(a.data @ b.data)

    def bw(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    record(out, bw)
    return out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
    """Batched 2D cross-correlation, NCHW activations, FCkk kernels.

    ``padding=None`` means "same" (k//2). The im2col matrix is retained for
    the reverse pass.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4D operands, got {x.shape}, {w.shape}")
    n, c, h, wdt = x.shape
    f, cw, kh, kw = w.shape
    if kh != kw or kh % 2 != 1:
        raise ShapeError(f"kernel must be square with odd side, got {kh}x{kw}")
    if cw != c:
        raise ShapeError(f"channel mismatch: input {c}, kernel {cw}")
    k = kh
    p = k // 2 if padding is None else int(padding)
    ho = (h + 2 * p - k) // stride + 1
    wo = (wdt + 2 * p - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"output would be empty: {ho}x{wo}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # row-per-output-pixel layout so both passes run as single large GEMMs
    cols = np.empty((n, ho, wo, c, k, k), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    cols_mat = cols.reshape(n * ho * wo, c * k * k)
    w_mat = w.data.reshape(f, c * k * k)
    out_mat = cols_mat @ w_mat.T
    out = Tensor._wrap(np.ascontiguousarray(out_mat.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)))

    def bw(g):
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        dw = (g_mat.T @ cols_mat).reshape(w.shape)
        dcols = (g_mat @ w_mat).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, wdt + 2 * p), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p : p + h, p : p + wdt] if p else dxp
        return [(x, np.ascontiguousarray(dx)), (w, dw)]

    record(out, bw)
    return out


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str = "batch",
    momentum: float = 0.1,
    eps: float = BN_EPS,
) -> tuple[Tensor, Tensor, Tensor]:
    """Per-channel normalization over 2D (N,C) or 4D (N,C,H,W) input.

    batch mode normalizes with current-batch statistics (biased variance) and
    returns running statistics advanced by ``momentum`` (unbiased variance,
    the convention of the reference architectures); running mode uses the
    stored statistics unchanged. Returns (y, new_running_mean, new_running_var);
    tensors are immutable so the caller decides whether to keep the stats.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batchnorm expects 2D or 4D input, got {x.shape}")
    cdim = x.shape[1]
    for t, nm in ((gamma, "gamma"), (beta, "beta"), (running_mean, "mean"), (running_var, "var")):
        if t.shape != (cdim,):
            raise ShapeError(f"batchnorm {nm} shape {t.shape} != ({cdim},)")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    exp = (1, cdim) if x.ndim == 2 else (1, cdim, 1, 1)

    if mode == "batch":
        if x.shape[0] < 2:
            raise ShapeError("batch-stats mode requires batch size >= 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.size // cdim
        new_mean = (1.0 - momentum) * running_mean.data + momentum * mu
        new_var = (1.0 - momentum) * running_var.data + momentum * (var * (m / (m - 1.0)))
    elif mode == "running":
        mu = running_mean.data
        var = running_var.data
        new_mean = running_mean.data
        new_var = running_var.data
    else:
        raise ValueError(f"unknown batchnorm mode: {mode!r}")

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(exp)) * inv.reshape(exp)
    y = gamma.data.reshape(exp) * xhat + beta.data.reshape(exp)
    out = Tensor._wrap(np.asarray(y, dtype=x.data.dtype))
    batch_mode = mode == "batch"

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(exp)
        if batch_mode:
            m_dxhat = dxhat.mean(axis=axes).reshape(exp)
            m_proj = (dxhat * xhat).mean(axis=axes).reshape(exp)
            dx = inv.reshape(exp) * (dxhat - m_dxhat - xhat * m_proj)
        else:
            dx = dxhat * inv.reshape(exp)
        return [
            (x, np.asarray(dx, dtype=g.dtype)),
            (gamma, np.asarray(dgamma, dtype=g.dtype)),
            (beta, np.asarray(dbeta, dtype=g.dtype)),
        ]

    record(out, bw)
    return (
        out,
        Tensor._wrap(np.asarray(new_mean, dtype=running_mean.data.dtype)),
        Tensor._wrap(np.asarray(new_var, dtype=running_var.data.dtype)),
    )


def relu(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.maximum(x.data, 0))

    def bw(g):
        return [(x, g * (x.data > 0))]

    record(out, bw)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._wrap(y)

    def bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return [(x, y * (g - inner))]

    record(out, bw)
    return out


def log_clamped(x: Tensor) -> Tensor:
    clamped = np.maximum(x.data, LOG_EPS)
    out = Tensor._wrap(np.log(clamped))

    def bw(g):
        return [(x, g * (x.data > LOG_EPS) / clamped)]

    record(out, bw)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data + b.data)

    def bw(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    record(out, bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data * b.data)

    def bw(g):
        return [(a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape))]

    record(out, bw)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor._wrap(x.data * c)

    def bw(g):
        return [(x, g * c)]

    record(out, bw)
    return out


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(x: Tensor, axis=None) -> Tensor:
    out = Tensor._wrap(np.asarray(x.data.sum(axis=axis), dtype=x.data.dtype))

    def bw(g):
        return [(x, np.ascontiguousarray(_expand_reduced(g, x.shape, axis)))]

    record(out, bw)
    return out


def mean(x: Tensor, axis=None) -> Tensor:
    out = Tensor._wrap(np.asarray(x.data.mean(axis=axis), dtype=x.data.dtype))
    count = x.size // max(out.size, 1)

    def bw(g):
        return [(x, np.ascontiguousarray(_expand_reduced(g / count, x.shape, axis)))]

    record(out, bw)
    return out


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]

    def bw(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return [(p, np.ascontiguousarray(piece)) for p, piece in zip(parts, pieces)]

    record(out, bw)
    return out


def slice_batch(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along axis 0."""
    out = Tensor._wrap(x.data[start:stop].copy())

    def bw(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        dx[start:stop] = g
        return [(x, dx)]

    record(out, bw)
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor._wrap(x.data.reshape(shape).copy())

    def bw(g):
        return [(x, np.ascontiguousarray(g.reshape(x.shape)))]

    record(out, bw)
    return out
