"""Differentiable layer primitives on NCHW float64 tensors.

Convolution is cross-correlation computed through an im2col buffer and one
BLAS matmul.  Bilinear resampling is separable and expressed through two
small interpolation matrices, which makes its backward pass a pair of
transposed products.
"""

from __future__ import annotations

import contextlib
from typing import Iterator, Optional

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, make_result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# ---------------------------------------------------------------------------
# gradient-checker hooks.  ``record_kinks`` logs relu masks and maxpool argmax
# indices in execution order; ``replay_kinks`` forces a logged pattern back so
# a perturbed forward stays on the same smooth piece; ``probe_parameters``
# gives selected parameters a different value per batch row.

_kink_log: Optional[list] = None
_kink_replay: Optional[Iterator[np.ndarray]] = None
_probes: dict = {}


@contextlib.contextmanager
def record_kinks() -> Iterator[list]:
    global _kink_log
    prev = _kink_log
    _kink_log = []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


@contextlib.contextmanager
def replay_kinks(patterns: list) -> Iterator[None]:
    global _kink_replay
    prev = _kink_replay
    _kink_replay = iter(patterns)
    try:
        yield
    finally:
        _kink_replay = prev


@contextlib.contextmanager
def probe_parameters(values: dict) -> Iterator[None]:
    """Map parameter tensors to per-row values shaped ``(batch, *param.shape)``."""
    global _probes
    prev = _probes
    _probes = {id(p): v for p, v in values.items()}
    try:
        yield
    finally:
        _probes = prev


def _log_kink(pattern: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(pattern.copy())


def _replayed(shape: tuple) -> Optional[np.ndarray]:
    if _kink_replay is None:
        return None
    pattern = next(_kink_replay)
    if pattern.shape != shape:
        reps = shape[0] // pattern.shape[0]
        pattern = np.concatenate([pattern] * reps, axis=0)
    return pattern


def _probed(t: Optional[Tensor], rows: int) -> Optional[np.ndarray]:
    if t is None or id(t) not in _probes:
        return None
    v = _probes[id(t)]
    if v.shape[0] != rows:
        raise ShapeError(f"probe values have {v.shape[0]} rows, batch has {rows}")
    return v


def _check_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected an N x C x H x W tensor, got shape {x.shape}")


def _out_size(size: int, k: int, stride: int, pad: int, op: str, axis: str) -> int:
    if stride < 1:
        raise ShapeError(f"{op}: stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeError(f"{op}: padding must be >= 0, got {pad}")
    if size + 2 * pad < k:
        raise ShapeError(f"{op}: window {k} exceeds padded {axis} {size} + 2*{pad}")
    return (size + 2 * pad - k) // stride + 1


def _pad(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    n, c, h, w = x.shape
    out = np.full((n, c, h + 2 * pad, w + 2 * pad), value, dtype=x.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            win = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, i, j] = win.transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo)


def _col2im(dcols: np.ndarray, shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = shape
    dcols = dcols.reshape(c, k, k, n, ho, wo)
    dxp = np.zeros(shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    _check_4d(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be C_out x C_in x k x k, got {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, k, _ = weight.shape
    if c_in != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {c_out} output channels")
    ho = _out_size(h, k, stride, pad, "conv2d", "height")
    wo = _out_size(w, k, stride, pad, "conv2d", "width")
    if _probes:
        pw, pb = _probed(weight, n), _probed(bias, n)
        if pw is not None or pb is not None:
            rows = []
            for r in range(n):
                wr = Tensor(pw[r]) if pw is not None else weight
                br = Tensor(pb[r]) if pb is not None else bias
                rows.append(conv2d(Tensor(x.data[r:r + 1]), wr, br, stride, pad).data)
            return Tensor(np.concatenate(rows))

    xp = _pad(x.data, pad)
    if k == 1 and stride == 1:
        cols = xp.transpose(1, 0, 2, 3).reshape(c, n * ho * wo)
    else:
        cols = _im2col(xp, k, stride, ho, wo)
    w2 = weight.data.reshape(c_out, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3))

    def back(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = w2.T @ g2
            if k == 1 and stride == 1:
                dxp = dcols.reshape(c, n, ho, wo).transpose(1, 0, 2, 3)
            else:
                dxp = _col2im(dcols, xp.shape, k, stride, ho, wo)
            gx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
            gx = np.ascontiguousarray(gx)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, back)


def maxpool2d(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    """Window max; padding never wins, ties go to the first element in scan order."""
    _check_4d(x, "maxpool2d")
    if pad >= k:
        raise ShapeError(f"maxpool2d: padding {pad} must be smaller than window {k}")
    n, c, h, w = x.shape
    ho = _out_size(h, k, stride, pad, "maxpool2d", "height")
    wo = _out_size(w, k, stride, pad, "maxpool2d", "width")
    xp = _pad(x.data, pad, -np.inf)

    out = np.full((n, c, ho, wo), -np.inf)
    arg = _replayed((n, c, ho, wo))
    if arg is None:
        arg = np.zeros((n, c, ho, wo), dtype=np.int16)
        for i in range(k):
            for j in range(k):
                win = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                better = win > out
                out = np.where(better, win, out)
                arg[better] = i * k + j
    else:
        for i in range(k):
            for j in range(k):
                win = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                out = np.where(arg == i * k + j, win, out)
    _log_kink(arg)

    def back(g):
        dxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(arg == i * k + j, g, 0.0)
        return (np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w]),)

    return make_result(out, (x,), back)


def avgpool2d(x: Tensor, k: int) -> Tensor:
    """Global average pooling: ``k`` must equal the (square) spatial size."""
    _check_4d(x, "avgpool2d")
    n, c, h, w = x.shape
    if h != w:
        raise ShapeError(f"avgpool2d: spatial size {h}x{w} is not square")
    if k != h:
        raise ShapeError(f"avgpool2d: window {k} must equal spatial size {h}")
    out = x.data.mean(axis=(2, 3), keepdims=True)
    area = float(h * w)

    def back(g):
        return (np.broadcast_to(g / area, x.shape).copy(),)

    return make_result(out, (x,), back)


def interp_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Rows of bilinear weights with half-pixel centres and edge clamping.

    Output index ``i`` samples source coordinate ``(i + 0.5) * in/out - 0.5``,
    clamped to ``[0, in - 1]``.
    """
    if in_size < 1 or out_size < 1:
        raise ShapeError(f"interpolation sizes must be positive, got {in_size} -> {out_size}")
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    m = np.zeros((out_size, in_size))
    rows = np.arange(out_size)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _check_4d(x, "bilinear_upsample")
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_upsample: target size {out_h}x{out_w} must be positive")
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample: target {out_h}x{out_w} is smaller than input {h}x{w}")
    mh = interp_matrix(h, out_h)
    mw = interp_matrix(w, out_w)
    out = mh @ x.data @ mw.T

    def back(g):
        return (mh.T @ g @ mw,)

    return make_result(out, (x,), back)


def relu(x: Tensor) -> Tensor:
    mask = _replayed(x.shape)
    if mask is None:
        mask = x.data > 0
    _log_kink(mask)
    out = np.where(mask, x.data, 0.0)

    def back(g):
        return (np.where(mask, g, 0.0),)

    return make_result(out, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    # exp of a non-positive argument only: no overflow, full precision near 0
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def back(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (x,), back)


def pointwise(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown pointwise kind {kind!r}")


class BatchNormState:
    """Running statistics of one batch-norm layer (not trained by gradients)."""

    def __init__(self, channels: int):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    _check_4d(x, "batchnorm2d")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    g4 = gamma.data.reshape(1, c, 1, 1)

    if _probes and mode == "eval":
        pg, pb = _probed(gamma, n), _probed(beta, n)
        if pg is not None or pb is not None:
            gam = (pg if pg is not None else np.broadcast_to(gamma.data, (n, c))).reshape(n, c, 1, 1)
            bet = (pb if pb is not None else np.broadcast_to(beta.data, (n, c))).reshape(n, c, 1, 1)
            invstd = 1.0 / np.sqrt(state.running_var + BN_EPS)
            xhat = (x.data - state.running_mean.reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)
            return Tensor(xhat * gam + bet)

    if mode == "eval":
        invstd = 1.0 / np.sqrt(state.running_var + BN_EPS)
        scale = (gamma.data * invstd).reshape(1, c, 1, 1)
        xhat = (x.data - state.running_mean.reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)
        out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

        def back_eval(g):
            gx = g * scale if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return make_result(out, (x, gamma, beta), back_eval)
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")

    m = n * h * w
    if m == 1:
        raise ShapeError("batchnorm2d: training mode needs more than one value per channel (batch 1, spatial 1x1)")
    mean = np.einsum("nchw->c", x.data) / m
    centred = x.data - mean.reshape(1, c, 1, 1)
    var = np.einsum("nchw,nchw->c", centred, centred) / m
    invstd = 1.0 / np.sqrt(var + BN_EPS)
    xhat = centred
    xhat *= invstd.reshape(1, c, 1, 1)
    out = xhat * g4
    out += beta.data.reshape(1, c, 1, 1)

    state.running_mean = (1 - BN_MOMENTUM) * state.running_mean + BN_MOMENTUM * mean
    state.running_var = (1 - BN_MOMENTUM) * state.running_var + BN_MOMENTUM * var * (m / (m - 1))

    def back(g):
        g_beta = np.einsum("nchw->c", g)
        g_gamma = np.einsum("nchw,nchw->c", g, xhat)
        gx = None
        if x.requires_grad:
            # dx = gamma*invstd * (g - mean(g) - xhat * mean(g*xhat)), per channel
            scale = gamma.data * invstd
            gx = g * scale.reshape(1, c, 1, 1)
            gx -= xhat * (scale * g_gamma / m).reshape(1, c, 1, 1)
            gx -= (scale * g_beta / m).reshape(1, c, 1, 1)
        return gx, g_gamma, g_beta

    return make_result(out, (x, gamma, beta), back)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear: expected N x D input and K x D weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[1]} does not match weight width {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    if _probes:
        pw, pb = _probed(weight, x.shape[0]), _probed(bias, x.shape[0])
        if pw is not None or pb is not None:
            out = np.einsum("nd,nkd->nk", x.data, pw) if pw is not None else x.data @ weight.data.T
            if bias is not None:
                out = out + (pb if pb is not None else bias.data)
            return Tensor(out)
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, back)


def dropout(x: Tensor, rate: float, mode: str, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; eval mode and rate 0 return the input unchanged."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = x.data * keep

    def back(g):
        return (g * keep,)

    return make_result(out, (x,), back)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be N x K, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k}), got {labels.tolist()}")
    logp = log_softmax_rows(logits.data)
    rows = np.arange(n)
    out = np.asarray(-logp[rows, labels].mean())

    def back(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return make_result(out, (logits,), back)


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)
