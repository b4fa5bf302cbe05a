"""Fused neural-network primitives with hand-written backward rules."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _sigmoid, log_softmax, make_op, softmax  # noqa: F401

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with 'same' zero padding; kernel 1 or 3."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="expected NCHW input and OIkk weight")
    out_c, in_c, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError("conv2d", x.shape, weight.shape, detail="kernel must be 1x1 or 3x3")
    if x.shape[1] != in_c:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="channel mismatch")
    if bias is not None and bias.shape != (out_c,):
        raise ShapeError("conv2d", weight.shape, bias.shape, detail="bias length")
    n, _, h, w = x.shape
    xd, wd = x.data, weight.data

    if kh == 1:
        w2 = wd[:, :, 0, 0]
        out = np.einsum("oc,nchw->nohw", w2, xd, optimize=True)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))
        out = np.einsum("nchwij,ocij->nohw", win, wd, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gx = gw = gb = None
        if kh == 1:
            if x.requires_grad:
                gx = np.einsum("oc,nohw->nchw", w2, g, optimize=True)
            if weight.requires_grad:
                gw = np.einsum("nohw,nchw->oc", g, xd, optimize=True)[:, :, None, None]
        else:
            if x.requires_grad:
                gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
                gwin = sliding_window_view(gp, (3, 3), axis=(2, 3))
                gx = np.einsum("nohwij,ocij->nchw", gwin, wd[:, :, ::-1, ::-1], optimize=True)
            if weight.requires_grad:
                gw = np.einsum("nchwij,nohw->ocij", win, g, optimize=True)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(np.ascontiguousarray(out), parents, backward, "conv2d")


def batchnorm2d(x: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                gamma: Tensor | None = None, beta: Tensor | None = None,
                training: bool = True, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalisation of an NCHW tensor.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, as in common frameworks).
    """
    if x.ndim != 4:
        raise ShapeError("batchnorm2d", x.shape, detail="expected NCHW input")
    c = x.shape[1]
    if running_mean.shape != (c,):
        raise ShapeError("batchnorm2d", x.shape, running_mean.shape, detail="channel count")
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count == 0:
        raise ValueError("batchnorm2d: zero-size batch")
    xd = x.data
    dt = xd.dtype
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        unbiased = var * (count / max(count - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mu = running_mean.astype(dt)
        var = running_var.astype(dt)
    inv = (1.0 / np.sqrt(var + np.asarray(eps, dt))).astype(dt)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat
    if gamma is not None:
        out = out * gamma.data[None, :, None, None]
    if beta is not None:
        out = out + beta.data[None, :, None, None]

    def backward(g):
        gg = gb = None
        if gamma is not None and gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta is not None and beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data[None, :, None, None] if gamma is not None else g
        if training:
            m1 = gxhat.mean(axis=(0, 2, 3), keepdims=True)
            m2 = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = inv[None, :, None, None] * (gxhat - m1 - xhat * m2)
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, gg, gb

    parents = [x]
    if gamma is not None:
        parents.append(gamma)
    if beta is not None:
        parents.append(beta)

    def backward_packed(g):
        gx, gg, gb = backward(g)
        res = [gx]
        if gamma is not None:
            res.append(gg)
        if beta is not None:
            res.append(gb)
        return tuple(res)

    return make_op(out, parents, backward_packed, "batchnorm2d")


# --- losses ---------------------------------------------------------------------

class EmptyLossError(ValueError):
    pass


def cross_entropy(logits: Tensor, target: np.ndarray, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood over non-ignored positions.

    ``logits`` is N x C x ... and ``target`` holds class indices of shape N x ...
    """
    if logits.ndim < 2 or target.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeError("cross_entropy", logits.shape, target.shape)
    c = logits.shape[1]
    target = np.asarray(target)
    valid = np.ones(target.shape, dtype=bool) if ignore_index is None else target != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptyLossError("cross_entropy: every position is ignored")
    safe = np.where(valid, target, 0).astype(np.int64)
    if safe.min() < 0 or safe.max() >= c:
        raise ValueError(f"cross_entropy: targets outside [0, {c})")
    lsm = log_softmax(logits, axis=1).data
    picked = np.take_along_axis(lsm, safe[:, None], axis=1)[:, 0]
    dt = logits.dtype
    loss = -(picked * valid).sum() / n_valid

    def backward(g):
        p = np.exp(lsm)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad = (p - onehot) * valid[:, None].astype(dt)
        return (grad * (g / n_valid),)

    return make_op(np.asarray(loss, dtype=dt), (logits,), backward, "cross_entropy")


def soft_cross_entropy(logits: Tensor, target_probs: np.ndarray) -> Tensor:
    """Cross-entropy against per-position target distributions over axis 1."""
    if logits.shape != target_probs.shape:
        raise ShapeError("soft_cross_entropy", logits.shape, target_probs.shape)
    lsm = log_softmax(logits, axis=1).data
    count = logits.size // logits.shape[1]
    t = target_probs.astype(logits.dtype)
    loss = -(t * lsm).sum() / count

    def backward(g):
        p = np.exp(lsm)
        return ((p * t.sum(axis=1, keepdims=True) - t) * (g / count),)

    return make_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "soft_cross_entropy")


def l1_loss(pred: Tensor, target: np.ndarray, normalize_unit: bool = False,
            mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute error; optionally rescale ``pred`` to unit norm over axis 1 first."""
    if pred.shape != target.shape:
        raise ShapeError("l1_loss", pred.shape, target.shape)
    p = pred.data
    if normalize_unit:
        if pred.shape[1] != 3:
            raise ShapeError("l1_loss", pred.shape, detail="unit normalisation needs 3 channels")
        raw = np.sqrt((p * p).sum(axis=1, keepdims=True))
        norm = np.maximum(raw, np.asarray(1e-6, p.dtype))
        clamped = raw < 1e-6
        u = p / norm
    else:
        u = p
    diff = u - target.astype(p.dtype)
    w = np.ones_like(diff) if mask is None else np.broadcast_to(mask, diff.shape).astype(p.dtype)
    denom = max(float(w.sum()), 1.0)
    loss = (np.abs(diff) * w).sum() / denom

    def backward(g):
        gu = np.sign(diff) * w * (g / denom)
        if not normalize_unit:
            return (gu,)
        radial = (gu * u).sum(axis=1, keepdims=True)
        gp = (gu - np.where(clamped, 0, u * radial)) / norm
        return (gp,)

    return make_op(np.asarray(loss, dtype=p.dtype), (pred,), backward, "l1_loss")


def weighted_bce(logits: Tensor, target: np.ndarray, w_pos: float, w_neg: float) -> Tensor:
    """Mean of -[w_pos*y*log(s) + w_neg*(1-y)*log(1-s)] with s = sigmoid(logits)."""
    if w_pos < 0 or w_neg < 0:
        raise ValueError("weighted_bce: weights must be non-negative")
    if logits.shape != target.shape:
        raise ShapeError("weighted_bce", logits.shape, target.shape)
    x = logits.data
    y = target.astype(x.dtype)
    # log(sigmoid(x)) = -softplus(-x); log(1 - sigmoid(x)) = -softplus(x)
    sp_neg = np.maximum(-x, 0) + np.log1p(np.exp(-np.abs(x)))
    sp_pos = sp_neg + x
    per = w_pos * y * sp_neg + w_neg * (1 - y) * sp_pos
    loss = per.mean()
    s = _sigmoid(x)

    def backward(g):
        grad = w_pos * y * (s - 1) + w_neg * (1 - y) * s
        return (grad * (g / x.size),)

    return make_op(np.asarray(loss, dtype=x.dtype), (logits,), backward, "weighted_bce")


# --- spatial gather -------------------------------------------------------------

def window_gather(x: Tensor, b: int) -> Tensor:
    """Neighbourhoods of every pixel: N x C x H x W -> N x H x W x b*b x C.

    Out-of-image positions are zero; pair with :func:`window_valid_mask`.
    """
    if b % 2 != 1 or b < 1:
        raise ValueError(f"window_gather: window extent must be odd and positive, got {b}")
    if x.ndim != 4:
        raise ShapeError("window_gather", x.shape, detail="expected NCHW input")
    n, c, h, w = x.shape
    r = b // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (r, r), (r, r)))
    win = sliding_window_view(xp, (b, b), axis=(2, 3))  # N C H W b b
    out = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 5, 1)).reshape(n, h, w, b * b, c)

    def backward(g):
        g6 = g.reshape(n, h, w, b, b, c)
        gp = np.zeros((n, c, h + 2 * r, w + 2 * r), dtype=g.dtype)
        for i in range(b):
            for j in range(b):
                gp[:, :, i:i + h, j:j + w] += g6[:, :, :, i, j, :].transpose(0, 3, 1, 2)
        return (gp[:, :, r:r + h, r:r + w],)

    return make_op(out, (x,), backward, "window_gather")


def window_valid_mask(h: int, w: int, b: int) -> np.ndarray:
    """Boolean H x W x b*b array: True where the neighbour lies inside the image."""
    r = b // 2
    ii = np.arange(h)[:, None] + np.arange(-r, r + 1)[None, :]  # H x b
    jj = np.arange(w)[:, None] + np.arange(-r, r + 1)[None, :]
    vi = (ii >= 0) & (ii < h)
    vj = (jj >= 0) & (jj < w)
    return (vi[:, None, :, None] & vj[None, :, None, :]).reshape(h, w, b * b)
