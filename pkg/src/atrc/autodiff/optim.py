"""SGD with momentum, Adam, and the poly learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class SGDState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0005
    buffers: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class AdamState:
    lr: float = 0.0005
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def sgd_step(params: list[Tensor], state: SGDState, lr: float | None = None) -> None:
    """v <- mu*v + (g + wd*p);  p <- p - lr*v.  Parameters without a gradient are skipped."""
    lr = state.lr if lr is None else lr
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        dt = p.data.dtype
        g = p.grad + np.asarray(state.weight_decay, dt) * p.data
        buf = state.buffers.get(i)
        if buf is None:
            buf = np.zeros_like(p.data)
        buf = np.asarray(state.momentum, dt) * buf + g
        state.buffers[i] = buf
        p.data = p.data - np.asarray(lr, dt) * buf


def adam_step(params: list[Tensor], state: AdamState, mask: list[bool] | None = None) -> None:
    """Bias-corrected Adam without weight decay.

    ``mask[i] = False`` leaves parameter i and its moments untouched.
    """
    state.step += 1
    b1, b2 = state.betas
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for i, p in enumerate(params):
        if p.grad is None or (mask is not None and not mask[i]):
            continue
        dt = p.data.dtype
        g = p.grad
        m = state.m.get(i, np.zeros_like(p.data))
        v = state.v.get(i, np.zeros_like(p.data))
        m = np.asarray(b1, dt) * m + np.asarray(1 - b1, dt) * g
        v = np.asarray(b2, dt) * v + np.asarray(1 - b2, dt) * g * g
        state.m[i], state.v[i] = m, v
        mhat = m / np.asarray(c1, dt)
        vhat = v / np.asarray(c2, dt)
        p.data = p.data - np.asarray(state.lr, dt) * mhat / (np.sqrt(vhat) + np.asarray(state.eps, dt))


def adam_step_masked_rows(param: Tensor, state: AdamState, active_rows: np.ndarray) -> None:
    """Adam on a 2-D parameter where only ``active_rows`` are updated.

    Inactive rows keep both their values and their moment estimates.
    """
    state.step += 1
    b1, b2 = state.betas
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    if param.grad is None:
        return
    dt = param.data.dtype
    m = state.m.get(0, np.zeros_like(param.data))
    v = state.v.get(0, np.zeros_like(param.data))
    g = param.grad
    rows = np.asarray(active_rows, dtype=bool)
    m_new = np.asarray(b1, dt) * m + np.asarray(1 - b1, dt) * g
    v_new = np.asarray(b2, dt) * v + np.asarray(1 - b2, dt) * g * g
    m = np.where(rows[:, None], m_new, m)
    v = np.where(rows[:, None], v_new, v)
    state.m[0], state.v[0] = m, v
    step = np.asarray(state.lr, dt) * (m / np.asarray(c1, dt)) / (np.sqrt(v / np.asarray(c2, dt)) + np.asarray(state.eps, dt))
    param.data = np.where(rows[:, None], param.data - step, param.data).astype(dt)


def poly_lr(iteration: int, max_iter: int, lr0: float, power: float = 0.9) -> float:
    if max_iter <= 0:
        raise ValueError("poly_lr: max_iter must be positive")
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"poly_lr: iteration {iteration} outside [0, {max_iter}]")
    return lr0 * (1.0 - iteration / max_iter) ** power
