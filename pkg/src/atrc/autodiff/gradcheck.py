from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class GradcheckReport:
    max_rel_error: float
    per_input: list[float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm((analytic - numeric).ravel())
    scale = np.linalg.norm(analytic.ravel()) + np.linalg.norm(numeric.ravel())
    if scale < 1e-12:
        return float(diff)
    return float(diff / scale)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], tolerance: float = 1e-4,
              h: float = 1e-5, wrt: Sequence[int] | None = None,
              directions: dict[int, int] | None = None, seed: int = 0) -> GradcheckReport:
    """Compare tape gradients of a scalar ``fn`` with central differences.

    Inputs are promoted to float64. The relative error per input is
    ||g_tape - g_fd|| / (||g_tape|| + ||g_fd||).

    ``directions[i] = k`` checks input ``i`` along ``k`` random unit directions
    instead of coordinate by coordinate: the k directional derivatives g.v are
    compared with central differences along v. This costs 2k evaluations
    instead of two per element.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)

    tensors = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out = fn(*tensors)
    if out.data.size != 1:
        raise ValueError("gradcheck: function must return a scalar")
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("gradcheck: non-finite function value")
    out.backward()
    analytic = [tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i]) for i in wrt]

    def value(vals):
        res = fn(*[Tensor(v) for v in vals]).data
        if not np.all(np.isfinite(res)):
            raise NonFiniteError("gradcheck: non-finite function value during perturbation")
        return float(res)

    directions = directions or {}
    rng = np.random.default_rng(seed)
    errors = []
    for slot, i in enumerate(wrt):
        if directions.get(i):
            v = rng.normal(size=(directions[i], arrays[i].size))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            orig = arrays[i].copy()
            numeric = np.zeros(len(v))
            for k, d in enumerate(v):
                arrays[i] = orig + h * d.reshape(orig.shape)
                fp = value(arrays)
                arrays[i] = orig - h * d.reshape(orig.shape)
                fm = value(arrays)
                numeric[k] = (fp - fm) / (2 * h)
            arrays[i] = orig
            if not np.all(np.isfinite(analytic[slot])):
                raise NonFiniteError("gradcheck: non-finite tape gradient")
            errors.append(_rel_error(v @ analytic[slot].reshape(-1), numeric))
            continue
        numeric = np.zeros_like(arrays[i])
        flat = arrays[i].reshape(-1)
        nflat = numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = value(arrays)
            flat[k] = orig - h
            fm = value(arrays)
            flat[k] = orig
            nflat[k] = (fp - fm) / (2 * h)
        if not np.all(np.isfinite(analytic[slot])):
            raise NonFiniteError("gradcheck: non-finite tape gradient")
        errors.append(_rel_error(analytic[slot], numeric))
    return GradcheckReport(max(errors) if errors else 0.0, errors, tolerance)
