"""Weighted multi-task objective with auxiliary region losses and the search regulariser."""

from __future__ import annotations

import numpy as np

from ..autodiff import functional as F
from ..autodiff.tensor import Tensor, mul
from ..label_space import region_indices
from .tasks import BOUNDARY_NEG_WEIGHT, BOUNDARY_POS_WEIGHT, TaskSpec


def task_loss(task: TaskSpec, pred: Tensor, label: np.ndarray) -> Tensor:
    if task.kind == "classification":
        return F.cross_entropy(pred, label)
    if task.kind == "depth":
        return F.l1_loss(pred, label)
    if task.kind == "normals":
        return F.l1_loss(pred, label, normalize_unit=True)
    return F.weighted_bce(pred, label, BOUNDARY_POS_WEIGHT, BOUNDARY_NEG_WEIGHT)


def aux_loss(task: TaskSpec, aux_logits: Tensor, label: np.ndarray) -> Tensor:
    """Per-pixel cross-entropy of the region logits against the GT region index."""
    return F.cross_entropy(aux_logits, region_indices(label, task.regions))


def total_loss(preds: dict[str, Tensor], aux: dict[str, Tensor], labels: dict[str, np.ndarray],
               tasks: list[TaskSpec], regularizer: Tensor | None = None,
               omega_h: float = 0.0) -> tuple[Tensor, dict[str, float]]:
    """sum_n w_n (L_n + L_aux,n) [+ omega_h * regularizer]. Returns the scalar and its parts."""
    parts: dict[str, float] = {}
    total = None
    for t in tasks:
        if t.name not in labels:
            raise KeyError(f"total_loss: no labels for task {t.name!r}")
        main = task_loss(t, preds[t.name], labels[t.name])
        term = main
        parts[t.name] = main.item()
        if t.name in aux:
            a = aux_loss(t, aux[t.name], labels[t.name])
            parts[f"aux_{t.name}"] = a.item()
            term = term + a
        term = mul(term, np.asarray(t.loss_weight, dtype=term.dtype))
        total = term if total is None else total + term
    if regularizer is not None:
        parts["entropy"] = regularizer.item()
        total = total + mul(regularizer, np.asarray(omega_h, dtype=total.dtype))
    parts["total"] = total.item()
    return total, parts
