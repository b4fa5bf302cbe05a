"""Task descriptions: output width, loss weight, metric direction and label regions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..label_space import (
    LabelRegionSpec,
    depth_binning_from_data,
    fit_normal_codebook,
)
from ..synth_data import NUM_CLASSES

TASK_KINDS = ("classification", "depth", "normals", "boundary")
ALL_TASKS = ("semseg", "depth", "normals", "boundary")
DEFAULT_WEIGHTS = {"semseg": 1.0, "depth": 1.0, "normals": 10.0, "boundary": 50.0}
BOUNDARY_POS_WEIGHT = 0.8
BOUNDARY_NEG_WEIGHT = 0.2


@dataclass
class TaskSpec:
    name: str
    kind: str
    out_channels: int
    loss_weight: float
    metric: str
    gamma: int          # 1 when lower metric values are better
    regions: LabelRegionSpec

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.loss_weight < 0:
            raise ValueError(f"{self.name}: negative loss weight")


def build_tasks(train_batch: dict[str, np.ndarray], names=ALL_TASKS, weights: dict | None = None,
                n_depth_bins: int = 40, n_codewords: int = 40, seed: int = 0,
                codebook_pixels: int = 20000) -> list[TaskSpec]:
    """Task list with label-region specs fitted on the training split."""
    w = dict(DEFAULT_WEIGHTS)
    w.update(weights or {})
    tasks = []
    for name in names:
        if name == "semseg":
            regions = LabelRegionSpec("semseg", NUM_CLASSES, "class")
            tasks.append(TaskSpec(name, "classification", NUM_CLASSES, w[name], "miou", 0, regions))
        elif name == "depth":
            binning = depth_binning_from_data(train_batch["depth"], n_depth_bins)
            regions = LabelRegionSpec("depth", n_depth_bins, "depth_bin", binning=binning)
            tasks.append(TaskSpec(name, "depth", 1, w[name], "rmse", 1, regions))
        elif name == "normals":
            flat = np.moveaxis(train_batch["normals"], 1, -1).reshape(-1, 3)
            rng = np.random.default_rng([seed, 7])
            pick = rng.choice(len(flat), size=min(codebook_pixels, len(flat)), replace=False)
            codebook = fit_normal_codebook(flat[pick], n_codewords, seed=seed)
            regions = LabelRegionSpec("normals", n_codewords, "normal_codeword", codebook=codebook)
            tasks.append(TaskSpec(name, "normals", 3, w[name], "mean_angle", 1, regions))
        elif name == "boundary":
            regions = LabelRegionSpec("boundary", 2, "class")
            tasks.append(TaskSpec(name, "boundary", 1, w[name], "f_measure", 0, regions))
        else:
            raise ValueError(f"unknown task {name!r}")
    return tasks
