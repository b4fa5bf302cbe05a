"""Training loop, architecture search driver, evaluation and checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from ..autodiff.optim import AdamState, SGDState, poly_lr, sgd_step
from ..autodiff.tensor import Tensor, no_grad, sigmoid
from ..contexts import ContextType
from ..nas import (
    ArchParams,
    SearchSchedule,
    entropy_regularizer,
    lambda_at,
    omega_h_at,
    vote_final_config,
)
from .losses import total_loss
from .metrics import (
    MetricsReport,
    boundary_f_counts,
    confusion_matrix,
    f_measure_from_counts,
    mean_angular_error,
    miou_from_confusion,
)
from .model import ModelConfig, MultiTaskNet, build_model
from .tasks import TaskSpec

log = logging.getLogger(__name__)

REFERENCE_ALPHA_LR = 0.0005
REFERENCE_SEARCH_ITERS = 40000


def alpha_lr_for(total_iters: int) -> float:
    """Keep the total logit travel of the reference schedule when the search is shorter."""
    return REFERENCE_ALPHA_LR * REFERENCE_SEARCH_ITERS / total_iters


@dataclass
class TrainConfig:
    iters: int = 2000
    batch_size: int = 8
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0005
    poly_power: float = 0.9
    alpha_lr: float | None = None        # None: scaled from the reference schedule
    lambda_start: float = 1.0
    lambda_end: float = 0.05
    omega_h_start: float = -0.02
    omega_h_end: float = 0.06
    freeze_threshold: float = 0.3

    def schedule(self) -> SearchSchedule:
        return SearchSchedule(
            total_iters=self.iters, lambda_start=self.lambda_start, lambda_end=self.lambda_end,
            omega_h_start=self.omega_h_start, omega_h_end=self.omega_h_end,
            freeze_threshold=self.freeze_threshold,
            alpha_lr=self.alpha_lr if self.alpha_lr is not None else alpha_lr_for(self.iters),
        )


class NonFiniteLossError(FloatingPointError):
    pass


def slice_batch(data: dict[str, np.ndarray], idx) -> dict[str, np.ndarray]:
    return {k: v[idx] for k, v in data.items()}


def data_size(data: dict[str, np.ndarray]) -> int:
    return len(data["image"])


class Trainer:
    """Owns the optimiser state for one run; randomness is a function of (seed, iteration)."""

    def __init__(self, net: MultiTaskNet, tasks: list[TaskSpec], data: dict[str, np.ndarray],
                 cfg: TrainConfig, seed: int = 0):
        if data_size(data) < cfg.batch_size:
            raise ValueError(f"training set has {data_size(data)} samples, batch size is {cfg.batch_size}")
        self.net = net
        self.tasks = tasks
        self.data = data
        self.cfg = cfg
        self.seed = int(seed)
        self.schedule = cfg.schedule()
        self.params = net.parameters()
        self.sgd = SGDState(cfg.lr, cfg.momentum, cfg.weight_decay)
        self.iteration = 0
        self.history: list[dict[str, float]] = []
        self.arch: ArchParams | None = None
        self.adam: AdamState | None = None
        if net.config.searching:
            self.arch = ArchParams(len(tasks))
            for j, ct in net.pinned_blocks().items():
                self.arch.fix_block(j, ct)
            self.adam = AdamState(lr=self.schedule.alpha_lr)

    def batch_rng(self, it: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, it, 11])

    def step(self) -> dict[str, float]:
        it = self.iteration
        if it >= self.cfg.iters:
            raise RuntimeError("training already finished")
        rng = self.batch_rng(it)
        idx = np.sort(rng.choice(data_size(self.data), self.cfg.batch_size, replace=False))
        batch = slice_batch(self.data, idx)
        net = self.net
        net.train()
        net.zero_grad()
        arch = None
        reg = None
        omega = 0.0
        if self.arch is not None:
            self.arch.alpha.grad = None
            arch = self.arch.sample(lambda_at(it, self.schedule), rng)
            reg = entropy_regularizer(self.arch.alpha, self.arch.frozen_mask)
            omega = omega_h_at(it, self.schedule)
        out = net(batch["image"], arch=arch, labels=batch)
        loss, parts = total_loss(out.preds, out.aux, batch, self.tasks, reg, omega)
        if not math.isfinite(parts["total"]):
            raise NonFiniteLossError(f"iteration {it}: non-finite loss, components {parts}")
        loss.backward()
        lr = poly_lr(it, self.cfg.iters, self.cfg.lr, self.cfg.poly_power)
        sgd_step(self.params, self.sgd, lr)
        if self.arch is not None:
            self.arch.adam_step(self.adam)
            self.arch.update_freezes(it + 1, self.schedule.freeze_threshold)
            parts["frozen"] = float(self.arch.frozen_mask.mean())
        parts["lr"] = lr
        self.iteration += 1
        self.history.append(parts)
        return parts

    def run(self, until: int | None = None, log_every: int = 0) -> None:
        until = self.cfg.iters if until is None else min(until, self.cfg.iters)
        while self.iteration < until:
            parts = self.step()
            if log_every and self.iteration % log_every == 0:
                log.info("iter %d loss %.4f", self.iteration, parts["total"])

    # --- persistence -----------------------------------------------------------

    def state_entries(self) -> dict[str, np.ndarray]:
        f32 = np.float32
        entries = {f"model/{k}": np.asarray(v, f32) for k, v in self.net.state_dict().items()}
        for i, buf in self.sgd.buffers.items():
            entries[f"sgd/{i}"] = buf.astype(f32)
        entries["state/iteration"] = np.array([self.iteration], f32)
        entries["state/seed"] = np.array([(self.seed >> s) & 0xFFFF for s in (0, 16, 32, 48)], f32)
        if self.arch is not None:
            entries["arch/alpha"] = self.arch.alpha.data.astype(f32)
            entries["arch/frozen"] = np.array([-1 if f is None else f.index for f in self.arch.frozen], f32)
            entries["arch/freeze_iter"] = np.array([-1 if f is None else f for f in self.arch.freeze_iter], f32)
            entries["arch/fixed"] = np.array(self.arch.fixed, f32)
            entries["adam/step"] = np.array([self.adam.step], f32)
            if 0 in self.adam.m:
                entries["adam/m"] = self.adam.m[0].astype(f32)
                entries["adam/v"] = self.adam.v[0].astype(f32)
        return entries

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.state_entries())

    def load(self, path: str | Path) -> None:
        entries = load_checkpoint(path)
        model = {k[len("model/"):]: v for k, v in entries.items() if k.startswith("model/")}
        self.net.load_state_dict(model)
        self.sgd.buffers = {int(k[4:]): v.copy() for k, v in entries.items() if k.startswith("sgd/")}
        self.iteration = int(entries["state/iteration"][0])
        seed = sum(int(c) << s for c, s in zip(entries["state/seed"], (0, 16, 32, 48)))
        if seed != self.seed:
            raise CheckpointError(f"checkpoint seed {seed} differs from trainer seed {self.seed}")
        if self.arch is not None:
            if "arch/alpha" not in entries:
                raise CheckpointError("checkpoint has no architecture state")
            self.arch.alpha.data = entries["arch/alpha"].copy()
            self.arch.frozen = [None if f < 0 else ContextType.from_index(int(f)) for f in entries["arch/frozen"]]
            self.arch.freeze_iter = [None if f < 0 else int(f) for f in entries["arch/freeze_iter"]]
            self.arch.fixed = [bool(f) for f in entries["arch/fixed"]]
            self.adam.step = int(entries["adam/step"][0])
            self.adam.m, self.adam.v = {}, {}
            if "adam/m" in entries:
                self.adam.m[0] = entries["adam/m"].copy()
                self.adam.v[0] = entries["adam/v"].copy()


def load_model_weights(net: MultiTaskNet, path: str | Path) -> None:
    entries = load_checkpoint(path)
    net.load_state_dict({k[len("model/"):]: v for k, v in entries.items() if k.startswith("model/")})


def train_model(config: ModelConfig, tasks: list[TaskSpec], data: dict[str, np.ndarray],
                cfg: TrainConfig, seed: int = 0) -> tuple[MultiTaskNet, Trainer]:
    net = build_model(config, tasks, seed)
    trainer = Trainer(net, tasks, data, cfg, seed)
    trainer.run()
    return net, trainer


# --- evaluation -------------------------------------------------------------------

def predict(net: MultiTaskNet, data: dict[str, np.ndarray], batch_size: int = 32, arch=None,
            cp_override: dict[tuple[str, str], np.ndarray] | None = None,
            collect_cp: list[tuple[str, str]] | None = None):
    """Eval-mode predictions over a dataset; optionally replace or collect CP outputs."""
    if data_size(data) == 0:
        raise ValueError("evaluation set is empty")
    net.eval()
    preds: dict[str, list[np.ndarray]] = {t: [] for t in net.task_names}
    cps: dict[tuple[str, str], list[np.ndarray]] = {k: [] for k in (collect_cp or [])}
    with no_grad():
        for start in range(0, data_size(data), batch_size):
            sl = slice(start, start + batch_size)
            batch = slice_batch(data, sl)
            replace = None
            if cp_override:
                replace = {k: v[sl] for k, v in cp_override.items()}
            out = net(batch["image"], arch=arch, labels=batch, cp_replace=replace, keep_cp=bool(collect_cp))
            for t in net.task_names:
                preds[t].append(out.preds[t].data)
            for k in cps:
                cps[k].append(out.cp[k].data)
    net.train()
    return ({t: np.concatenate(v) for t, v in preds.items()},
            {k: np.concatenate(v) for k, v in cps.items()})


def metrics_from_predictions(preds: dict[str, np.ndarray], data: dict[str, np.ndarray],
                             tasks: list[TaskSpec], run_id: str = "") -> MetricsReport:
    values = {}
    for t in tasks:
        p, y = preds[t.name], data[t.name]
        if t.kind == "classification":
            cm = confusion_matrix(np.argmax(p, axis=1), y, t.out_channels)
            values[t.name] = miou_from_confusion(cm)
        elif t.kind == "depth":
            d = p.astype(np.float64) - y.astype(np.float64)
            values[t.name] = float(np.sqrt(np.mean(d * d)))
        elif t.kind == "normals":
            values[t.name] = mean_angular_error(p, y)
        else:
            prob = sigmoid(Tensor(p)).data
            values[t.name] = f_measure_from_counts(boundary_f_counts(prob, y))
    return MetricsReport(values, run_id)


def evaluate(net: MultiTaskNet, data: dict[str, np.ndarray], tasks: list[TaskSpec] | None = None,
             arch=None, batch_size: int = 32, run_id: str = "",
             cp_override: dict[tuple[str, str], np.ndarray] | None = None) -> MetricsReport:
    tasks = net.tasks if tasks is None else tasks
    preds, _ = predict(net, data, batch_size, arch, cp_override)
    return metrics_from_predictions(preds, data, tasks, run_id)


# --- search ------------------------------------------------------------------------

@dataclass
class SearchRun:
    seed: int
    selections: list[ContextType]
    freeze_iter: list[int | None]
    frozen_at_end: float
    alpha: np.ndarray
    history: list[dict[str, float]] = field(repr=False, default_factory=list)


@dataclass
class SearchResult:
    task_names: list[str]
    runs: list[SearchRun]
    voted: list[ContextType]
    error: str | None = None

    @property
    def selections(self) -> list[list[ContextType]]:
        return [r.selections for r in self.runs]


def search_once(config: ModelConfig, tasks: list[TaskSpec], data: dict[str, np.ndarray],
                cfg: TrainConfig, seed: int) -> SearchRun:
    if not config.searching:
        raise ValueError(f"model mode {config.mode!r} does not search")
    net = build_model(config, tasks, seed)
    trainer = Trainer(net, tasks, data, cfg, seed)
    trainer.run()
    arch = trainer.arch
    frozen_frac = float(np.mean([f is not None and not fx for f, fx in zip(arch.frozen, arch.fixed)])
                        / max(np.mean([not fx for fx in arch.fixed]), 1e-12))
    return SearchRun(seed, arch.selections(), list(arch.freeze_iter), frozen_frac,
                     arch.alpha.data.copy(), trainer.history)


def run_search(config: ModelConfig, tasks: list[TaskSpec], data: dict[str, np.ndarray],
               cfg: TrainConfig, seeds: list[int]) -> SearchResult:
    """Independent searches (one per seed) and the plurality-voted configuration.

    A failing run stops the sweep; completed runs are kept and the error is recorded.
    """
    runs: list[SearchRun] = []
    error = None
    for s in seeds:
        try:
            runs.append(search_once(config, tasks, data, cfg, s))
        except Exception as exc:  # surfaced through SearchResult.error
            error = f"seed {s}: {type(exc).__name__}: {exc}"
            log.error("search run failed: %s", error)
            break
    voted = vote_final_config([r.selections for r in runs]) if runs else []
    return SearchResult([t.name for t in tasks], runs, voted, error)


def uniform_arch(n_tasks: int, ct: ContextType) -> list[ContextType]:
    return [ct] * (n_tasks * n_tasks)

