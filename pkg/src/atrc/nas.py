"""Differentiable search over CP-block context types.

Blocks are indexed target-major: block ``j = t * N + s`` distills source
task ``s`` into target task ``t``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff.nn import Parameter
from .autodiff.optim import AdamState, adam_step_masked_rows
from .autodiff.tensor import Tensor, add, log_softmax, mul, softmax, tsum
from .contexts import CONTEXT_TYPES, NUM_CONTEXTS, ContextType


@dataclass
class SearchSchedule:
    total_iters: int
    lambda_start: float = 1.0
    lambda_end: float = 0.05
    omega_h_start: float = -0.02
    omega_h_end: float = 0.06
    freeze_threshold: float = 0.3
    alpha_lr: float = 0.0005

    def __post_init__(self):
        if self.total_iters <= 0:
            raise ValueError("total_iters must be positive")
        if self.lambda_start <= 0 or self.lambda_end <= 0:
            raise ValueError("the Gumbel temperature must stay positive")


def _interp(start: float, end: float, it: int, total: int) -> float:
    if not 0 <= it <= total:
        raise ValueError(f"iteration {it} outside [0, {total}]")
    return start + (end - start) * it / total


def lambda_at(it: int, schedule: SearchSchedule) -> float:
    return _interp(schedule.lambda_start, schedule.lambda_end, it, schedule.total_iters)


def omega_h_at(it: int, schedule: SearchSchedule) -> float:
    return _interp(schedule.omega_h_start, schedule.omega_h_end, it, schedule.total_iters)


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    """G = -log(-log U) with U uniform on the open interval (0, 1)."""
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(alpha: Tensor, lam: float, rng: np.random.Generator | None = None,
                          gumbel: np.ndarray | None = None) -> Tensor:
    """softmax((alpha + G) / lam) over the last axis; differentiable in alpha.

    Pass ``gumbel`` to fix the noise (e.g. zeros, or a recorded draw).
    """
    if lam <= 0:
        raise ValueError(f"temperature must be positive, got {lam}")
    if gumbel is None:
        if rng is None:
            raise ValueError("gumbel_softmax_sample needs an rng or explicit noise")
        gumbel = sample_gumbel(rng, alpha.shape)
    g = Tensor(np.asarray(gumbel, dtype=alpha.dtype))
    return softmax(mul(add(alpha, g), np.asarray(1.0 / lam, dtype=alpha.dtype)), axis=-1)


def entropy_per_block(alpha: np.ndarray) -> np.ndarray:
    a = np.asarray(alpha, dtype=np.float64)
    z = a - a.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return -(np.exp(logp) * logp).sum(axis=-1)


def entropy_regularizer(alpha: Tensor, frozen: np.ndarray | None = None) -> Tensor:
    """Mean softmax entropy (nats) over the rows of ``alpha`` that are not frozen."""
    rows = alpha.shape[0]
    active = np.ones(rows, bool) if frozen is None else ~np.asarray(frozen, bool)
    logp = log_softmax(alpha, axis=-1)
    p = softmax(alpha, axis=-1)
    h = mul(tsum(mul(p, logp), axis=-1), np.asarray(-1.0, dtype=alpha.dtype))
    n_active = int(active.sum())
    if n_active == 0:
        return Tensor(np.zeros((), dtype=alpha.dtype))
    weights = (active / n_active).astype(alpha.dtype)
    return tsum(mul(h, weights))


def probability_gap(alpha_j: np.ndarray) -> float:
    p = np.sort(block_probabilities(alpha_j))[::-1]
    return float(p[0] - p[1])


def block_probabilities(alpha_j: np.ndarray) -> np.ndarray:
    a = np.asarray(alpha_j, dtype=np.float64)
    e = np.exp(a - a.max())
    return e / e.sum()


def freeze_check(alpha_j: np.ndarray, threshold: float = 0.3) -> ContextType | None:
    """Return the winning context once the top-two probability gap exceeds ``threshold``."""
    if probability_gap(alpha_j) > threshold:
        return ContextType.from_index(int(np.argmax(alpha_j)))
    return None


@dataclass
class ArchParams:
    """Architecture logits plus per-block freeze state."""

    n_tasks: int
    alpha: Parameter = None
    frozen: list[ContextType | None] = field(default_factory=list)
    freeze_iter: list[int | None] = field(default_factory=list)
    fixed: list[bool] = field(default_factory=list)   # excluded from search (e.g. no self-attention)

    def __post_init__(self):
        nb = self.n_blocks
        if self.alpha is None:
            self.alpha = Parameter(np.zeros((nb, NUM_CONTEXTS), dtype=np.float32), name="alpha")
        if not self.frozen:
            self.frozen = [None] * nb
            self.freeze_iter = [None] * nb
            self.fixed = [False] * nb

    @property
    def n_blocks(self) -> int:
        return self.n_tasks * self.n_tasks

    def block_index(self, target: int, source: int) -> int:
        return target * self.n_tasks + source

    def fix_block(self, j: int, ct: ContextType) -> None:
        """Pin a block outside the search (it never samples and never counts in the regularizer)."""
        self.frozen[j] = ct
        self.fixed[j] = True
        self.freeze_iter[j] = 0

    @property
    def frozen_mask(self) -> np.ndarray:
        return np.array([f is not None for f in self.frozen])

    def sample(self, lam: float, rng: np.random.Generator) -> list[Tensor | ContextType]:
        """Per block: a Gumbel-softmax weight vector, or the fixed context once frozen.

        A frozen block runs only its selected candidate, which is the one-hot
        mix without evaluating the others. Noise is drawn for every block so
        the random stream does not depend on freeze state.
        """
        g = sample_gumbel(rng, self.alpha.shape)
        z = gumbel_softmax_sample(self.alpha, lam, gumbel=g)
        return [self.frozen[j] if self.frozen[j] is not None else z[j] for j in range(self.n_blocks)]

    def update_freezes(self, it: int, threshold: float) -> list[int]:
        newly = []
        for j in range(self.n_blocks):
            if self.frozen[j] is None:
                ct = freeze_check(self.alpha.data[j], threshold)
                if ct is not None:
                    self.frozen[j] = ct
                    self.freeze_iter[j] = it
                    newly.append(j)
        return newly

    def selections(self) -> list[ContextType]:
        """Frozen choice where available, argmax of alpha otherwise."""
        return [f if f is not None else ContextType.from_index(int(np.argmax(self.alpha.data[j])))
                for j, f in enumerate(self.frozen)]

    def adam_step(self, state: AdamState) -> None:
        adam_step_masked_rows(self.alpha, state, ~self.frozen_mask)


def vote_tally(runs: list[list[ContextType]]) -> list[Counter]:
    if not runs:
        raise ValueError("vote_final_config: no runs")
    nb = len(runs[0])
    if any(len(r) != nb for r in runs):
        raise ValueError("vote_final_config: runs have different block counts")
    return [Counter(ContextType(r[j]) for r in runs) for j in range(nb)]


def vote_final_config(runs: list[list[ContextType]]) -> list[ContextType]:
    """Plurality per block; ties go to the earliest context in enumeration order."""
    out = []
    for tally in vote_tally(runs):
        best = max(CONTEXT_TYPES, key=lambda ct: (tally.get(ct, 0), -ct.index))
        out.append(best)
    return out


# --- architecture files -------------------------------------------------------

ARCH_HEADER = "# atrc architecture v1"


def write_arch_file(path: str | Path, task_names: list[str], config: list[ContextType],
                    runs: list[list[ContextType]] | None = None) -> Path:
    """One line per (target, source) pair: context and, if given, the per-run vote tally."""
    n = len(task_names)
    if len(config) != n * n:
        raise ValueError(f"expected {n * n} blocks, got {len(config)}")
    tallies = vote_tally(runs) if runs else None
    lines = [ARCH_HEADER, "tasks " + " ".join(task_names), f"runs {len(runs) if runs else 0}",
             "# target source context votes"]
    for t in range(n):
        for s in range(n):
            j = t * n + s
            votes = "-"
            if tallies is not None:
                votes = ",".join(f"{ct.value}={tallies[j][ct]}" for ct in CONTEXT_TYPES if tallies[j][ct])
            lines.append(f"{task_names[t]} {task_names[s]} {config[j].value} {votes}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_arch_file(path: str | Path, task_names: list[str] | None = None) -> tuple[list[str], list[ContextType]]:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != ARCH_HEADER:
        raise ValueError(f"{path}: not an architecture file")
    names: list[str] = []
    table: dict[tuple[str, str], ContextType] = {}
    for line in text[1:]:
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("runs "):
            continue
        if line.startswith("tasks "):
            names = line.split()[1:]
            continue
        parts = line.split()
        if len(parts) < 3:
            raise ValueError(f"{path}: malformed line {line!r}")
        table[(parts[0], parts[1])] = ContextType(parts[2])
    if task_names is not None and names != list(task_names):
        raise ValueError(f"{path}: tasks {names} do not match {list(task_names)}")
    try:
        config = [table[(t, s)] for t in names for s in names]
    except KeyError as exc:
        raise ValueError(f"{path}: missing block {exc.args[0]}") from None
    return names, config
