"""Multi-task performance, block importance and search-reliability statistics."""

from __future__ import annotations

import csv
import io
import itertools
import json
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .contexts import CONTEXT_TYPES, ContextType
from .imageio import to_u8, write_pgm
from .pipeline.metrics import MetricsReport
from .pipeline.train import metrics_from_predictions, predict

__all__ = [
    "AgreementReport",
    "ImportanceMatrix",
    "ImportanceResult",
    "MetricsReport",
    "agreement_report",
    "cohens_kappa",
    "delta_m",
    "importance_matrix",
    "importance_selection_correlation",
    "lights_kappa",
    "metrics_csv",
    "percentage_agreement",
    "permutation_importance",
    "write_importance",
    "write_agreement",
    "write_metrics",
]


def _values(report) -> Mapping[str, float]:
    return report.values if isinstance(report, MetricsReport) else report


def delta_m(model, baseline, gammas: Mapping[str, int]) -> float:
    """Mean sign-corrected relative difference to the baseline, in percent.

    ``gammas[task]`` is 1 when lower values of that task's metric are better.
    """
    m, b = _values(model), _values(baseline)
    if set(m) != set(b):
        raise ValueError(f"task sets differ: {sorted(m)} vs {sorted(b)}")
    if not m:
        raise ValueError("delta_m needs at least one task")
    total = 0.0
    for task, mb in b.items():
        if mb == 0:
            raise ZeroDivisionError(f"baseline metric for {task!r} is zero")
        total += (-1.0) ** gammas[task] * (m[task] - mb) / mb
    return 100.0 * total / len(b)


# --- permutation importance --------------------------------------------------------

@dataclass
class ImportanceResult:
    target: str
    source: str
    mean_drop: float
    drops: list[float]
    absent: bool = False     # block missing or fixed to "none": importance is 0 by definition


def _block_context(net, target: str, source: str) -> ContextType | None:
    if not net.distills:
        return None
    if net.fixed_arch is None:
        return None
    n = len(net.task_names)
    return net.fixed_arch[net.task_names.index(target) * n + net.task_names.index(source)]


def permutation_importance(net, data: dict[str, np.ndarray], target: str, source: str,
                           reference, gammas: Mapping[str, int], repetitions: int = 5,
                           seed: int = 0, permutations: Sequence[np.ndarray] | None = None,
                           batch_size: int = 32) -> ImportanceResult:
    """Drop in delta_m (percentage points) when CP(target <- source) outputs are shuffled across samples.

    Each repetition permutes whole per-sample output maps; ``reference`` is the
    report delta_m is measured against (the single-task baselines).
    """
    ct = _block_context(net, target, source)
    if not net.distills or ct is ContextType.NONE:
        return ImportanceResult(target, source, 0.0, [], absent=True)
    if net.fixed_arch is None:
        raise ValueError("permutation importance needs a model with a fixed architecture")
    if repetitions < 1 and permutations is None:
        raise ValueError("repetitions must be at least 1")
    key = (target, source)
    preds, cps = predict(net, data, batch_size, collect_cp=[key])
    base = delta_m(metrics_from_predictions(preds, data, net.tasks), reference, gammas)
    n = len(data["image"])
    if permutations is None:
        rng = np.random.default_rng([seed, 5])
        permutations = [rng.permutation(n) for _ in range(repetitions)]
    drops = []
    for perm in permutations:
        shuffled = cps[key][np.asarray(perm)]
        p, _ = predict(net, data, batch_size, cp_override={key: shuffled})
        drops.append(base - delta_m(metrics_from_predictions(p, data, net.tasks), reference, gammas))
    return ImportanceResult(target, source, float(np.mean(drops)), drops)


@dataclass
class ImportanceMatrix:
    task_names: list[str]
    values: np.ndarray          # rows: target, columns: source
    repetitions: int
    absent: np.ndarray = None   # True where the block is missing or "none"

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetition count must be at least 1")
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("importance entries must be finite")
        if self.absent is None:
            self.absent = np.zeros(self.values.shape, bool)


def importance_matrix(net, data, reference, gammas, repetitions: int = 5, seed: int = 0,
                      batch_size: int = 32) -> ImportanceMatrix:
    names = net.task_names
    n = len(names)
    vals = np.zeros((n, n))
    absent = np.zeros((n, n), bool)
    for i, t in enumerate(names):
        for j, s in enumerate(names):
            r = permutation_importance(net, data, t, s, reference, gammas, repetitions,
                                       seed=seed + i * n + j, batch_size=batch_size)
            vals[i, j] = r.mean_drop
            absent[i, j] = r.absent
    return ImportanceMatrix(list(names), vals, repetitions, absent)


# --- agreement between search runs ------------------------------------------------------

def _as_codes(run) -> np.ndarray:
    return np.array([ContextType(c).index if not isinstance(c, (int, np.integer)) else int(c) for c in run])


def _check_runs(runs) -> list[np.ndarray]:
    if len(runs) < 2:
        raise ValueError("agreement statistics need at least two runs")
    codes = [_as_codes(r) for r in runs]
    if len({len(c) for c in codes}) != 1:
        raise ValueError("runs have different block counts")
    if len(codes[0]) == 0:
        raise ValueError("runs are empty")
    return codes


def percentage_agreement(runs) -> float:
    """Mean over unordered run pairs of the fraction of blocks on which the pair agrees."""
    codes = _check_runs(runs)
    return float(np.mean([np.mean(a == b) for a, b in itertools.combinations(codes, 2)]))


def cohens_kappa(run_a, run_b, categories: int = len(CONTEXT_TYPES)) -> float:
    a, b = _as_codes(run_a), _as_codes(run_b)
    if len(a) != len(b):
        raise ValueError("runs have different lengths")
    if len(a) == 0:
        raise ValueError("no decisions to compare")
    if a.max() >= categories or b.max() >= categories or min(a.min(), b.min()) < 0:
        raise ValueError("category index out of range")
    p_o = float(np.mean(a == b))
    pa = np.bincount(a, minlength=categories) / len(a)
    pb = np.bincount(b, minlength=categories) / len(b)
    p_e = float(pa @ pb)
    if p_e >= 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return (p_o - p_e) / (1.0 - p_e)


def lights_kappa(runs, categories: int = len(CONTEXT_TYPES)) -> float:
    """Mean Cohen's kappa over all unordered pairs of runs."""
    codes = _check_runs(runs)
    return float(np.mean([cohens_kappa(a, b, categories) for a, b in itertools.combinations(codes, 2)]))


@dataclass
class AgreementReport:
    agreement: float
    lights_kappa: float
    pairwise_kappa: dict[str, float] = field(default_factory=dict)
    per_block_agreement: list[float] = field(default_factory=list)


def agreement_report(runs) -> AgreementReport:
    codes = _check_runs(runs)
    pairs = {f"{i}-{j}": cohens_kappa(codes[i], codes[j])
             for i, j in itertools.combinations(range(len(codes)), 2)}
    stacked = np.stack(codes)
    per_block = [float(np.mean([stacked[i, k] == stacked[j, k]
                                for i, j in itertools.combinations(range(len(codes)), 2)]))
                 for k in range(stacked.shape[1])]
    return AgreementReport(percentage_agreement(codes), float(np.mean(list(pairs.values()))), pairs, per_block)


def importance_selection_correlation(importances, reliabilities) -> float:
    x = np.asarray(importances, dtype=np.float64).ravel()
    y = np.asarray(reliabilities, dtype=np.float64).ravel()
    if x.shape != y.shape or len(x) < 2:
        raise ValueError("need two equal-length vectors with at least two entries")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(dx @ dx), np.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        raise ValueError("correlation undefined for a constant vector")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


# --- emitters -------------------------------------------------------------------------

METRICS_COLUMNS = ("run_id", "task", "metric", "value")


def metrics_csv(reports: Sequence[MetricsReport], metric_names: Mapping[str, str] | None = None) -> str:
    """One row per run and task; values written with repr precision so output is byte-stable."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in reports:
        for task in sorted(r.values):
            w.writerow([r.run_id, task, (metric_names or {}).get(task, ""), repr(float(r.values[task]))])
    return buf.getvalue()


def write_metrics(reports: Sequence[MetricsReport], out_dir: str | Path, summary: dict | None = None,
                  metric_names: Mapping[str, str] | None = None) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv"
    csv_path.write_text(metrics_csv(reports, metric_names))
    doc = {"runs": [{"run_id": r.run_id, "values": r.values, "extras": r.extras} for r in reports]}
    doc.update(summary or {})
    json_path = out / "metrics.json"
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def importance_heatmap(values: np.ndarray, cell: int = 16) -> np.ndarray:
    """Min-max scaled matrix, each entry drawn as a ``cell`` x ``cell`` square."""
    v = np.asarray(values, dtype=np.float64)
    span = v.max() - v.min()
    unit = (v - v.min()) / span if span > 0 else np.full(v.shape, 0.5)
    return np.kron(to_u8(unit), np.ones((cell, cell), np.uint8))


def write_importance(mat: ImportanceMatrix, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target", "source", "mean_drop", "absent"])
    for i, t in enumerate(mat.task_names):
        for j, s in enumerate(mat.task_names):
            w.writerow([t, s, repr(float(mat.values[i, j])), int(mat.absent[i, j])])
    paths = [out / "importance.csv", out / "importance.json", out / "importance.pgm"]
    paths[0].write_text(buf.getvalue())
    paths[1].write_text(json.dumps({"tasks": mat.task_names, "values": mat.values.tolist(),
                                    "absent": mat.absent.tolist(), "repetitions": mat.repetitions},
                                   indent=2) + "\n")
    write_pgm(paths[2], importance_heatmap(mat.values))
    return paths


def write_agreement(report: AgreementReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pair", "cohens_kappa"])
    for pair, k in report.pairwise_kappa.items():
        w.writerow([pair, repr(k)])
    w.writerow(["agreement", repr(report.agreement)])
    w.writerow(["lights_kappa", repr(report.lights_kappa)])
    paths = [out / "agreement.csv", out / "agreement.json"]
    paths[0].write_text(buf.getvalue())
    paths[1].write_text(json.dumps(asdict(report), indent=2) + "\n")
    return paths
