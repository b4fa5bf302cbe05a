"""Command-line entry point.

    atrc <command> [--config PATH] [--out DIR] [--seed N] [--runs N] [command options]

Every hyperparameter comes from the JSON config (see ``atrc.config``); flags
only pick the command, paths and seeds. Each command writes ``manifest.json``
into its output directory. Exit status: 0 on success, 1 when a run fails or
an invariant check trips, 2 for bad input (config, paths, arguments).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

log = logging.getLogger("atrc")

CSV_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


@dataclass
class RunManifest:
    command: list[str]
    config_path: str | None
    config_hash: str
    config: dict
    seeds: list[int]
    out_dir: str
    started: str
    finished: str = ""
    status: str = "running"
    csv_version: int = CSV_VERSION
    outputs: list[str] = field(default_factory=list)

    def write(self) -> Path:
        path = Path(self.out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _limit_threads() -> int:
    """Honour ATRC_THREADS for BLAS pools and search workers."""
    raw = os.environ.get("ATRC_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ATRC_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"ATRC_THREADS must be a positive integer, got {raw!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    return n


# --- shared helpers ------------------------------------------------------------

def _seeds(args, default: list[int]) -> list[int]:
    runs = args.runs if args.runs is not None else len(default)
    if runs < 1:
        raise UsageError("--runs must be at least 1")
    if args.seed is not None:
        return [args.seed + i for i in range(runs)]
    if runs <= len(default):
        return list(default[:runs])
    return list(default) + [default[-1] + 1 + i for i in range(runs - len(default))]


def _require_file(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing {what}")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


class _Context:
    """Lazily built data and task specs for one config."""

    def __init__(self, cfg: dict):
        from .config import scene_spec
        from .pipeline import build_tasks
        from .synth_data import dataset, stack_samples

        self.cfg = cfg
        spec = scene_spec(cfg)
        d = cfg["data"]
        self.train = stack_samples(dataset(spec, d["train_count"], "train"))
        self.test = stack_samples(dataset(spec, d["test_count"], "test"))
        self.tasks = build_tasks(self.train, cfg["tasks"], cfg["loss_weights"], cfg["n_depth_bins"],
                                 cfg["n_codewords"], seed=spec.seed)
        self.task_names = [t.name for t in self.tasks]
        self.gammas = {t.name: t.gamma for t in self.tasks}
        self.metric_names = {t.name: t.metric for t in self.tasks}


def _model_config(ctx: _Context, arch_path: str | None):
    from .config import model_config
    from .nas import read_arch_file

    if arch_path is not None:
        p = _require_file(arch_path, "architecture file")
        try:
            _, arch = read_arch_file(p, ctx.task_names)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        return model_config(ctx.cfg, mode="fixed", arch=[a.value for a in arch])
    mc = model_config(ctx.cfg)
    if mc.searching:
        raise UsageError(f"model mode {mc.mode!r} searches; pass --arch or set a fixed mode in the config")
    return mc


def _load_net(ctx: _Context, args):
    from .autodiff.checkpoint import CheckpointError
    from .pipeline import build_model, load_model_weights

    ck = _require_file(args.checkpoint, "checkpoint")
    net = build_model(_model_config(ctx, args.arch), ctx.tasks)
    try:
        load_model_weights(net, ck)
    except (CheckpointError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint {ck}: {exc}") from None
    return net


def _read_reference(paths: list[str] | None, task_names: list[str]) -> dict | None:
    """Merged ``mean`` tables of one or more metrics.json files (e.g. one per single-task baseline)."""
    if not paths:
        return None
    merged: dict[str, float] = {}
    for path in paths:
        p = _require_file(path, "reference metrics")
        try:
            table = json.loads(p.read_text())["mean"]
            values = {k: float(v) for k, v in table.items()}
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
            raise UsageError(f"reference {p} has no 'mean' metrics table: {exc}") from None
        clash = set(values) & set(merged)
        if clash:
            raise UsageError(f"reference {p} repeats tasks {sorted(clash)}")
        merged.update(values)
    if set(merged) != set(task_names):
        raise UsageError(f"reference covers tasks {sorted(merged)}, model has {sorted(task_names)}")
    return merged


def _mean_values(reports) -> dict[str, float]:
    tasks = reports[0].values.keys()
    return {t: float(sum(r.values[t] for r in reports) / len(reports)) for t in tasks}


def _selection_table(names: list[str], selections) -> str:
    width = max(max(len(n) for n in names), 7)
    lines = ["target\\source".ljust(width + 2) + " ".join(n.ljust(width) for n in names)]
    n = len(names)
    for t in range(n):
        row = " ".join(selections[t * n + s].value.ljust(width) for s in range(n))
        lines.append(names[t].ljust(width + 2) + row)
    return "\n".join(lines) + "\n"


# --- commands -------------------------------------------------------------------------

def cmd_gen_data(args, cfg, out: Path, manifest: RunManifest) -> None:
    from .config import scene_spec
    from .synth_data import export_sample_images, generate_sample

    if args.count < 0:
        raise UsageError("--count must be non-negative")
    spec = scene_spec(cfg)
    for i in range(args.count):
        sample = generate_sample(spec, i, args.split)
        paths = export_sample_images(sample, out, f"{args.split}_{i:05d}", spec.depth_range)
        manifest.outputs.extend(p.name for p in paths)
    manifest.seeds = [spec.seed]


def _search_runs(mc, ctx, tcfg, seeds: list[int], workers: int):
    from .nas import vote_final_config
    from .pipeline import SearchResult, run_search, search_once

    if workers <= 1 or len(seeds) == 1:
        return run_search(mc, ctx.tasks, ctx.train, tcfg, seeds)
    from concurrent.futures import ProcessPoolExecutor

    runs, error = [], None
    with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
        futures = [pool.submit(search_once, mc, ctx.tasks, ctx.train, tcfg, s) for s in seeds]
        for s, fut in zip(seeds, futures):
            try:
                runs.append(fut.result())
            except Exception as exc:
                error = error or f"seed {s}: {type(exc).__name__}: {exc}"
    voted = vote_final_config([r.selections for r in runs]) if runs else []
    return SearchResult(ctx.task_names, runs, voted, error)


def cmd_search(args, cfg, out: Path, manifest: RunManifest) -> None:
    from .analysis import agreement_report, write_agreement
    from .config import model_config, train_config
    from .nas import write_arch_file

    ctx = _Context(cfg)
    seeds = _seeds(args, cfg["search_seeds"])
    manifest.seeds = seeds
    mc = model_config(cfg, mode="no_self_attention" if cfg["model"].get("mode") == "no_self_attention"
                      else "search")
    tcfg = train_config(cfg, search=True)
    res = _search_runs(mc, ctx, tcfg, seeds, args.workers)
    names = ctx.task_names
    n = len(names)
    tables = io.StringIO()
    freeze = io.StringIO()
    fw = csv.writer(freeze, lineterminator="\n")
    fw.writerow(["run", "seed", "target", "source", "context", "freeze_iter", "frozen_at_end"])
    for k, run in enumerate(res.runs):
        path = write_arch_file(out / f"run_{k}.txt", names, run.selections)
        manifest.outputs.append(path.name)
        tables.write(f"run {k} (seed {run.seed}), frozen fraction {run.frozen_at_end:.3f}\n")
        tables.write(_selection_table(names, run.selections) + "\n")
        for j, ct in enumerate(run.selections):
            fi = run.freeze_iter[j]
            fw.writerow([k, run.seed, names[j // n], names[j % n], ct.value, "" if fi is None else fi,
                         int(fi is not None)])
    (out / "selections.txt").write_text(tables.getvalue())
    (out / "freeze_log.csv").write_text(freeze.getvalue())
    manifest.outputs += ["selections.txt", "freeze_log.csv"]
    if res.runs:
        write_arch_file(out / "arch.txt", names, res.voted, res.selections)
        manifest.outputs.append("arch.txt")
        print(_selection_table(names, res.voted), end="")
    if len(res.runs) >= 2:
        manifest.outputs += [p.name for p in write_agreement(agreement_report(res.selections), out)]
    if res.error:
        raise CheckFailed(f"search failed: {res.error}")


def cmd_retrain(args, cfg, out: Path, manifest: RunManifest) -> None:
    from .analysis import delta_m, write_metrics
    from .config import train_config
    from .pipeline import Trainer, build_model, evaluate

    ctx = _Context(cfg)
    mc = _model_config(ctx, args.arch)
    reference = _read_reference(args.reference, ctx.task_names)
    seeds = _seeds(args, cfg["seeds"])
    manifest.seeds = seeds
    tcfg = train_config(cfg)
    reports = []
    for s in seeds:
        net = build_model(mc, ctx.tasks, s)
        trainer = Trainer(net, ctx.tasks, ctx.train, tcfg, s)
        trainer.run(log_every=max(tcfg.iters // 10, 1))
        ck = out / f"seed_{s}.ckpt"
        trainer.save(ck)
        manifest.outputs.append(ck.name)
        reports.append(evaluate(net, ctx.test, run_id=f"seed{s}"))
    summary = {"mean": _mean_values(reports), "model": asdict(mc)}
    if reference is not None:
        summary["delta_m"] = delta_m(summary["mean"], reference, ctx.gammas)
        summary["delta_m_per_run"] = [delta_m(r, reference, ctx.gammas) for r in reports]
    manifest.outputs += [p.name for p in write_metrics(reports, out, summary, ctx.metric_names)]
    print(json.dumps(summary["mean"], sort_keys=True))


def cmd_eval(args, cfg, out: Path, manifest: RunManifest) -> None:
    from .analysis import delta_m, write_metrics
    from .pipeline import evaluate

    ctx = _Context(cfg)
    net = _load_net(ctx, args)
    reference = _read_reference(args.reference, ctx.task_names)
    rep = evaluate(net, ctx.test, run_id=Path(args.checkpoint).stem)
    summary = {"mean": dict(rep.values)}
    if reference is not None:
        summary["delta_m"] = delta_m(rep, reference, ctx.gammas)
    manifest.outputs += [p.name for p in write_metrics([rep], out, summary, ctx.metric_names)]
    print(json.dumps(summary, sort_keys=True))


def cmd_importance(args, cfg, out: Path, manifest: RunManifest) -> None:
    from .analysis import importance_matrix, write_importance
    from .pipeline import evaluate

    ctx = _Context(cfg)
    net = _load_net(ctx, args)
    reference = _read_reference(args.reference, ctx.task_names)
    if reference is None:
        reference = dict(evaluate(net, ctx.test).values)
    seed = args.seed if args.seed is not None else 0
    manifest.seeds = [seed]
    reps = args.runs if args.runs is not None else cfg["importance_repetitions"]
    mat = importance_matrix(net, ctx.test, reference, ctx.gammas, reps, seed)
    manifest.outputs += [p.name for p in write_importance(mat, out)]


def cmd_agreement(args, cfg, out: Path, manifest: RunManifest) -> None:
    from .analysis import agreement_report, write_agreement
    from .nas import read_arch_file

    files = list(args.arch_files)
    if args.search_dir:
        files += sorted(str(p) for p in Path(args.search_dir).glob("run_*.txt"))
    if len(files) < 2:
        raise UsageError("agreement needs at least two architecture files")
    runs, names = [], None
    for f in files:
        try:
            n, arch = read_arch_file(_require_file(f, "architecture file"), names)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        names = n
        runs.append(arch)
    rep = agreement_report(runs)
    manifest.outputs += [p.name for p in write_agreement(rep, out)]
    print(f"agreement {rep.agreement:.4f} lights_kappa {rep.lights_kappa:.4f}")


def cmd_gradcheck(args, cfg, out: Path, manifest: RunManifest) -> None:
    import numpy as np

    from .autodiff import gradcheck, softmax
    from .contexts import NUM_CONTEXTS
    from .pipeline import ModelConfig, build_model, build_tasks, task_loss
    from .synth_data import SceneSpec, dataset, stack_samples

    seeds = _seeds(args, [0])
    manifest.seeds = seeds
    rows = []
    for s in seeds:
        data = stack_samples(dataset(SceneSpec(height=8, width=8, seed=s), 2))
        tasks = build_tasks(data, names=("semseg", "depth"), n_depth_bins=6, seed=s)
        mc = ModelConfig(width=8, feat=8, d_k=4, d_v=4, window=3, mode="search", region_source="gt",
                         fuse_zero_init=False)
        net = build_model(mc, tasks, s).to_dtype(np.float64)
        logits = np.random.default_rng([s, 3]).normal(size=(4, NUM_CONTEXTS))

        def fn(img, z):
            w = softmax(z, axis=-1)
            o = net(img, [w[j] for j in range(4)], data)
            return task_loss(tasks[0], o.preds["semseg"], data["semseg"]) + \
                task_loss(tasks[1], o.preds["depth"], data["depth"])

        # image checked along random directions, architecture logits coordinate by coordinate
        rep = gradcheck(fn, [data["image"].astype(np.float64), logits], tolerance=args.tolerance,
                        h=args.step, directions={0: args.directions}, seed=s)
        rows.append({"seed": s, "max_rel_error": rep.max_rel_error, "passed": bool(rep.passed)})
    doc = {"tolerance": args.tolerance, "step": args.step, "directions": args.directions, "runs": rows, "max_rel_error": max(r["max_rel_error"] for r in rows)}
    (out / "gradcheck.json").write_text(json.dumps(doc, indent=2) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "max_rel_error", "passed"])
    for r in rows:
        w.writerow([r["seed"], repr(r["max_rel_error"]), int(r["passed"])])
    (out / "gradcheck.csv").write_text(buf.getvalue())
    manifest.outputs += ["gradcheck.json", "gradcheck.csv"]
    print(f"max relative error {doc['max_rel_error']:.3e}")
    if not all(r["passed"] for r in rows):
        raise CheckFailed(f"gradient check above tolerance {args.tolerance}")


def cmd_export_attn(args, cfg, out: Path, manifest: RunManifest) -> None:
    from .autodiff.tensor import no_grad
    from .contexts import ContextType, attention_map_filename, export_attention_map
    from .pipeline.train import slice_batch

    ctx = _Context(cfg)
    net = _load_net(ctx, args)
    if args.target not in ctx.task_names or args.source not in ctx.task_names:
        raise UsageError(f"tasks must be among {ctx.task_names}")
    n = len(ctx.task_names)
    j = ctx.task_names.index(args.target) * n + ctx.task_names.index(args.source)
    ct = net.fixed_arch[j] if net.fixed_arch else ContextType.NONE
    if ct is ContextType.NONE:
        raise UsageError(f"block {args.target} <- {args.source} has no attention (context none)")
    if not 0 <= args.sample < len(ctx.test["image"]):
        raise UsageError("--sample outside the test split")
    cand = net.block(args.target, args.source).candidates[ct.value]
    cand.keep_attention = True
    batch = slice_batch(ctx.test, slice(args.sample, args.sample + 1))
    net.eval()
    with no_grad():
        fwd = net(batch["image"], labels=batch)
    attn = cand.last_attention[0]
    h, w = batch["image"].shape[2:]
    a_hat = None
    if ct in (ContextType.T_LABEL, ContextType.S_LABEL):
        owner = args.target if ct is ContextType.T_LABEL else args.source
        a_hat = fwd.a_hat[owner].data[0]
    for px in args.pixel:
        if not 0 <= px < h * w:
            raise UsageError(f"pixel {px} outside the {h}x{w} image")
        path = export_attention_map(attn[px], h, w, out / attention_map_filename(args.target, args.source, ct, px),
                                    a_hat)
        manifest.outputs.append(path.name)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "search": cmd_search,
    "retrain": cmd_retrain,
    "eval": cmd_eval,
    "importance": cmd_importance,
    "agreement": cmd_agreement,
    "gradcheck": cmd_gradcheck,
    "export-attn": cmd_export_attn,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atrc", description="Task-relational context distillation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config (defaults to the reference config)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="first seed; consecutive seeds follow")
        p.add_argument("--runs", type=int, help="number of seeds / runs / repetitions")
        return p

    p = add("gen-data", "export synthetic samples as PPM/PGM")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--split", choices=("train", "val", "test"), default="train")
    p = add("search", "architecture search runs and the voted configuration")
    p.add_argument("--workers", type=int, default=None, help=argparse.SUPPRESS)
    p = add("retrain", "train a fixed architecture from scratch and evaluate it")
    p.add_argument("--arch", help="architecture file from 'search'")
    p.add_argument("--reference", action="append",
                   help="metrics.json whose 'mean' table is the delta_m reference; repeat to merge "
                        "single-task baselines")
    for name, text in (("eval", "evaluate a checkpoint"), ("importance", "permutation importance of CP blocks")):
        p = add(name, text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--arch")
        p.add_argument("--reference", action="append")
    p = add("agreement", "agreement statistics between search runs")
    p.add_argument("arch_files", nargs="*")
    p.add_argument("--search-dir")
    p = add("gradcheck", "finite-difference check of the composed network")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--step", type=float, default=1e-7,
                   help="finite-difference step; small so ReLU kinks are rarely straddled")
    p.add_argument("--directions", type=int, default=24, help="random directions for the image gradient")
    p = add("export-attn", "write attention maps of one CP block as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--arch")
    p.add_argument("--target", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--pixel", type=int, action="append", required=True, help="flat pixel index (repeatable)")
    p.add_argument("--sample", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _limit_threads()
        if getattr(args, "workers", None) is None:
            args.workers = threads
        from .config import ConfigError, config_hash, load_config

        try:
            cfg = load_config(args.config)
        except ConfigError as exc:
            raise UsageError(str(exc)) from None
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"cannot create output directory {out}: {exc.strerror}") from None
        manifest = RunManifest(["atrc"] + argv, args.config, config_hash(cfg), cfg, [], str(out), _now())
        manifest.write()
        status = EXIT_OK
        try:
            COMMANDS[args.command](args, cfg, out, manifest)
            manifest.status = "ok"
        except CheckFailed as exc:
            manifest.status = f"failed: {exc}"
            print(f"atrc {args.command}: {exc}", file=sys.stderr)
            status = EXIT_FAIL
        except UsageError:
            manifest.status = "usage error"
            raise
        except (OSError, ValueError, FloatingPointError, KeyError, RuntimeError) as exc:
            manifest.status = f"error: {type(exc).__name__}: {exc}"
            print(f"atrc {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
            status = EXIT_FAIL
        finally:
            manifest.finished = _now()
            manifest.write()
        return status
    except UsageError as exc:
        print(f"atrc {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
