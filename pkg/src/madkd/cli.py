"""Command-line entry point: ``madkd <command> ...``.

Exit codes: 0 success, 2 configuration/usage error, 3 numerical abort,
4 missing or unreadable artifact.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as config_mod
from . import diffcore as dc
from .config import ConfigError, DistillConfig
from .data import make_dataset, read_csv, write_csv
from .diag import MissingCheckpointError, evaluate, js_probe, probe_config_for
from .models import CheckpointError, load_checkpoint, sample_generator, save_checkpoint
from .trainer import TrainingAbort, fit_teacher, run_distillation

EXIT_CONFIG, EXIT_ABORT, EXIT_MISSING = 2, 3, 4

ABLATE_AXES = ("alpha", "lambda01", "ns", "conditioning")


class UsageError(Exception):
    pass


def _load_config(path: str | None, sets: list[str], seed: int | None) -> DistillConfig:
    overrides = config_mod.parse_overrides(sets or [])
    if seed is not None:
        overrides["seed"] = seed
    if path is None:
        return config_mod.resolve({}, overrides)
    return config_mod.load(path, overrides)


def cmd_pretrain_teacher(args) -> int:
    cfg = _load_config(args.config, args.set, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    T, _, test, history = fit_teacher(cfg)
    save_checkpoint(T, out / "teacher.ckpt")
    write_csv(test, out / "test.csv")
    (out / "config.resolved").write_text(config_mod.dumps(cfg))
    with open(out / "teacher_log.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(history[0]))
        w.writeheader()
        w.writerows(history)
    acc, xent = evaluate(T, test)
    print(f"teacher test accuracy {acc:.4f} cross-entropy {xent:.4f}")
    return 0


def _method_overrides(cfg: DistillConfig, method: str | None) -> tuple[DistillConfig, list[str]]:
    notes = []
    if method is not None and method != cfg.method:
        notes.append(f"--method {method} overrides method = {cfg.method}")
        cfg = cfg.replace(method=method)
    if cfg.method == "abm" and cfg.lambda1 != 0:
        notes.append(f"method abm forces lambda1 = 0 (configured {cfg.lambda1!r})")
        cfg = cfg.replace(lambda1=0.0)
    return cfg, notes


def _test_split(teacher: Path, cfg: DistillConfig):
    """The teacher run's saved test split when present, otherwise the regenerated one."""
    saved = teacher.parent / "test.csv"
    if saved.is_file():
        return read_csv(saved)
    return make_dataset(cfg)[1]


def distill(cfg: DistillConfig, teacher, out, notes=None) -> Path:
    teacher = Path(teacher)
    if not teacher.is_file():
        raise FileNotFoundError(f"teacher checkpoint not found: {teacher}")
    return run_distillation(teacher, _test_split(teacher, cfg), cfg, out, notes)


def cmd_distill(args) -> int:
    cfg = _load_config(args.config, args.set, args.seed)
    cfg, notes = _method_overrides(cfg, args.method)
    run = distill(cfg, args.teacher, args.out, notes)
    rows = list(csv.DictReader(open(run / "metrics.csv")))
    print(f"{cfg.method}: final student test accuracy {float(rows[-1]['test_acc']):.4f} -> {run}")
    return 0


def cmd_js_probe(args) -> int:
    stages = [int(s) for s in args.stages.replace(",", " ").split()] if args.stages else None
    try:
        probe = probe_config_for(args.rundir, args.tau, stages)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rows = js_probe(args.rundir, probe)
    for r in rows:
        ema = "" if r["js_ema"] is None else f"{r['js_ema']:.6g}"
        print(f"t={r['t']} js_gen={r['js_gen']:.6g} js_ema={ema}")
    return 0


def cmd_export_samples(args) -> int:
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    G = load_checkpoint(args.generator, expect="generator")
    E = load_checkpoint(args.embeddings, expect="embedding") if args.embeddings else None
    if G.mode == "uncond" and args.cls is not None:
        raise UsageError("--class needs a conditional generator")
    if G.mode != "uncond" and E is None:
        raise UsageError(f"{G.mode} generator needs --embeddings")
    if E is not None and args.cls is not None and not 0 <= args.cls < E.n_classes:
        raise UsageError(f"--class must lie in [0, {E.n_classes})")
    labelled = G.mode != "uncond"
    if args.n == 0:
        write_csv(np.zeros((0, G.d_out)), args.out, np.zeros(0, dtype=int) if labelled else None)
        return 0
    if args.bn_mode == "train" and args.n < 2:
        raise UsageError("train-mode BatchNorm needs --n >= 2 (or --bn-mode eval)")
    rng = dc.rng_stream(args.seed, "export")
    fixed = None if args.cls is None else np.full(args.n, args.cls)
    _, x, y, _ = sample_generator(G, E, args.n, rng, rng, args.bn_mode, labels=fixed)
    write_csv(x.data, args.out, y)
    return 0


def _parse_axis_values(axis: str, values: list[str]) -> list:
    if not values:
        raise UsageError("--values needs at least one value")
    try:
        if axis == "alpha":
            return [float(v) for v in values]
        if axis == "ns":
            return [int(v) for v in values]
        if axis == "lambda01":
            out = []
            for v in values:
                l0, l1 = v.split(",")
                out.append((float(l0), float(l1)))
            return out
    except ValueError:
        raise UsageError(f"cannot parse --values for axis {axis}: {values}") from None
    bad = [v for v in values if v not in ("uncond", "sum", "cat")]
    if bad:
        raise UsageError(f"unknown conditioning modes {bad}")
    return list(values)


def axis_overrides(axis: str, value) -> dict:
    if axis == "alpha":
        return {"alpha": value}
    if axis == "ns":
        return {"n_s": value}
    if axis == "lambda01":
        return {"lambda0": value[0], "lambda1": value[1]}
    if value == "uncond":
        return {"cond": "uncond", "lambda3": 0.0, "lambda4": 0.0}
    return {"cond": value}


def _value_tag(value) -> str:
    return "_".join(str(v) for v in value) if isinstance(value, tuple) else str(value)


def _ablate_one(job) -> tuple[str, int, float]:
    cfg, teacher, out, tag = job
    run = distill(cfg, teacher, out)
    rows = list(csv.DictReader(open(run / "metrics.csv")))
    return tag, cfg.seed, float(rows[-1]["test_acc"])


def cmd_ablate(args) -> int:
    if args.axis not in ABLATE_AXES:
        raise UsageError(f"unknown axis {args.axis!r}")
    values = _parse_axis_values(args.axis, args.values)
    base = _load_config(args.config, args.set, None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    teacher = Path(args.teacher) if args.teacher else None
    if teacher is None:
        T, _, test, _ = fit_teacher(base)
        teacher = out / "teacher" / "teacher.ckpt"
        teacher.parent.mkdir(exist_ok=True)
        save_checkpoint(T, teacher)
        write_csv(test, teacher.parent / "test.csv")
    jobs = []
    for value in values:
        cfg = base.replace(**axis_overrides(args.axis, value))
        for seed in base.ablate_seeds:
            tag = _value_tag(value)
            jobs.append((cfg.replace(seed=seed), teacher, out / f"{args.axis}_{tag}" / f"seed{seed}", tag))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_ablate_one, jobs))
    else:
        results = [_ablate_one(j) for j in jobs]
    table = out / f"ablate_{args.axis}.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([args.axis, "n_seeds", "mean_acc", "sd_acc"])
        for value in values:
            tag = _value_tag(value)
            accs = np.array([a for t, _, a in results if t == tag])
            sd = float(accs.std(ddof=1)) if len(accs) > 1 else 0.0
            w.writerow([tag, len(accs), repr(float(accs.mean())), repr(sd)])
            print(f"{args.axis}={tag}: {accs.mean():.4f} +- {sd:.4f} over {len(accs)} seeds")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="madkd", description="Data-free distillation with an EMA generator.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="flat key = value config file (defaults to the desk preset)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("pretrain-teacher", help="train a teacher on the configured synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_teacher)

    p = sub.add_parser("distill", help="run data-free distillation from a teacher checkpoint")
    common(p)
    p.add_argument("--method", choices=("abm", "mem", "mad"))
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("js-probe", help="JS divergence of a lagged student on G and EMA samples")
    p.add_argument("--rundir", required=True)
    p.add_argument("--tau", type=int)
    p.add_argument("--stages", help="comma separated stage list (defaults to the run's probe stages)")
    p.set_defaults(func=cmd_js_probe)

    p = sub.add_parser("export-samples", help="write synthetic samples from a generator checkpoint as CSV")
    p.add_argument("--generator", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--class", dest="cls", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bn-mode", choices=("train", "eval"), default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_samples)

    p = sub.add_parser("ablate", help="one distillation per axis value and seed, summarized as mean +- sd")
    common(p, seed=False)
    p.add_argument("--axis", required=True, choices=ABLATE_AXES)
    p.add_argument("--values", nargs="*", default=[])
    p.add_argument("--teacher", help="teacher checkpoint (trained from the config when omitted)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("MAD_NUM_THREADS", "").strip()
    if threads and not (threads.isdigit() and int(threads) > 0):
        print(f"error: MAD_NUM_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(int(threads) if threads else None):
            return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAbort as exc:
        where = "" if exc.stage is None else f" at stage {exc.stage}"
        print(f"aborted{where}: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (MissingCheckpointError, FileNotFoundError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
