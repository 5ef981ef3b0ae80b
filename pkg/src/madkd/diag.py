"""Evaluation, per-source distillation losses, and the lagged-student JS probe."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import diffcore as dc
from . import losses
from .data import Dataset
from .models import ClassifierNet, load_checkpoint, sample_generator

METRICS_COLUMNS = ["epoch", "stage", "test_acc", "test_xent", "kd_gen", "kd_ema", "kd_mem",
                   "lr_student", "lr_generator"]
JS_COLUMNS = ["t", "js_gen", "js_ema", "n_samples"]


class MissingCheckpointError(FileNotFoundError):
    def __init__(self, stages: list[int], paths: list[Path]):
        super().__init__(f"missing checkpoints for stages {sorted(set(stages))}: "
                         + ", ".join(str(p) for p in paths))
        self.stages = sorted(set(stages))


@dataclass
class MetricsRecord:
    epoch: int
    stage: int
    test_acc: float
    test_xent: float
    kd_gen: float | None = None
    kd_ema: float | None = None
    kd_mem: float | None = None
    lr_student: float = 0.0
    lr_generator: float = 0.0


@dataclass
class JsProbeConfig:
    stages: list[int]
    tau: int
    batches: int = 4
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if not self.stages:
            raise ValueError("no probe stages given")
        if self.tau >= min(self.stages):
            raise ValueError(f"tau ({self.tau}) must be smaller than the first probed stage ({min(self.stages)})")


def evaluate(S: ClassifierNet, test: Dataset) -> tuple[float, float]:
    """Accuracy (argmax, lowest index wins ties) and mean cross-entropy in eval mode."""
    logits = S(test.inputs, mode="eval")
    acc = float(np.mean(np.argmax(logits.data, axis=1) == test.labels))
    xent = losses.nll_loss(logits, test.labels).item()
    return acc, xent


def track_stream_losses(S: ClassifierNet, sources: dict[str, np.ndarray], T: ClassifierNet) -> dict[str, float]:
    """KD loss of S against T on one frozen batch per source; touches no parameters or statistics."""
    out = {}
    for name, x in sources.items():
        t = T(x, mode="eval")
        s = S(x, mode="train", frozen=True)
        out[name] = losses.kd_loss(t, s).item()
    return out


def read_metrics(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def js_probe(run_dir, probe: JsProbeConfig, bn_mode: str = "train") -> list[dict]:
    """JS(student at t - tau, teacher) on fresh samples from G_t and from the EMA generator at t.

    Writes ``js_probe.csv`` into ``run_dir`` and returns its rows.  Runs
    without an EMA generator leave ``js_ema`` empty.
    """
    run = Path(run_dir)
    ck = run / "ckpt"
    needed, missing, missing_stages = {}, [], []
    has_ema = any(ck.glob("ema_t*.ckpt"))
    for t in probe.stages:
        paths = {"student": ck / f"student_t{t - probe.tau:06d}.ckpt", "gen": ck / f"generator_t{t:06d}.ckpt"}
        if has_ema:
            paths["ema"] = ck / f"ema_t{t:06d}.ckpt"
        for p in paths.values():
            if not p.exists():
                missing.append(p)
                missing_stages.append(t)
        needed[t] = paths
    if missing:
        raise MissingCheckpointError(missing_stages, missing)
    T = load_checkpoint(ck / "teacher.ckpt", expect="classifier")
    rows = []
    for t in probe.stages:
        paths = needed[t]
        S = load_checkpoint(paths["student"], expect="classifier")
        row = {"t": t, "js_gen": None, "js_ema": None, "n_samples": probe.batches * probe.batch_size}
        for key, tag in (("js_gen", "gen"), ("js_ema", "ema")):
            if tag not in paths:
                continue
            G = load_checkpoint(paths[tag], expect="generator")
            E = None
            if G.mode != "uncond":
                E = load_checkpoint(ck / f"{'embed' if tag == 'gen' else 'ema_embed'}_t{t:06d}.ckpt",
                                    expect="embedding")
            # both generators see the same noise and labels, so the comparison is paired
            rng = dc.rng_stream(probe.seed, "probe", t)
            vals = []
            for _ in range(probe.batches):
                _, x, _, _ = sample_generator(G, E, probe.batch_size, rng, rng, bn_mode)
                p = losses.softmax(S(x.data, mode="eval").data)
                q = losses.softmax(T(x.data, mode="eval").data)
                vals.append(losses.js_divergence(p, q))
            row[key] = float(np.mean(vals))
        rows.append(row)
    with open(run / "js_probe.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(JS_COLUMNS)
        for r in rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in JS_COLUMNS])
    return rows


def probe_config_for(run_dir, tau: int | None = None, stages: list[int] | None = None) -> JsProbeConfig:
    """Probe settings from a run's ``config.resolved``, optionally overridden."""
    from .trainer import probe_stages

    cfg = config_mod.load(Path(run_dir) / "config.resolved")
    return JsProbeConfig(stages or probe_stages(cfg), cfg.probe_tau if tau is None else tau,
                         cfg.probe_batches, cfg.bs, cfg.seed)
