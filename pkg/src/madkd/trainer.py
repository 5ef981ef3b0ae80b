"""Teacher pretraining and the alternating generator/student distillation loop.

Three methods share one loop:

* ``abm``  - student trains on fresh generator samples only;
* ``mem``  - plus a batch replayed from a FIFO memory bank of past samples;
* ``mad``  - plus a batch from an EMA copy of the generator, updated once per
  stage between the generator and student stages.
"""
from __future__ import annotations

import csv
import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import diffcore as dc
from . import losses
from .config import DistillConfig
from .data import Dataset, write_csv
from .diag import METRICS_COLUMNS, evaluate, track_stream_losses
from .models import (ClassifierNet, EmaState, EmbeddingTable, GeneratorNet, build_classifier,
                     build_generator, ema_init, ema_update, load_checkpoint, sample_generator,
                     save_checkpoint)
from .optim import LrSchedule, OptimState, lr_at, step

log = logging.getLogger(__name__)


class TrainingAbort(RuntimeError):
    def __init__(self, msg: str, stage: int | None = None):
        super().__init__(msg)
        self.stage = stage


class MemoryBank:
    """FIFO ring buffer of synthetic input rows."""

    def __init__(self, capacity: int, dim: int):
        if capacity <= 0:
            raise ValueError("memory capacity must be positive")
        self.capacity = capacity
        self.rows = np.zeros((capacity, dim))
        self.cursor = 0
        self.occupancy = 0

    def __len__(self) -> int:
        return self.occupancy

    def push(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        if len(x) >= self.capacity:
            x = x[-self.capacity:]
        n = len(x)
        idx = (self.cursor + np.arange(n)) % self.capacity
        self.rows[idx] = x
        self.cursor = int((self.cursor + n) % self.capacity)
        self.occupancy = min(self.capacity, self.occupancy + n)

    def contents(self) -> np.ndarray:
        """Stored rows, oldest first."""
        if self.occupancy < self.capacity:
            return self.rows[: self.occupancy].copy()
        return np.roll(self.rows, -self.cursor, axis=0).copy()

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray | None:
        """Uniform draw without replacement; ``None`` when empty."""
        if self.occupancy == 0:
            return None
        idx = rng.choice(self.occupancy, size=min(n, self.occupancy), replace=False)
        return self.rows[idx].copy()


@dataclass
class StageReport:
    stage: int
    student: dict[str, float] = field(default_factory=dict)
    generator: dict[str, float] = field(default_factory=dict)
    wall_time: float = 0.0


@dataclass
class Streams:
    """Named RNG streams derived from the single run seed."""

    seed: int

    def __post_init__(self):
        for name in ("init", "noise", "labels", "ema", "memory", "probe", "export"):
            setattr(self, name, dc.rng_stream(self.seed, name))


def _mean_dicts(rows: list[dict[str, float]]) -> dict[str, float]:
    keys = rows[0].keys() if rows else []
    return {k: float(np.mean([r[k] for r in rows if k in r])) for k in keys}


def freeze(net) -> None:
    for p in net.params.values():
        p.requires_grad = False


def _running_moments(T: ClassifierNet):
    return [(bn.running_mean, bn.running_var) for bn in T.bns]


# ---- teacher ---------------------------------------------------------------------------

def pretrain_teacher(net: ClassifierNet, train: Dataset, cfg: DistillConfig, rng: np.random.Generator,
                     test: Dataset | None = None) -> tuple[ClassifierNet, list[dict]]:
    """Cross-entropy training with SGD-momentum and the step schedule; returns a frozen net and a log."""
    if len(train) == 0:
        raise ValueError("empty training split")
    opt = OptimState("sgd", cfg.t_lr, cfg.t_wd, cfg.t_mo)
    sched = LrSchedule(cfg.t_lr, cfg.t_ld, list(cfg.t_ldep), cfg.t_wep)
    n_batches = max(1, int(np.ceil(len(train) / cfg.t_bs)))
    history = []
    for epoch in range(cfg.t_ep):
        order = rng.permutation(len(train))
        losses_ep, big = [], []
        for b in range(n_batches):
            idx = order[b * cfg.t_bs:(b + 1) * cfg.t_bs]
            if len(idx) < 2:
                continue
            opt.lr = lr_at(sched, epoch + b / n_batches)
            try:
                logits, _ = net.forward(train.inputs[idx], mode="train")
                loss = losses.nll_loss(logits, train.labels[idx])
                grads = dc.gradients(loss, net.params)
            except dc.NonFiniteError as exc:
                raise TrainingAbort(f"teacher epoch {epoch}: {exc}") from exc
            step(net.params, grads, opt)
            losses_ep.append(loss.item())
            big.append(float(np.mean(np.abs(logits.data) > cfg.delta)))
        row = {"epoch": epoch, "loss": float(np.mean(losses_ep)), "frac_logit_over_delta": float(np.mean(big)),
               "lr": opt.lr}
        if test is not None:
            row["test_acc"], row["test_xent"] = evaluate(net, test)
        history.append(row)
        log.info("teacher epoch %d %s", epoch, row)
    freeze(net)
    return net, history


def fit_teacher(cfg: DistillConfig) -> tuple[ClassifierNet, Dataset, Dataset, list[dict]]:
    """Build the configured dataset and train a teacher on its train split."""
    from .data import make_dataset

    train, test = make_dataset(cfg)
    net = build_classifier(cfg.d_in, cfg.t_hidden, cfg.n_classes, dc.rng_stream(cfg.seed, "init"),
                           bn_momentum=cfg.bn_momentum, bn_eps=cfg.bn_eps)
    net, history = pretrain_teacher(net, train, cfg, dc.rng_stream(cfg.seed, "data", 1), test)
    return net, train, test, history


# ---- generator -------------------------------------------------------------------------

def _generator_step(G, E, S, T, cfg, opt: OptimState, rngs: Streams, lam2: float | None = None):
    u, x, y, e_y = sample_generator(G, E, cfg.bs, rngs.noise, rngs.labels, "train", train=True,
                                    update_stats=True)
    t_logits, moments = T.forward(x, mode="eval", with_moments=cfg.lambda5 > 0)
    s_logits = S(x, mode="eval", frozen=True)
    lcfg = cfg if lam2 is None else cfg.replace(lambda2=lam2)
    br = losses.generator_loss(t_logits, s_logits, u, y, e_y, moments if T.bns else [],
                               _running_moments(T), lcfg)
    params = dict(G.params)
    if E is not None:
        params.update(E.params)
    step(params, dc.gradients(br.total, params), opt)
    return br.as_dict()


def generator_stage(G: GeneratorNet, E: EmbeddingTable | None, S: ClassifierNet, T: ClassifierNet,
                    cfg: DistillConfig, opt: OptimState, rngs: Streams) -> dict[str, float]:
    """``n_g`` steps of the generator (and embeddings) on the generator loss; S and T stay fixed."""
    return _mean_dicts([_generator_step(G, E, S, T, cfg, opt, rngs) for _ in range(cfg.n_g)])


def pretrain_generator(G: GeneratorNet, E: EmbeddingTable | None, T: ClassifierNet, S: ClassifierNet,
                       cfg: DistillConfig, opt: OptimState, rngs: Streams):
    """``pgs`` steps on the generator loss with the KD coefficient forced to zero.

    Returns ``(G, E, history)`` where history holds the per-step loss breakdowns.
    """
    if G.mode == "uncond" or E is None:
        raise ValueError("generator pretraining needs a conditional generator")
    if cfg.pgs <= 0:
        raise ValueError("pgs must be positive")
    history = [_generator_step(G, E, S, T, cfg, opt, rngs, lam2=0.0) for _ in range(cfg.pgs)]
    return G, E, history


# ---- student ---------------------------------------------------------------------------

def _use_second_stream(cfg: DistillConfig) -> str | None:
    if cfg.method == "mad" and cfg.lambda1 > 0:
        return "ema"
    if cfg.method == "mem" and cfg.lambda1 > 0:
        return "mem"
    return None


def student_stage(S: ClassifierNet, G: GeneratorNet, E: EmbeddingTable | None, ema: EmaState | None,
                  T: ClassifierNet, bank: MemoryBank | None, cfg: DistillConfig, opt: OptimState,
                  rngs: Streams) -> dict[str, float]:
    """``n_s`` student steps; generators, embeddings and teacher are held fixed."""
    second = _use_second_stream(cfg)
    rows = []
    for _ in range(cfg.n_s):
        _, xg, _, _ = sample_generator(G, E, cfg.bs, rngs.noise, rngs.labels, "train")
        xg = xg.data
        x2 = None
        if second == "ema":
            x2 = sample_generator(ema.generator, ema.embeddings, cfg.bs, rngs.ema, rngs.ema,
                                  cfg.ema_bn_mode)[1].data
        elif second == "mem":
            x2 = bank.sample(max(2, int(round(cfg.bs * cfg.mem_fraction))), rngs.memory)
        s_g = S(xg, mode="train")
        t_2 = s_2 = None
        if x2 is not None and len(x2) >= 2:
            # the frozen teacher is row-wise in eval mode, so one pass serves both batches
            t_all = T(np.concatenate([xg, x2]), mode="eval").data
            t_g, t_2 = dc.Tensor(t_all[:len(xg)]), dc.Tensor(t_all[len(xg):])
            s_2 = S(x2, mode="train")
        else:
            t_g = T(xg, mode="eval")
        br = losses.student_loss(t_g, s_g, t_2, s_2, cfg, second or "ema")
        step(S.params, dc.gradients(br.total, S.params), opt)
        if cfg.method == "mem":
            bank.push(xg)
        rows.append(br.as_dict())
    return _mean_dicts(rows)


# ---- full run --------------------------------------------------------------------------

def probe_stages(cfg: DistillConfig) -> list[int]:
    if cfg.probe_every <= 0:
        return []
    return [t for t in range(cfg.probe_every, cfg.stages + 1, cfg.probe_every) if t > cfg.probe_tau]


def _save_models(ckdir: Path, t, S=None, G=None, E=None, ema: EmaState | None = None) -> None:
    tag = t if isinstance(t, str) else f"t{t:06d}"
    if S is not None:
        save_checkpoint(S, ckdir / f"student_{tag}.ckpt")
    if G is not None:
        save_checkpoint(G, ckdir / f"generator_{tag}.ckpt")
        if E is not None:
            save_checkpoint(E, ckdir / f"embed_{tag}.ckpt")
        if ema is not None:
            save_checkpoint(ema.generator, ckdir / f"ema_{tag}.ckpt")
            if ema.embeddings is not None:
                save_checkpoint(ema.embeddings, ckdir / f"ema_embed_{tag}.ckpt")


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def build_student(cfg: DistillConfig, T: ClassifierNet, rng) -> ClassifierNet:
    return build_classifier(T.d_in, cfg.s_hidden, T.n_classes, rng, use_bn=cfg.s_bn,
                            bn_momentum=cfg.bn_momentum, bn_eps=cfg.bn_eps)


def run_distillation(teacher_ckpt, test: Dataset, cfg: DistillConfig, out_dir, notes: list[str] | None = None,
                     progress=None) -> Path:
    """Data-free distillation from a teacher checkpoint; the test split is used for evaluation only.

    Writes ``config.resolved``, ``metrics.csv``, ``stream_losses.csv``,
    ``summary.json``, ``ckpt/`` and ``samples/`` under ``out_dir``.
    """
    config_mod.validate(cfg)
    out = Path(out_dir)
    ckdir, sdir = out / "ckpt", out / "samples"
    ckdir.mkdir(parents=True, exist_ok=True)
    sdir.mkdir(exist_ok=True)
    (out / "config.resolved").write_text(config_mod.dumps(cfg, notes))
    shutil.copyfile(teacher_ckpt, ckdir / "teacher.ckpt")

    T = load_checkpoint(teacher_ckpt, expect="classifier")
    freeze(T)
    rngs = Streams(cfg.seed)
    S = build_student(cfg, T, rngs.init)
    G, E = build_generator(cfg.d_z, cfg.d_e, cfg.g_hidden, T.d_in, cfg.cond, rngs.init, n_classes=T.n_classes,
                           bn_momentum=cfg.bn_momentum, bn_eps=cfg.bn_eps)
    opt_s = OptimState(cfg.opt_s, cfg.lr_s, cfg.wd_s, cfg.mo_s)
    opt_g = OptimState(cfg.opt_g, cfg.lr_g, cfg.wd_g, 0.0)
    sched_s = LrSchedule(cfg.lr_s, cfg.ld, list(cfg.ldep), cfg.wep)
    sched_g = LrSchedule(cfg.lr_g, cfg.ld, list(cfg.ldep), cfg.wep)
    bank = MemoryBank(cfg.mem_capacity, T.d_in) if cfg.method == "mem" else None

    pretrain_log = None
    if cfg.cond != "uncond" and cfg.pgs > 0:
        _, _, hist = pretrain_generator(G, E, T, S, cfg, opt_g, rngs)
        pretrain_log = {"nll_first": hist[0]["nll"], "nll_last": hist[-1]["nll"]}
    ema = ema_init(G, E, cfg.alpha) if cfg.method == "mad" else None
    second = _use_second_stream(cfg)
    probes = set(probe_stages(cfg))
    student_saves = {t - cfg.probe_tau for t in probes}

    metrics_f = open(out / "metrics.csv", "w", newline="")
    streams_f = open(out / "stream_losses.csv", "w", newline="")
    metrics = csv.writer(metrics_f)
    streams = csv.writer(streams_f)
    metrics.writerow(METRICS_COLUMNS)
    streams.writerow(["stage", "source", "kd_before", "kd_after"])
    summary: dict = {"method": cfg.method, "seed": cfg.seed, "stages": cfg.stages,
                     "teacher_test_acc": evaluate(T, test)[0], "pretrain_generator": pretrain_log}
    t, start, epoch_rows = 0, time.perf_counter(), []
    try:
        for epoch in range(cfg.ep):
            opt_s.lr, opt_g.lr = lr_at(sched_s, epoch), lr_at(sched_g, epoch)
            kd = {"kd_gen": [], "kd_ema": [], "kd_mem": []}
            for _ in range(cfg.spe):
                t += 1
                try:
                    generator_stage(G, E, S, T, cfg, opt_g, rngs)
                    if ema is not None:
                        ema_update(ema, G, E)
                    tracked = None
                    if cfg.track_every > 0 and t % cfg.track_every == 0:
                        tracked = _frozen_batches(G, E, ema if second == "ema" else None,
                                                  bank if second == "mem" else None, cfg, rngs)
                        before = track_stream_losses(S, tracked, T)
                    srep = student_stage(S, G, E, ema, T, bank, cfg, opt_s, rngs)
                except dc.NonFiniteError as exc:
                    raise TrainingAbort(f"stage {t}: {exc}", stage=t) from exc
                for k in kd:
                    if k in srep:
                        kd[k].append(srep[k])
                if tracked:
                    after = track_stream_losses(S, tracked, T)
                    for src in tracked:
                        streams.writerow([t, src, _fmt(before[src]), _fmt(after[src])])
                if cfg.save_every > 0 and t % cfg.save_every == 0:
                    _save_models(ckdir, t, S, G, E, ema)
                else:
                    if t in student_saves:
                        _save_models(ckdir, t, S=S)
                    if t in probes:
                        _save_models(ckdir, t, G=G, E=E, ema=ema)
                if cfg.sample_every > 0 and t % cfg.sample_every == 0:
                    _dump_samples(sdir, t, G, E, ema, cfg)
                if progress is not None:
                    progress(t)
            acc, xent = evaluate(S, test)
            row = [epoch, t, acc, xent] + [np.mean(kd[k]) if kd[k] else None for k in kd] + [opt_s.lr, opt_g.lr]
            epoch_rows.append(row)
            metrics.writerow([_fmt(v) for v in row])
            metrics_f.flush()
            log.info("epoch %d stage %d acc %.4f xent %.4f", epoch, t, acc, xent)
    except TrainingAbort as exc:
        summary.update(error=str(exc), aborted_stage=exc.stage)
        raise
    finally:
        metrics_f.close()
        streams_f.close()
        _save_models(ckdir, "final", S, G, E, ema)
        summary.update(
            final_test_acc=epoch_rows[-1][2] if epoch_rows else None,
            final_test_xent=epoch_rows[-1][3] if epoch_rows else None,
            completed_stages=t, ema_updates=ema.updates if ema is not None else 0,
            probe_stages=sorted(probes), probe_tau=cfg.probe_tau,
            wall_time=time.perf_counter() - start)
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return out


def _frozen_batches(G, E, ema, bank, cfg, rngs) -> dict[str, np.ndarray]:
    batches = {"gen": sample_generator(G, E, cfg.bs, rngs.probe, rngs.probe)[1].data}
    if ema is not None:
        batches["ema"] = sample_generator(ema.generator, ema.embeddings, cfg.bs, rngs.probe, rngs.probe,
                                          cfg.ema_bn_mode)[1].data
    if bank is not None and len(bank) >= 2:
        batches["mem"] = bank.sample(cfg.bs, rngs.probe)
    return batches


def _dump_samples(sdir: Path, t: int, G, E, ema, cfg) -> None:
    rng = dc.rng_stream(cfg.seed, "export", t)
    _, x, y, _ = sample_generator(G, E, cfg.bs, rng, rng)
    write_csv(x.data, sdir / f"gen_t{t:06d}.csv", y)
    if ema is not None:
        _, x, y, _ = sample_generator(ema.generator, ema.embeddings, cfg.bs, rng, rng, cfg.ema_bn_mode)
        write_csv(x.data, sdir / f"ema_t{t:06d}.csv", y)
