"""Distillation objectives and the JS-divergence probe.

All losses reduce by batch mean and return graph tensors, so the caller
decides which parameters receive gradients by what it leaves unfrozen.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import rel_entr

from . import diffcore as dc
from .diffcore import Tensor


class LossConfigError(ValueError):
    pass


@dataclass
class LossBreakdown:
    """Named loss components, their weights, and the weighted total (a graph tensor)."""

    components: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)
    total: Tensor = field(default_factory=lambda: Tensor(0.0))

    def recompose(self) -> float:
        return float(np.sum([self.weights[k] * self.components[k] for k in self.weights]))

    def as_dict(self) -> dict[str, float]:
        return {**self.components, "total": self.total.item()}


def _weighted_total(terms: list[tuple[str, float, Tensor]]) -> tuple[Tensor, dict, dict]:
    comps = {name: t.item() for name, _, t in terms}
    weights = {name: w for name, w, _ in terms if w != 0.0}
    total: Tensor = Tensor(0.0)
    for name, w, t in terms:
        if w != 0.0:
            total = dc.add(total, dc.mul(t, w))
    return total, comps, weights


def kd_loss(t_logits: Tensor, s_logits: Tensor) -> Tensor:
    """Batch mean of KL(softmax(t) || softmax(s)), computed in log space."""
    if t_logits.shape != s_logits.shape:
        raise dc.ShapeError(f"kd_loss: {t_logits.shape} vs {s_logits.shape}")
    log_t = dc.log_softmax(t_logits)
    log_s = dc.log_softmax(s_logits)
    p = dc.exp(log_t)
    return dc.mean(dc.sum(dc.mul(p, dc.sub(log_t, log_s)), axis=1))


def nll_loss(t_logits: Tensor, y) -> Tensor:
    """Batch mean of -log softmax(t)[y]; labels are 0-based class indices."""
    y = np.asarray(y, dtype=np.int64)
    n, c = t_logits.shape
    if y.shape != (n,):
        raise dc.ShapeError(f"nll_loss: expected {n} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"nll_loss: labels must lie in [0, {c - 1}]")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0
    return dc.mul(dc.sum(dc.mul(dc.log_softmax(t_logits), onehot)), -1.0 / n)


def norm_reg_loss(e_y: Tensor, gamma: float) -> Tensor:
    """Batch mean of max(||e_y||_2 - gamma * sqrt(d_e), 0)."""
    d_e = e_y.shape[1]
    return dc.mean(dc.relu(dc.sub(dc.norm_rows(e_y), gamma * np.sqrt(d_e))))


def bnmm_loss(batch_moments, running_moments) -> Tensor:
    """Sum over BN layers of squared L2 gaps between batch and running (mean, var)."""
    if len(batch_moments) != len(running_moments):
        raise ValueError(f"bnmm_loss: {len(batch_moments)} batch layers vs {len(running_moments)} running")
    total: Tensor = Tensor(0.0)
    for (mu, var), (r_mu, r_var) in zip(batch_moments, running_moments):
        dm = dc.sub(mu, np.asarray(r_mu))
        dv = dc.sub(var, np.asarray(r_var))
        total = dc.add(total, dc.add(dc.sum(dc.mul(dm, dm)), dc.sum(dc.mul(dv, dv))))
    return total


def clamp_penalty(v: Tensor, bound: float) -> Tensor:
    """Mean over elements of max(|v| - bound, 0)."""
    if bound <= 0:
        raise ValueError("clamp bound must be positive")
    return dc.mean(dc.relu(dc.sub(dc.absolute(v), bound)))


def student_loss(t_logits_G: Tensor, s_logits_G: Tensor, t_logits_2: Tensor | None,
                 s_logits_2: Tensor | None, cfg, second: str = "ema") -> LossBreakdown:
    """lambda0 * [KD + zeta0 * clamp] on G samples + lambda1 * [KD + zeta0 * clamp] on the second stream.

    The second stream is the EMA generator (``second="ema"``) or the memory
    bank (``second="mem"``); passing ``None`` drops the term entirely.
    """
    lam0, lam1, zeta0, delta = cfg.lambda0, cfg.lambda1, cfg.zeta0, cfg.delta
    if lam0 < 0 or lam1 < 0:
        raise LossConfigError("lambda0 and lambda1 must be non-negative")
    terms = [("kd_gen", lam0, kd_loss(t_logits_G, s_logits_G)),
             ("clamp_student", lam0 * zeta0, clamp_penalty(s_logits_G, delta))]
    if t_logits_2 is not None:
        terms += [(f"kd_{second}", lam1, kd_loss(t_logits_2, s_logits_2)),
                  (f"clamp_student_{second}", lam1 * zeta0, clamp_penalty(s_logits_2, delta))]
    total, comps, weights = _weighted_total(terms)
    return LossBreakdown(comps, weights, total)


def generator_loss(t_logits: Tensor, s_logits: Tensor, u: Tensor, y, e_y: Tensor | None,
                   bn_moments, running_moments, cfg) -> LossBreakdown:
    """-lambda2*KD + lambda3*NLL + lambda4*NormReg + zeta1*clamp(T) + zeta2*clamp(u) + lambda5*BNmm."""
    conditional = y is not None and e_y is not None
    if not conditional and (cfg.lambda3 > 0 or cfg.lambda4 > 0):
        raise LossConfigError("NLL / norm-regularization terms need a conditional generator")
    terms = [("kd_gen", -cfg.lambda2, kd_loss(t_logits, s_logits)),
             ("clamp_teacher", cfg.zeta1, clamp_penalty(t_logits, cfg.delta)),
             ("clamp_gen_logit", cfg.zeta2, clamp_penalty(u, cfg.nu))]
    if conditional:
        terms += [("nll", cfg.lambda3, nll_loss(t_logits, y)),
                  ("norm_reg", cfg.lambda4, norm_reg_loss(e_y, cfg.gamma))]
    if bn_moments:
        terms.append(("bnmm", cfg.lambda5, bnmm_loss(bn_moments, running_moments)))
    elif cfg.lambda5 > 0:
        raise LossConfigError("BNmm loss requested but the teacher has no BatchNorm layers")
    total, comps, weights = _weighted_total(terms)
    return LossBreakdown(comps, weights, total)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Batch mean Jensen-Shannon divergence (natural log) between probability rows."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise dc.ShapeError(f"js_divergence: {p.shape} vs {q.shape}")
    for name, a in (("p", p), ("q", q)):
        if np.any(a < 0) or np.any(np.abs(a.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError(f"js_divergence: rows of {name} are not probability vectors")
    m = 0.5 * (p + q)
    js = 0.5 * rel_entr(p, m).sum(axis=1) + 0.5 * rel_entr(q, m).sum(axis=1)
    return float(np.mean(js))
