"""Flat ``key = value`` experiment configuration.

Keys follow the usual hyper-parameter abbreviations (lr, wd, mo, bs, ld, ldep,
ep, spe, ...).  Resolution order: dataclass defaults, then a named preset,
then the config file, then command-line overrides.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DistillConfig:
    preset: str = "desk"
    seed: int = 0
    # dataset
    dataset: str = "blobs"
    n_classes: int = 8
    per_class: int = 500
    d_in: int = 2
    spread: float = 0.06
    test_fraction: float = 0.2
    # teacher pretraining
    t_hidden: list[int] = field(default_factory=lambda: [64, 64])
    t_lr: float = 0.1
    t_wd: float = 5e-4
    t_mo: float = 0.9
    t_bs: int = 128
    t_ld: float = 0.1
    t_ldep: list[int] = field(default_factory=lambda: [15, 25])
    t_ep: int = 30
    t_wep: int = 0
    # student
    s_hidden: list[int] = field(default_factory=lambda: [32, 32])
    s_bn: bool = True
    opt_s: str = "sgd"
    lr_s: float = 1e-2
    wd_s: float = 5e-4
    mo_s: float = 0.9
    n_s: int = 15
    # generator
    g_hidden: list[int] = field(default_factory=lambda: [64, 64])
    opt_g: str = "adam"
    lr_g: float = 1e-3
    wd_g: float = 5e-4
    n_g: int = 3
    d_z: int = 16
    d_e: int = 16
    cond: str = "uncond"
    pgs: int = 0
    # schedule
    bs: int = 128
    ep: int = 60
    spe: int = 20
    ld: float = 0.1
    ldep: list[int] = field(default_factory=lambda: [20, 40])
    wep: int = 0
    # method and loss coefficients
    method: str = "mad"
    alpha: float = 0.95
    lambda0: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.0
    lambda4: float = 0.0
    lambda5: float = 1.0
    zeta0: float = 0.01
    zeta1: float = 0.1
    zeta2: float = 0.1
    delta: float = 20.0
    nu: float = 20.0
    gamma: float = 1.1
    mem_capacity: int = 8192
    mem_fraction: float = 1.0
    ema_bn_mode: str = "train"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    # run outputs
    save_every: int = 20
    probe_every: int = 100
    probe_tau: int = 10
    probe_batches: int = 4
    sample_every: int = 200
    track_every: int = 20
    ablate_seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])

    @property
    def stages(self) -> int:
        return self.ep * self.spe

    def replace(self, **kw) -> "DistillConfig":
        cfg = dataclasses.replace(self, **kw)
        validate(cfg)
        return cfg


# Named presets (large-scale values kept for reference runs; "desk" is the default).
PRESETS: dict[str, dict] = {
    "desk": {},
    "desk_cond": {"cond": "sum", "lambda3": 0.1, "lambda4": 0.1, "lambda5": 0.0, "pgs": 50},
    "desk_rings": {"dataset": "rings", "t_hidden": [64, 64, 64], "t_ep": 60, "t_ldep": [30, 45]},
    "cifar": {"bs": 256, "ld": 0.1, "ldep": [100, 200], "ep": 300, "spe": 50, "d_z": 256, "alpha": 0.95,
              "cond": "uncond", "n_s": 60, "n_g": 3, "lr_s": 1e-2, "wd_s": 5e-4, "mo_s": 0.9,
              "lr_g": 1e-3, "wd_g": 5e-4, "lambda3": 0.0, "lambda4": 0.0, "lambda5": 1.0, "zeta0": 0.01,
              "t_lr": 0.1, "t_wd": 5e-4, "t_bs": 128, "t_ldep": [80, 120], "t_ep": 160},
    "imagenet": {"bs": 512, "ld": 1.0, "ldep": [], "ep": 6000, "spe": 1, "d_z": 256, "d_e": 256,
                 "cond": "sum", "gamma": 1.1, "pgs": 200, "opt_s": "adam", "lr_s": 1e-4, "wd_s": 1e-4,
                 "n_s": 150, "n_g": 20, "lr_g": 1e-4, "lambda3": 0.1, "lambda4": 0.1, "lambda5": 0.0,
                 "zeta0": 0.01},
}

_FIELD_TYPES = {f.name: f.type for f in fields(DistillConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "list[int]":
            return [int(v) for v in raw.replace(",", " ").split()] if raw else []
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_text(text: str, source: str = "<config>") -> dict:
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def parse_overrides(items: list[str]) -> dict:
    return parse_text("\n".join(items), "<--set>")


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> DistillConfig:
    file_values, overrides = dict(file_values or {}), dict(overrides or {})
    preset = overrides.get("preset", file_values.get("preset", "desk"))
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    merged = {**PRESETS[preset], **file_values, **overrides, "preset": preset}
    cfg = DistillConfig(**merged)
    validate(cfg)
    return cfg


def load(path, overrides: dict | None = None) -> DistillConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return resolve(parse_text(p.read_text(), str(p)), overrides)


def dumps(cfg: DistillConfig, notes: list[str] | None = None) -> str:
    lines = [f"# {n}" for n in notes or []]
    lines += [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def validate(cfg: DistillConfig) -> None:
    def need(cond: bool, msg: str):
        if not cond:
            raise ConfigError(msg)

    need(cfg.method in ("abm", "mem", "mad"), f"unknown method {cfg.method!r}")
    need(cfg.cond in ("uncond", "sum", "cat"), f"unknown conditioning {cfg.cond!r}")
    need(cfg.dataset in ("blobs", "rings"), f"unknown dataset {cfg.dataset!r}")
    need(0.0 <= cfg.alpha <= 1.0, "alpha must lie in [0, 1]")
    for k in ("lambda0", "lambda1", "lambda2", "lambda3", "lambda4", "lambda5", "zeta0", "zeta1", "zeta2"):
        need(getattr(cfg, k) >= 0, f"{k} must be non-negative")
    need(cfg.n_s >= 1 and cfg.n_g >= 1, "n_s and n_g must be >= 1")
    need(cfg.delta > 0 and cfg.nu > 0, "delta and nu must be positive")
    need(cfg.gamma >= 1, "gamma must be >= 1")
    need(cfg.method != "mad" or cfg.lambda0 + cfg.lambda1 > 0, "mad needs lambda0 + lambda1 > 0")
    need(cfg.method != "mem" or cfg.mem_capacity > 0, "mem method needs mem_capacity > 0")
    need(0 < cfg.mem_fraction <= 1, "mem_fraction must lie in (0, 1]")
    need(cfg.cond != "sum" or cfg.d_e == cfg.d_z, "sum conditioning needs d_e == d_z")
    need(cfg.cond != "uncond" or (cfg.lambda3 == 0 and cfg.lambda4 == 0),
         "lambda3/lambda4 need a conditional generator")
    need(cfg.bs >= 2 and cfg.ep >= 1 and cfg.spe >= 1, "bs >= 2, ep >= 1, spe >= 1 required")
    need(cfg.opt_s in ("sgd", "adam") and cfg.opt_g in ("sgd", "adam"), "optimizers are sgd or adam")
    need(cfg.ema_bn_mode in ("train", "eval"), "ema_bn_mode is train or eval")
    need(cfg.probe_tau >= 0, "probe_tau must be >= 0")
    need(0 < cfg.ld <= 1, "ld must lie in (0, 1]")
    need(all(b > a for a, b in zip(cfg.ldep, cfg.ldep[1:])), "ldep must be strictly increasing")
    need(cfg.n_classes >= 2, "n_classes must be >= 2")
