"""Classifier and generator networks, class embeddings, EMA tracking, checkpoints."""
from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import BatchNormState, Tensor

MODES = ("uncond", "sum", "cat")
ACTIVATIONS = ("relu", "leaky_relu", "sigmoid")


def _init_dense(rng: np.random.Generator, d_in: int, d_out: int) -> tuple[Tensor, Tensor]:
    # fan-in scaled uniform, as in the usual Linear default
    bound = 1.0 / np.sqrt(d_in)
    W = rng.uniform(-bound, bound, size=(d_in, d_out))
    b = rng.uniform(-bound, bound, size=d_out)
    return Tensor(W, True), Tensor(b, True)


class Net:
    """Shared parameter/buffer bookkeeping for the two network kinds."""

    kind = "net"
    params: dict[str, Tensor]
    bns: list[BatchNormState]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, bn in enumerate(self.bns):
            out[f"bn{i}.running_mean"] = bn.running_mean
            out[f"bn{i}.running_var"] = bn.running_var
        return out

    def set_buffers(self, bufs: dict[str, np.ndarray]) -> None:
        for i, bn in enumerate(self.bns):
            bn.running_mean = np.array(bufs[f"bn{i}.running_mean"], dtype=np.float64)
            bn.running_var = np.array(bufs[f"bn{i}.running_var"], dtype=np.float64)

    def state(self) -> dict[str, np.ndarray]:
        """All parameters and running statistics as plain arrays (copies)."""
        out = {k: p.data.copy() for k, p in self.params.items()}
        out.update({k: v.copy() for k, v in self.buffers().items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise dc.ShapeError(f"{k}: expected {p.shape}, got {state[k].shape}")
            p.data = np.array(state[k], dtype=np.float64)
        self.set_buffers(state)

    def clone(self):
        return copy.deepcopy(self)

    def _p(self, name: str, frozen: bool) -> Tensor:
        p = self.params[name]
        return Tensor(p.data) if frozen else p

    def _bn(self, h: Tensor, i: int, mode: str, frozen: bool, update_stats: bool, moments: list | None):
        bn = self.bns[i]
        y, mu, var = dc.batchnorm(h, bn, mode, update_stats and not frozen,
                                  self._p(f"bn{i}.scale", frozen), self._p(f"bn{i}.shift", frozen),
                                  moments=moments is not None)
        if moments is not None:
            moments.append((mu, var))
        return y


@dataclass(eq=False)
class ClassifierNet(Net):
    """Stack of dense -> BatchNorm -> activation blocks with a dense head of width C."""

    d_in: int
    hidden: list[int]
    n_classes: int
    activation: str = "relu"
    use_bn: bool = True
    params: dict[str, Tensor] = field(default_factory=dict)
    bns: list[BatchNormState] = field(default_factory=list)

    kind = "classifier"

    def forward(self, x, mode: str = "eval", frozen: bool = False, update_stats: bool = True,
                with_moments: bool = False):
        """Return ``(logits, moments)``; ``moments`` holds the batch (mean, var) per BN layer
        when ``with_moments`` is set and is empty otherwise."""
        h = dc.as_tensor(x)
        if h.data.ndim != 2 or h.shape[1] != self.d_in:
            raise dc.ShapeError(f"classifier expects N x {self.d_in} input, got {h.shape}")
        moments: list = []
        wanted = moments if with_moments else None
        for i in range(len(self.hidden)):
            h = dc.dense(h, self._p(f"dense{i}.W", frozen), self._p(f"dense{i}.b", frozen))
            if self.use_bn:
                h = self._bn(h, i, mode, frozen, update_stats, wanted)
            h = dc.activation(h, self.activation)
        logits = dc.dense(h, self._p("head.W", frozen), self._p("head.b", frozen))
        return logits, moments

    def __call__(self, x, **kw) -> Tensor:
        return self.forward(x, **kw)[0]


def build_classifier(d_in: int, hidden: list[int], n_classes: int, rng: np.random.Generator,
                     activation: str = "relu", use_bn: bool = True, bn_momentum: float = 0.1,
                     bn_eps: float = 1e-5) -> ClassifierNet:
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if not hidden:
        raise ValueError("classifier needs at least one hidden layer")
    net = ClassifierNet(d_in, list(hidden), n_classes, activation, use_bn)
    widths = [d_in, *hidden]
    for i in range(len(hidden)):
        net.params[f"dense{i}.W"], net.params[f"dense{i}.b"] = _init_dense(rng, widths[i], widths[i + 1])
        if use_bn:
            bn = BatchNormState.create(widths[i + 1], bn_momentum, bn_eps)
            net.params[f"bn{i}.scale"], net.params[f"bn{i}.shift"] = bn.scale, bn.shift
            net.bns.append(bn)
    net.params["head.W"], net.params["head.b"] = _init_dense(rng, widths[-1], n_classes)
    return net


@dataclass(eq=False)
class EmbeddingTable:
    weight: Tensor

    kind = "embedding"

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    @property
    def params(self) -> dict[str, Tensor]:
        return {"embed.weight": self.weight}

    def lookup(self, y: np.ndarray, frozen: bool = False) -> Tensor:
        w = Tensor(self.weight.data) if frozen else self.weight
        return dc.gather_rows(w, y)

    def state(self) -> dict[str, np.ndarray]:
        return {"embed.weight": self.weight.data.copy()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        w = state["embed.weight"]
        if w.shape != self.weight.shape:
            raise dc.ShapeError(f"embed.weight: expected {self.weight.shape}, got {w.shape}")
        self.weight.data = np.array(w, dtype=np.float64)

    def clone(self):
        return copy.deepcopy(self)


@dataclass(eq=False)
class GeneratorNet(Net):
    """Maps noise (plus optional class embedding) to logits ``u``; samples are ``sigmoid(u)``.

    The first layer realizes ``Wz + b`` (uncond), ``W(z + e) + b`` (sum) or
    ``Wz + Ue + b`` (cat).  Each hidden layer is dense -> activation -> BatchNorm.
    """

    d_z: int
    d_e: int
    hidden: list[int]
    d_out: int
    mode: str = "uncond"
    activation: str = "leaky_relu"
    params: dict[str, Tensor] = field(default_factory=dict)
    bns: list[BatchNormState] = field(default_factory=list)

    kind = "generator"

    @property
    def d_input(self) -> int:
        return self.d_z + self.d_e if self.mode == "cat" else self.d_z

    def first_layer(self, z, e=None, frozen: bool = False) -> Tensor:
        z = dc.as_tensor(z)
        W, b = self._p("dense0.W", frozen), self._p("dense0.b", frozen)
        if self.mode == "uncond":
            return dc.dense(z, W, b)
        if e is None:
            raise ValueError(f"{self.mode} generator needs class embeddings")
        e = dc.as_tensor(e)
        if self.mode == "sum":
            return dc.dense(dc.add(z, e), W, b)
        return dc.add(dc.dense(z, W, b), dc.matmul(e, self._p("dense0.U", frozen)))

    def forward(self, z, e=None, mode: str = "train", frozen: bool = False, update_stats: bool = True):
        """Return ``(u, x)`` with ``x = sigmoid(u)``."""
        h = self.first_layer(z, e, frozen)
        for i in range(len(self.hidden)):
            if i > 0:
                h = dc.dense(h, self._p(f"dense{i}.W", frozen), self._p(f"dense{i}.b", frozen))
            h = dc.activation(h, self.activation)
            h = self._bn(h, i, mode, frozen, update_stats, None)
        u = dc.dense(h, self._p("out.W", frozen), self._p("out.b", frozen))
        return u, dc.sigmoid(u)


def build_generator(d_z: int, d_e: int, hidden: list[int], d_out: int, mode: str,
                    rng: np.random.Generator, n_classes: int | None = None,
                    activation: str = "leaky_relu", bn_momentum: float = 0.1,
                    bn_eps: float = 1e-5) -> tuple[GeneratorNet, EmbeddingTable | None]:
    if mode not in MODES:
        raise ValueError(f"unknown conditioning mode {mode!r}")
    if not hidden:
        raise ValueError("generator needs at least one hidden layer")
    if mode == "sum" and d_e != d_z:
        raise ValueError(f"sum conditioning needs d_e == d_z (got {d_e} vs {d_z})")
    if mode != "uncond" and not n_classes:
        raise ValueError("conditional generator needs n_classes")
    G = GeneratorNet(d_z, d_e if mode != "uncond" else 0, list(hidden), d_out, mode, activation)
    widths = [G.d_input, *hidden]
    for i in range(len(hidden)):
        W, b = _init_dense(rng, widths[i], widths[i + 1])
        if i == 0 and mode == "cat":
            G.params["dense0.W"], G.params["dense0.U"] = Tensor(W.data[:d_z], True), Tensor(W.data[d_z:], True)
        else:
            G.params[f"dense{i}.W"] = W
        G.params[f"dense{i}.b"] = b
        bn = BatchNormState.create(widths[i + 1], bn_momentum, bn_eps)
        G.params[f"bn{i}.scale"], G.params[f"bn{i}.shift"] = bn.scale, bn.shift
        G.bns.append(bn)
    G.params["out.W"], G.params["out.b"] = _init_dense(rng, widths[-1], d_out)
    E = None
    if mode != "uncond":
        E = EmbeddingTable(Tensor(rng.standard_normal((n_classes, d_e)), True))
    return G, E


# ---- EMA -------------------------------------------------------------------------------

@dataclass(eq=False)
class EmaState:
    generator: GeneratorNet
    embeddings: EmbeddingTable | None
    alpha: float
    updates: int = 0


def ema_init(G: GeneratorNet, E: EmbeddingTable | None, alpha: float = 0.95) -> EmaState:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {alpha}")
    ema_G = G.clone()
    for p in ema_G.params.values():
        p.requires_grad = False
    ema_E = None
    if E is not None:
        ema_E = E.clone()
        ema_E.weight.requires_grad = False
    return EmaState(ema_G, ema_E, float(alpha))


def _lerp(old: np.ndarray, new: np.ndarray, alpha: float) -> np.ndarray:
    if old.shape != new.shape:
        raise dc.ShapeError(f"EMA shape mismatch: {old.shape} vs {new.shape}")
    if alpha == 1.0:
        return old
    if alpha == 0.0:
        return new.copy()
    out = old + (1.0 - alpha) * (new - old)
    # guard against one-ulp overshoot so the result stays between old and new
    return np.clip(out, np.minimum(old, new), np.maximum(old, new))


def ema_update(ema: EmaState, G: GeneratorNet, E: EmbeddingTable | None = None) -> EmaState:
    """theta_ema <- alpha * theta_ema + (1 - alpha) * theta for weights, BN stats and embeddings."""
    a = ema.alpha
    if set(ema.generator.params) != set(G.params):
        raise dc.ShapeError("EMA generator and generator have different parameter sets")
    for k, p in ema.generator.params.items():
        p.data = _lerp(p.data, G.params[k].data, a)
    for bn_ema, bn in zip(ema.generator.bns, G.bns):
        bn_ema.running_mean = _lerp(bn_ema.running_mean, bn.running_mean, a)
        bn_ema.running_var = _lerp(bn_ema.running_var, bn.running_var, a)
    if (ema.embeddings is None) != (E is None):
        raise dc.ShapeError("EMA embeddings present/absent mismatch")
    if E is not None:
        ema.embeddings.weight.data = _lerp(ema.embeddings.weight.data, E.weight.data, a)
    ema.updates += 1
    return ema


# ---- checkpoints -----------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   b"MADCKPT" | u8 version | records...
#   record = u32 name_len | name (utf-8) | u32 rank | u64 extent * rank | f64 value * prod(extents)
# Architecture metadata travels as records under "meta.*".

MAGIC = b"MADCKPT"
VERSION = 1
_KIND_CODE = {"classifier": 0, "generator": 1, "embedding": 2}
_ACT_CODE = {a: i for i, a in enumerate(ACTIVATIONS)}


class CheckpointError(Exception):
    code = "checkpoint"


class BadFormatError(CheckpointError):
    code = "bad_format"


class VersionMismatchError(CheckpointError):
    code = "version_mismatch"


class TruncatedError(CheckpointError):
    code = "truncated"


class ShapeMismatchError(CheckpointError):
    code = "shape_mismatch"


def _meta(obj) -> dict[str, np.ndarray]:
    m = {"meta.kind": _KIND_CODE[obj.kind]}
    if isinstance(obj, ClassifierNet):
        m.update({"meta.d_in": obj.d_in, "meta.hidden": obj.hidden, "meta.n_classes": obj.n_classes,
                  "meta.activation": _ACT_CODE[obj.activation], "meta.use_bn": int(obj.use_bn)})
    elif isinstance(obj, GeneratorNet):
        m.update({"meta.d_z": obj.d_z, "meta.d_e": obj.d_e, "meta.hidden": obj.hidden, "meta.d_out": obj.d_out,
                  "meta.mode": MODES.index(obj.mode), "meta.activation": _ACT_CODE[obj.activation]})
    if isinstance(obj, Net) and obj.bns:
        m["meta.bn"] = [obj.bns[0].momentum, obj.bns[0].eps]
    return {k: np.asarray(v, dtype=np.float64) for k, v in m.items()}


def write_records(path, records: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<B", VERSION)]
    for name, arr in records.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_records(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise BadFormatError(f"{path}: bad format (missing MADCKPT header)")
    if len(buf) < len(MAGIC) + 1:
        raise TruncatedError(f"{path}: truncated before version byte")
    version = buf[len(MAGIC)]
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {VERSION}")
    pos, out = len(MAGIC) + 1, {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedError(f"{path}: truncated record at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return out


def save_checkpoint(obj, path) -> None:
    records = _meta(obj)
    records.update(obj.state())
    write_records(path, records)


def load_checkpoint(path, expect: str | None = None):
    """Load a classifier, generator or embedding table; ``expect`` pins the kind."""
    rec = read_records(path)
    if "meta.kind" not in rec:
        raise BadFormatError(f"{path}: bad format (no meta.kind record)")
    kinds = {v: k for k, v in _KIND_CODE.items()}
    kind = kinds.get(int(rec["meta.kind"]))
    if kind is None:
        raise BadFormatError(f"{path}: unknown object kind")
    if expect is not None and kind != expect:
        raise ShapeMismatchError(f"{path}: holds a {kind}, expected a {expect}")
    acts = {v: k for k, v in _ACT_CODE.items()}
    momentum, eps = rec.get("meta.bn", np.array([0.1, 1e-5]))
    rng = np.random.default_rng(0)
    try:
        if kind == "classifier":
            obj = build_classifier(int(rec["meta.d_in"]), [int(h) for h in rec["meta.hidden"]],
                                   int(rec["meta.n_classes"]), rng, acts[int(rec["meta.activation"])],
                                   bool(rec["meta.use_bn"]), momentum, eps)
        elif kind == "generator":
            mode = MODES[int(rec["meta.mode"])]
            obj, _ = build_generator(int(rec["meta.d_z"]), int(rec["meta.d_e"]) or int(rec["meta.d_z"]),
                                     [int(h) for h in rec["meta.hidden"]], int(rec["meta.d_out"]), mode, rng,
                                     n_classes=2, activation=acts[int(rec["meta.activation"])],
                                     bn_momentum=momentum, bn_eps=eps)
        else:
            obj = EmbeddingTable(Tensor(rec["embed.weight"], True))
        obj.load_state(rec)
    except KeyError as exc:
        raise ShapeMismatchError(f"{path}: missing record {exc}") from exc
    except dc.ShapeError as exc:
        raise ShapeMismatchError(f"{path}: {exc}") from exc
    return obj


def sample_generator(G: GeneratorNet, E: EmbeddingTable | None, n: int, rng_noise: np.random.Generator,
                     rng_labels: np.random.Generator | None = None, bn_mode: str = "train",
                     train: bool = False, update_stats: bool = False, labels: np.ndarray | None = None):
    """Draw ``z ~ N(0, I)`` (and ``y ~ Cat(C)`` uniformly when conditional) and run G.

    ``labels`` fixes ``y`` instead of drawing it.  With ``train=False`` the
    generator is evaluated as a constant and the returned tensors carry no
    graph.  Returns ``(u, x, y, e_y)``.
    """
    z = rng_noise.standard_normal((n, G.d_z))
    y = e_y = None
    if G.mode != "uncond":
        if E is None:
            raise ValueError(f"{G.mode} generator needs an embedding table")
        if labels is not None:
            y = np.asarray(labels, dtype=np.int64)
            if y.shape != (n,) or y.min(initial=0) < 0 or y.max(initial=0) >= E.n_classes:
                raise ValueError(f"labels must be {n} class indices in [0, {E.n_classes})")
        else:
            y = (rng_labels or rng_noise).integers(0, E.n_classes, size=n)
        e_y = E.lookup(y, frozen=not train)
    u, x = G.forward(z, e_y, mode=bn_mode, frozen=not train, update_stats=update_stats and train)
    return u, x, y, e_y
