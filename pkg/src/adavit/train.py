"""Losses, AdamW, cosine schedule, checkpoints and the training loops."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .mae import MaeConfig, MaePretrainer
from .model import AdaViT, ConcatViT, ModelConfig
from .synth import Case
from .tensor import ParamStore, Tensor, tensor_from_bytes, tensor_to_bytes

log = logging.getLogger(__name__)

CKPT_MAGIC = b"ACKPT1"


# ---------------------------------------------------------------------------
# losses and metrics
# ---------------------------------------------------------------------------

def dice_loss(pred: Tensor, target: np.ndarray, eps: float = 1e-5) -> Tensor:
    """``1 - mean_c (2 sum(p t) + eps) / (sum p + sum t + eps)`` over ``[C, ...]``."""
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise T.ShapeError(f"dice_loss: pred {pred.shape} vs target {target.shape}")
    C = pred.shape[0]
    flat = T.reshape(pred, (C, -1))
    tflat = target.reshape(C, -1)
    inter = T.tsum(T.mul(flat, tflat), axis=1)
    denom = T.add(T.tsum(flat, axis=1), tflat.sum(axis=1) + eps)
    ratio = T.div(T.add(T.mul(inter, 2.0), eps), denom)
    return T.sub(1.0, T.mean(ratio))


def dice_metric(pred_bin: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-class hard Dice; an empty prediction of an empty target scores 1."""
    pred_bin = np.asarray(pred_bin) > 0.5
    target = np.asarray(target) > 0.5
    if pred_bin.ndim == 3:
        pred_bin = pred_bin[None]
    if target.ndim == 3:
        target = target[None]
    if pred_bin.shape != target.shape:
        raise ValueError(f"prediction {pred_bin.shape} and target {target.shape} differ")
    scores = []
    for p, t in zip(pred_bin, target):
        denom = p.sum() + t.sum()
        scores.append(1.0 if denom == 0 else 2.0 * np.logical_and(p, t).sum() / denom)
    return np.array(scores)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

def cosine_lr(t: float, total: float, lr_init: float, eta_min: float = 0.0) -> float:
    return eta_min + 0.5 * (lr_init - eta_min) * (1.0 + math.cos(math.pi * t / total))


class NonFiniteGradient(FloatingPointError):
    pass


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: dict, t: int, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> dict:
    """One AdamW update; returns the new parameter arrays (inputs untouched).

    ``state`` holds the first/second moments under ``'m'`` and ``'v'`` and is
    updated in place.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    bad = [n for n, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradient(f"non-finite gradient in {len(bad)} tensors, first: {bad[:5]}")
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    out = {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        m = m_all.get(name)
        v = v_all.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        m_all[name], v_all[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new = theta - update
        if weight_decay:
            new = new - lr * weight_decay * theta
        out[name] = new.astype(theta.dtype, copy=False)
    return out


class AdamW:
    """Stateful wrapper applying :func:`adam_step` to a :class:`ParamStore`."""

    def __init__(self, store: ParamStore, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-2):
        self.store = store
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.t = 0
        self.state: dict = {"m": {}, "v": {}}

    def step(self, lr: float) -> None:
        self.t += 1
        params = {n: p.data for n, p in self.store.items()}
        grads = {n: p.grad for n, p in self.store.items()}
        new = adam_step(params, grads, self.state, self.t, lr, self.beta1, self.beta2, self.eps, self.weight_decay)
        for n, p in self.store.items():
            p.data = new[n]

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for key in ("m", "v"):
            for n, a in self.state[key].items():
                out[f"{key}.{n}"] = a
        return out

    def load_state_arrays(self, t: int, arrays: Mapping[str, np.ndarray]) -> None:
        self.t = t
        self.state = {"m": {}, "v": {}}
        for k, a in arrays.items():
            key, name = k.split(".", 1)
            self.state[key][name] = np.array(a)


@dataclass
class TrainConfig:
    lr_init: float = 1e-4
    epochs: int = 10
    batch_size: int = 4
    weight_decay: float = 1e-2
    seed: int = 0
    eta_min: float = 0.0
    max_seconds: float | None = None
    modality_dropout: float = 0.0
    eval_every: int = 1

    def __post_init__(self):
        if self.lr_init <= 0:
            raise ValueError("lr_init must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def ssl_default(cls, **kw) -> "TrainConfig":
        return cls(**{"lr_init": 1e-5, **kw})

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    kind: str
    model: dict
    params: "OrderedDict[str, np.ndarray]"
    modalities: list[str]
    seed: int = 0
    mae: dict | None = None
    train: dict | None = None
    epoch: int = 0
    history: list = field(default_factory=list)
    rng_state: dict | None = None
    optimizer_t: int = 0
    optimizer: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model)


class CheckpointError(Exception):
    code = "CKPT_INVALID"


class CheckpointNotFound(CheckpointError, FileNotFoundError):
    code = "CKPT_NOT_FOUND"


class IncompatibleCheckpoint(CheckpointError):
    code = "CKPT_INCOMPATIBLE"

    def __init__(self, report: dict):
        self.report = report
        super().__init__(json.dumps(report, sort_keys=True))


def snapshot(model, **extra) -> Checkpoint:
    params = OrderedDict((n, t.data.copy()) for n, t in model.store.items())
    mae = model.mae_cfg.to_dict() if isinstance(model, MaePretrainer) else None
    kind = "mae" if isinstance(model, MaePretrainer) else model.kind
    return Checkpoint(kind, model.cfg.to_dict(), params, list(model.modalities), getattr(model, "seed", 0),
                      mae=mae, **extra)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """``ACKPT1`` + u64 manifest length + JSON manifest + tensor blobs."""
    blobs, entries = [], []
    offset = 0
    for group, arrays in (("params", ckpt.params), ("optimizer", ckpt.optimizer)):
        for name, arr in arrays.items():
            b = tensor_to_bytes(np.asarray(arr))
            entries.append({"group": group, "name": name, "shape": list(np.shape(arr)),
                            "dtype": str(np.asarray(arr).dtype), "offset": offset, "nbytes": len(b)})
            blobs.append(b)
            offset += len(b)
    manifest = {
        "kind": ckpt.kind, "model": ckpt.model, "modalities": ckpt.modalities, "seed": ckpt.seed,
        "mae": ckpt.mae, "train": ckpt.train, "epoch": ckpt.epoch, "history": ckpt.history,
        "rng_state": ckpt.rng_state, "optimizer_t": ckpt.optimizer_t, "tensors": entries,
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    path.write_bytes(CKPT_MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointNotFound(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:6] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    (n,) = struct.unpack_from("<Q", buf, 6)
    manifest = json.loads(buf[14:14 + n])
    base = 14 + n
    groups = {"params": OrderedDict(), "optimizer": OrderedDict()}
    for e in manifest["tensors"]:
        arr, _ = tensor_from_bytes(buf, base + e["offset"])
        groups[e["group"]][e["name"]] = arr
    return Checkpoint(manifest["kind"], manifest["model"], groups["params"], manifest["modalities"],
                      manifest.get("seed", 0), manifest.get("mae"), manifest.get("train"), manifest.get("epoch", 0),
                      manifest.get("history", []), manifest.get("rng_state"), manifest.get("optimizer_t", 0),
                      groups["optimizer"])


def _store_from(params: Mapping[str, np.ndarray]) -> ParamStore:
    store = ParamStore()
    for n, a in params.items():
        store.add(n, np.array(a))
    return store


def build_model(ckpt: Checkpoint):
    """Reconstruct the exact model stored in ``ckpt``."""
    cfg = ckpt.model_config
    store = _store_from(ckpt.params)
    if ckpt.kind == "adavit":
        return AdaViT(cfg, ckpt.modalities, ckpt.seed, store=store)
    if ckpt.kind == "concat":
        return ConcatViT(cfg, ckpt.modalities, ckpt.seed, store=store)
    if ckpt.kind == "mae":
        return MaePretrainer(cfg, MaeConfig(**ckpt.mae), ckpt.modalities, ckpt.seed, store=store)
    raise CheckpointError(f"unknown checkpoint kind {ckpt.kind!r}")


def compatibility_report(ckpt: Checkpoint, model) -> dict:
    """Which checkpoint tensors can be loaded into ``model`` as-is."""
    mismatched, missing, unexpected = [], [], []
    own = set(model.store.names())
    for n, a in ckpt.params.items():
        if n not in own:
            unexpected.append(n)
        elif tuple(a.shape) != model.store[n].shape:
            mismatched.append({"name": n, "checkpoint": list(a.shape), "model": list(model.store[n].shape)})
    for n in model.store.names():
        if n not in ckpt.params:
            missing.append(n)
    return {"compatible": not mismatched, "shape_mismatch": mismatched, "missing_in_checkpoint": missing,
            "unused_from_checkpoint": unexpected, "checkpoint_kind": ckpt.kind,
            "checkpoint_modalities": list(ckpt.modalities), "model_modalities": list(model.modalities)}


def load_weights(model, ckpt: Checkpoint, surgery: bool = False) -> dict:
    """Copy every same-name, same-shape tensor of ``ckpt`` into ``model``.

    Shape mismatches raise :class:`IncompatibleCheckpoint` unless ``surgery``
    is set, in which case the model keeps its fresh initialisation for those
    tensors (e.g. a first conv rebuilt for more input channels).
    """
    report = compatibility_report(ckpt, model)
    if report["shape_mismatch"] and not surgery:
        raise IncompatibleCheckpoint(report)
    skip = {m["name"] for m in report["shape_mismatch"]}
    for n, a in ckpt.params.items():
        if n in model.store and n not in skip:
            model.store.set(n, a)
    report["reinitialised"] = sorted(skip)
    return report


def adavit_from_checkpoint(ckpt: Checkpoint, extra_modalities: Sequence[str] = (), seed: int | None = None,
                           cfg_overrides: Mapping | None = None) -> AdaViT:
    """Segmenter initialised from an AdaViT or MAE checkpoint.

    Registry order is the checkpoint's, with unseen modalities appended at
    identity scaling. A fresh segmentation head is created when the
    checkpoint has none.
    """
    cfg = ModelConfig.from_dict({**ckpt.model, **(cfg_overrides or {})})
    seed = ckpt.seed if seed is None else seed
    if ckpt.kind == "adavit":
        model = build_model(ckpt)
        if cfg_overrides:
            model = AdaViT(cfg, ckpt.modalities, seed, store=model.store)
    elif ckpt.kind == "mae":
        model = AdaViT(cfg, ckpt.modalities, seed)
        load_weights(model, ckpt)
    else:
        raise CheckpointError(f"cannot build an AdaViT from a {ckpt.kind!r} checkpoint")
    for m in extra_modalities:
        if m not in model.registry:
            model.register_modality(m)
    return model


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    best: Checkpoint
    history: list[dict]
    steps: int
    seconds: float


def predict(model, case) -> np.ndarray:
    with T.no_grad():
        return model(case).data


def evaluate(model, cases: Sequence[Case]) -> list[dict]:
    """Per-case hard Dice (threshold 0.5) with per-class scores."""
    rows = []
    for c in cases:
        prob = predict(model, c)
        per_class = dice_metric(prob > 0.5, c.label_channels())
        rows.append({"case_id": c.case_id, "modalities": list(c.volumes), "dice": float(per_class.mean()),
                     "per_class": [float(x) for x in per_class]})
    return rows


def mean_dice(rows: Sequence[dict]) -> float:
    return float(np.mean([r["dice"] for r in rows])) if rows else float("nan")


def _drop_modalities(case: Case, p: float, rng: np.random.Generator) -> Case:
    if p <= 0 or len(case.volumes) == 1:
        return case
    keep = [m for m in case.volumes if rng.random() >= p]
    if not keep:
        keep = [case.modalities[int(rng.integers(len(case.volumes)))]]
    return case.subset(keep)


def train_supervised(model, train_cases: Sequence[Case], val_cases: Sequence[Case], cfg: TrainConfig,
                     on_epoch: Callable[[dict], None] | None = None, select_initial: bool = False) -> TrainResult:
    """Dice-loss training with per-case gradient accumulation.

    The best-validation weights are kept; with ``select_initial`` the
    untrained starting point is a candidate too.
    """
    if not train_cases:
        raise ValueError("no training cases")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.store, weight_decay=cfg.weight_decay)
    history: list[dict] = []
    best_score, best = -1.0, None
    if select_initial and val_cases:
        best_score = mean_dice(evaluate(model, val_cases))
        best = snapshot(model, epoch=0)
        history.append({"epoch": 0, "val_dice": best_score})
    start = time.perf_counter()
    steps = 0
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.eta_min)
        order = rng.permutation(len(train_cases))
        losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            batch = [train_cases[i] for i in order[b0:b0 + cfg.batch_size]]
            model.store.zero_grad()
            for case in batch:
                case = _drop_modalities(case, cfg.modality_dropout, rng)
                loss = dice_loss(model(case), case.label_channels())
                if not np.isfinite(loss.data):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}, case {case.case_id}")
                T.mul(loss, 1.0 / len(batch)).backward()
                losses.append(float(loss.data))
            opt.step(lr)
            steps += 1
        entry = {"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses))}
        last = epoch + 1 == cfg.epochs
        out_of_time = cfg.max_seconds is not None and time.perf_counter() - start > cfg.max_seconds
        if val_cases and ((epoch + 1) % cfg.eval_every == 0 or last or out_of_time):
            score = mean_dice(evaluate(model, val_cases))
            entry["val_dice"] = score
            if score > best_score:
                best_score, best = score, snapshot(model, epoch=epoch + 1)
        history.append(entry)
        log.info("epoch %d %s", epoch + 1, entry)
        if on_epoch:
            on_epoch(entry)
        if out_of_time:
            break
    if best is None:
        best = snapshot(model, epoch=len([h for h in history if "train_loss" in h]))
    best.history = history
    best.train = cfg.to_dict()
    best.rng_state = rng.bit_generator.state
    best.optimizer_t = opt.t
    best.optimizer = opt.state_arrays() if best.epoch == history[-1]["epoch"] else OrderedDict()
    restore(model, best)
    return TrainResult(model, best, history, steps, time.perf_counter() - start)


def restore(model, ckpt: Checkpoint) -> None:
    for n, a in ckpt.params.items():
        model.store.set(n, a)


def train_ssl(model: MaePretrainer, cases: Sequence[Case], cfg: TrainConfig, steps: int | None = None,
              on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """MAE pretraining; a fresh mask is drawn for every case visit.

    ``steps`` (optimizer steps) overrides ``cfg.epochs`` and the cosine
    schedule then runs per step.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.store, weight_decay=cfg.weight_decay)
    history = []
    start = time.perf_counter()
    per_epoch = math.ceil(len(cases) / cfg.batch_size)
    total = steps if steps is not None else cfg.epochs * per_epoch
    t = 0
    while t < total:
        order = rng.permutation(len(cases))
        for b0 in range(0, len(order), cfg.batch_size):
            if t >= total:
                break
            lr = cosine_lr(t if steps is not None else t // per_epoch,
                           total if steps is not None else cfg.epochs, cfg.lr_init, cfg.eta_min)
            batch = [cases[i] for i in order[b0:b0 + cfg.batch_size]]
            model.store.zero_grad()
            losses = []
            for case in batch:
                plan = model.plan(case, int(rng.integers(2**31)))
                out = model(case, plan)
                if out.loss.requires_grad:
                    T.mul(out.loss, 1.0 / len(batch)).backward()
                losses.append(float(out.loss.data))
            opt.step(lr)
            t += 1
            history.append({"step": t, "lr": lr, "loss": float(np.mean(losses))})
            if on_step:
                on_step(t, history[-1]["loss"])
            if cfg.max_seconds is not None and time.perf_counter() - start > cfg.max_seconds:
                total = t
                break
    ckpt = snapshot(model, epoch=t, history=history, train=cfg.to_dict(), rng_state=rng.bit_generator.state,
                    optimizer_t=opt.t, optimizer=opt.state_arrays())
    return TrainResult(model, ckpt, history, t, time.perf_counter() - start)
