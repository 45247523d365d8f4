"""Transfer protocol, SSL comparison and ablation drivers with JSON/CSV reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .encoder import PRESETS, EncoderConfig, init_encoder
from .mae import MaeConfig, MaePretrainer
from .model import AdaViT, ConcatViT, ModelConfig
from .synth import Case, CorpusManifest, PhantomSpec, cases_for, generate_corpus
from .tensor import ParamStore
from .train import (
    Checkpoint, IncompatibleCheckpoint, TrainConfig, adavit_from_checkpoint, build_model, evaluate,
    load_weights, mean_dice, snapshot, train_ssl, train_supervised,
)

log = logging.getLogger(__name__)

DEFAULT_COUNTS = {
    "pretrain-train": 48, "pretrain-val": 8, "pretrain-test": 16,
    "finetune-train": 8, "finetune-val": 8, "finetune-test": 16,
}


@dataclass
class ExperimentConfig:
    """Everything a protocol run needs; nested sections are plain dicts."""

    model: dict = field(default_factory=dict)
    phantom: dict = field(default_factory=dict)
    sites: dict = field(default_factory=dict)
    counts: dict = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    pretrain: dict = field(default_factory=lambda: {"lr_init": 1e-3, "epochs": 16})
    finetune: dict = field(default_factory=lambda: {"lr_init": 3e-4, "epochs": 10})
    ssl: dict = field(default_factory=lambda: {"lr_init": 1e-3, "batch_size": 1})
    ssl_finetune: dict = field(default_factory=lambda: {"lr_init": 1e-3, "epochs": 40})
    ssl_steps: int = 2000
    ssl_cases: int = 32
    mae: dict = field(default_factory=dict)
    few_shot_k: int = 8
    baseline: bool = True
    seed: int = 0

    def __post_init__(self):
        # fail early on bad nested keys
        self.model_config()
        self.phantom_spec()
        self.train_config("pretrain")
        self.train_config("finetune")
        self.train_config("ssl")
        self.train_config("ssl_finetune")
        self.mae_config()
        if self.few_shot_k < 0:
            raise ValueError("few_shot_k must be >= 0")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self, **overrides) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, **overrides})

    def phantom_spec(self) -> PhantomSpec:
        d = dict(self.phantom)
        d.setdefault("shape", list(self.model_config().volume_shape))
        return PhantomSpec.from_dict(d)

    def train_config(self, section: str, **overrides) -> TrainConfig:
        base = {"seed": self.seed}
        if section == "ssl":
            base["lr_init"] = 1e-5
        return TrainConfig.from_dict({**base, **getattr(self, section), **overrides})

    def mae_config(self, **overrides) -> MaeConfig:
        known = {f.name for f in fields(MaeConfig)}
        d = {**self.mae, **overrides}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown mae config keys: {sorted(unknown)}")
        return MaeConfig(**d)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.to_dict(), "seed": seed})


def split_summary(rows: Sequence[dict]) -> dict:
    per_class = np.mean([r["per_class"] for r in rows], axis=0).tolist() if rows else []
    return {"mean_dice": mean_dice(rows), "per_class": per_class, "cases": list(rows)}


@dataclass
class ExperimentReport:
    name: str
    seed: int
    config: dict
    results: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def add(self, key: str, rows: Sequence[dict]) -> float:
        self.results[key] = split_summary(rows)
        return self.results[key]["mean_dice"]

    def dice(self, key: str) -> float:
        return self.results[key]["mean_dice"]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True, default=_jsonable)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["experiment", "result", "case_id", "modalities", "dice", "per_class"])
        for key in sorted(self.results):
            for r in self.results[key]["cases"]:
                w.writerow([self.name, key, r["case_id"], "+".join(r["modalities"]), repr(r["dice"]),
                            ";".join(repr(x) for x in r["per_class"])])
        return buf.getvalue()

    def write(self, out_dir, stem: str | None = None) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.name
        jp, cp = out / f"{stem}.json", out / f"{stem}.csv"
        jp.write_text(self.to_json())
        cp.write_text(self.to_csv())
        return jp, cp


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


# ---------------------------------------------------------------------------
# protocol pieces
# ---------------------------------------------------------------------------

def _union_modalities(cases: Sequence[Case], first: Sequence[str] = ()) -> list[str]:
    out = list(first)
    for c in cases:
        for m in c.modalities:
            if m not in out:
                out.append(m)
    return out


def model_for_cases(ckpt: Checkpoint, cases: Sequence[Case], surgery: bool = False, zero_fill: bool = True):
    """Load ``ckpt`` into a model able to take every modality in ``cases``.

    AdaViT registers unseen modalities; the concat baseline needs a new
    channel list, which is only loadable with ``surgery``.
    Returns ``(model, load_report)``.
    """
    if ckpt.kind in ("adavit", "mae"):
        mods = _union_modalities(cases, ckpt.modalities)
        model = adavit_from_checkpoint(ckpt, mods)
        return model, {"registered": [m for m in mods if m not in ckpt.modalities]}
    if ckpt.kind == "concat":
        channels = _union_modalities(cases, ckpt.modalities)
        if channels == list(ckpt.modalities):
            model = build_model(ckpt)
            model.zero_fill = zero_fill
            return model, {"compatible": True}
        model = ConcatViT(ckpt.model_config, channels, ckpt.seed, zero_fill=zero_fill)
        return model, load_weights(model, ckpt, surgery=surgery)
    raise ValueError(f"unsupported checkpoint kind {ckpt.kind!r}")


def run_zero_shot(ckpt: Checkpoint, cases: Sequence[Case], surgery: bool = False,
                  config: dict | None = None) -> ExperimentReport:
    """Evaluate ``ckpt`` on cases with a different modality set, no weight updates."""
    model, load = model_for_cases(ckpt, cases, surgery)
    report = ExperimentReport("zero_shot", ckpt.seed, config or {})
    report.add("zero_shot", evaluate(model, cases))
    report.summary = {"model": ckpt.kind, "load": load}
    return report


def run_few_shot(ckpt: Checkpoint, train_cases: Sequence[Case], val_cases: Sequence[Case],
                 test_cases: Sequence[Case], cfg: TrainConfig, k: int = 8, surgery: bool = False,
                 config: dict | None = None) -> tuple[Checkpoint, ExperimentReport]:
    """Finetune on the first ``k`` training cases; ``k == 0`` is the zero-shot model."""
    model, load = model_for_cases(ckpt, list(train_cases[:k]) + list(val_cases) + list(test_cases), surgery)
    report = ExperimentReport("few_shot", ckpt.seed, config or {})
    before = report.add("zero_shot", evaluate(model, test_cases))
    if k > 0:
        result = train_supervised(model, list(train_cases[:k]), val_cases, cfg, select_initial=True)
        report.curves["few_shot"] = result.history
        out = result.best
        after = report.add("few_shot", evaluate(model, test_cases))
    else:
        out = snapshot(model)
        report.results["few_shot"] = report.results["zero_shot"]
        after = before
    report.summary = {"model": ckpt.kind, "k": k, "zero_shot": before, "few_shot": after,
                      "delta": after - before, "load": load}
    return out, report


def run_backward_transfer(ckpt: Checkpoint, cases: Sequence[Case], reference: float | None = None,
                          config: dict | None = None) -> ExperimentReport:
    """Re-evaluate a finetuned model on the original pretrain cases.

    The concat baseline sees absent modalities as all-zero volumes.
    """
    model = build_model(ckpt)
    if ckpt.kind == "concat":
        model.zero_fill = True
    report = ExperimentReport("backward_transfer", ckpt.seed, config or {})
    score = report.add("backward", evaluate(model, cases))
    report.summary = {"model": ckpt.kind, "backward": score, "reference": reference,
                      "ratio": None if not reference else score / reference}
    return report


def make_corpus(cfg: ExperimentConfig, counts: Mapping[str, int] | None = None, out_dir=None) -> CorpusManifest:
    return generate_corpus(cfg.phantom_spec(), cfg.sites or None, counts or cfg.counts, cfg.seed, out_dir)


def pretrain_model(kind: str, cfg: ExperimentConfig, manifest: CorpusManifest, **model_overrides):
    mcfg = cfg.model_config(**model_overrides)
    mods = (cfg.sites or {}).get("pretrain") or manifest.site_profiles["pretrain"]
    model = AdaViT(mcfg, mods, cfg.seed) if kind == "adavit" else ConcatViT(mcfg, mods, cfg.seed)
    return train_supervised(model, cases_for(manifest, "pretrain-train"), cases_for(manifest, "pretrain-val"),
                            cfg.train_config("pretrain"))


def run_protocol(cfg: ExperimentConfig, manifest: CorpusManifest | None = None,
                 models: Sequence[str] | None = None) -> ExperimentReport:
    """Supervised pretrain -> zero-shot -> few-shot finetune -> backward transfer.

    Runs AdaViT and (unless disabled) the channel-concat baseline on the
    same corpus and seed.
    """
    manifest = manifest or make_corpus(cfg)
    models = models or (["adavit", "concat"] if cfg.baseline else ["adavit"])
    pre_mods = manifest.site_profiles["pretrain"]
    ft_test = cases_for(manifest, "finetune-test")
    matched_cases = [c.subset([m for m in c.modalities if m in pre_mods]) for c in ft_test]
    pre_test = cases_for(manifest, "pretrain-test")
    report = ExperimentReport("protocol", cfg.seed, cfg.to_dict())
    for kind in models:
        pre = pretrain_model(kind, cfg, manifest)
        report.curves[f"{kind}.pretrain"] = pre.history
        ckpt = pre.best
        matched = report.add(f"{kind}.matched", evaluate(pre.model, matched_cases))
        pre_dice = report.add(f"{kind}.pretrain_test", evaluate(pre.model, pre_test))

        surgery_needed = False
        try:
            model_for_cases(ckpt, ft_test, surgery=False)
        except IncompatibleCheckpoint as exc:
            surgery_needed = True
            report.summary[f"{kind}.incompatibility"] = exc.report
        zs = run_zero_shot(ckpt, ft_test, surgery=surgery_needed)
        zero = report.add(f"{kind}.zero_shot", zs.results["zero_shot"]["cases"])

        ft_ckpt, fs = run_few_shot(ckpt, cases_for(manifest, "finetune-train"), cases_for(manifest, "finetune-val"),
                                   ft_test, cfg.train_config("finetune"), cfg.few_shot_k, surgery=surgery_needed)
        few = report.add(f"{kind}.few_shot", fs.results["few_shot"]["cases"])
        report.curves[f"{kind}.few_shot"] = fs.curves.get("few_shot", [])

        bt = run_backward_transfer(ft_ckpt, pre_test, reference=pre_dice)
        back = report.add(f"{kind}.backward", bt.results["backward"]["cases"])
        report.summary[kind] = {
            "matched": matched, "pretrain_test": pre_dice, "zero_shot": zero, "few_shot": few,
            "backward": back, "surgery": surgery_needed, "zero_filled_backward": kind == "concat",
            "zero_shot_over_matched": zero / matched if matched else None,
            "backward_over_pretrain": back / pre_dice if pre_dice else None,
        }
        log.info("%s: %s", kind, report.summary[kind])
    return report


# ---------------------------------------------------------------------------
# self-supervised pretraining
# ---------------------------------------------------------------------------

def ssl_pretrain(cfg: ExperimentConfig, cases: Sequence[Case], steps: int | None = None, **mae_overrides):
    mods = _union_modalities(cases)
    mae = MaePretrainer(cfg.model_config(), cfg.mae_config(**mae_overrides), mods, cfg.seed)
    return train_ssl(mae, cases, cfg.train_config("ssl"), steps=cfg.ssl_steps if steps is None else steps)


def run_ssl_comparison(cfg: ExperimentConfig, manifest: CorpusManifest | None = None,
                       ssl_steps: int | None = None, **mae_overrides) -> ExperimentReport:
    """Finetune from an MAE checkpoint and from scratch under the same budget."""
    counts = {k: v for k, v in cfg.counts.items() if k.startswith("finetune")}
    counts["ssl-pretrain"] = cfg.ssl_cases
    manifest = manifest or make_corpus(cfg, counts)
    ssl_cases = cases_for(manifest, "ssl-pretrain")
    train, val, test = (cases_for(manifest, s) for s in ("finetune-train", "finetune-val", "finetune-test"))
    report = ExperimentReport("ssl_comparison", cfg.seed, cfg.to_dict())

    ssl = ssl_pretrain(cfg, ssl_cases, ssl_steps, **mae_overrides)
    report.curves["ssl"] = [h["loss"] for h in ssl.history]
    ft_cfg = cfg.train_config("ssl_finetune")
    mods = _union_modalities(train + val + test)
    from_ssl = adavit_from_checkpoint(ssl.best, mods)
    res_ssl = train_supervised(from_ssl, train, val, ft_cfg)
    scratch = AdaViT(cfg.model_config(), _union_modalities(train + val + test, ssl.best.modalities), cfg.seed)
    res_scratch = train_supervised(scratch, train, val, ft_cfg)
    report.curves["finetune_ssl"] = res_ssl.history
    report.curves["finetune_scratch"] = res_scratch.history
    a = report.add("ssl", evaluate(from_ssl, test))
    b = report.add("scratch", evaluate(scratch, test))
    losses = report.curves["ssl"]
    report.summary = {"ssl": a, "scratch": b, "ssl_minus_scratch": a - b, "ssl_steps": ssl.steps,
                      "ratio": ssl.best.mae["ratio"], "mae_loss_first": losses[0] if losses else None,
                      "mae_loss_last": losses[-1] if losses else None}
    return report


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

def preset_table(names: Sequence[str] = ("base", "large", "huge")) -> list[dict]:
    """Build each encoder preset (zero-stride storage) and count its parameters."""
    rows = []
    for name in names:
        ecfg = EncoderConfig.preset(name)
        store = ParamStore()
        init_encoder(store, ecfg, np.random.default_rng(0), np.float32, meta=True)
        rows.append({"preset": name, **PRESETS[name], "built": store.num_values(), "analytic": ecfg.param_count()})
    return rows


def run_ablations(cfg: ExperimentConfig, which: Sequence[str] = ("mask_ratio", "fusion", "presets"),
                  ratios: Sequence[float] = (0.5, 0.7, 0.9), ssl_steps: int | None = None) -> ExperimentReport:
    """Mask-ratio, fusion and preset-size tables from one call."""
    report = ExperimentReport("ablations", cfg.seed, cfg.to_dict())
    tables = {}
    if "mask_ratio" in which:
        counts = {k: v for k, v in cfg.counts.items() if k.startswith("finetune")}
        counts["ssl-pretrain"] = cfg.ssl_cases
        manifest = make_corpus(cfg, counts)
        rows = []
        for rho in ratios:
            r = run_ssl_comparison(cfg, manifest, ssl_steps, ratio=rho)
            report.results[f"mask_ratio.{rho}"] = r.results["ssl"]
            rows.append({"ratio": rho, "finetune_dice": r.summary["ssl"], "scratch_dice": r.summary["scratch"]})
        tables["mask_ratio"] = rows
    if "fusion" in which:
        manifest = make_corpus(cfg)
        rows = []
        for fusion in ("max", "mean"):
            res = pretrain_model("adavit", cfg, manifest, fusion=fusion)
            score = report.add(f"fusion.{fusion}", evaluate(res.model, cases_for(manifest, "pretrain-test")))
            rows.append({"fusion": fusion, "test_dice": score})
        tables["fusion"] = rows
    if "presets" in which:
        tables["presets"] = preset_table()
    report.summary = tables
    return report
