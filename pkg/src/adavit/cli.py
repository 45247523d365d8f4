"""``adavit`` command line: synth, train, pretrain-ssl, finetune, eval, experiment, gradcheck, ablate.

Every command takes an experiment config (JSON) and writes JSON/CSV reports
plus checkpoints under ``--out-dir`` (default ``$ADAVIT_OUT`` or ``./out``).
Failures exit nonzero with ``{"error": CODE, "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

GRADCHECK_TOL = 1e-5
SPLIT_CHOICES = ("pretrain-train", "pretrain-val", "pretrain-test", "finetune-train", "finetune-val",
                 "finetune-test", "ssl-pretrain")


class CliError(Exception):
    def __init__(self, code: str, message: str, exit_code: int = 2):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


def _limit_threads(n: int | None) -> None:
    # must run before numpy loads its BLAS
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config JSON")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="BLAS threads; 1 gives fully deterministic runs")
    common.add_argument("--out-dir", type=Path)
    common.add_argument("--ckpt", type=Path)
    common.add_argument("--fusion", choices=("max", "mean"))
    common.add_argument("--mask-ratio", type=float)
    common.add_argument("--preset", choices=("desk", "base", "large", "huge"))
    common.add_argument("--loss-all-patches", action="store_true", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="adavit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write the seeded phantom corpus")
    t = sub.add_parser("train", parents=[common], help="supervised training on the pretrain splits")
    t.add_argument("--model", choices=("adavit", "concat"), default="adavit")
    s = sub.add_parser("pretrain-ssl", parents=[common], help="masked-autoencoder pretraining")
    s.add_argument("--steps", type=int)
    f = sub.add_parser("finetune", parents=[common], help="few-shot finetune a checkpoint")
    f.add_argument("--k", type=int)
    f.add_argument("--surgery", action="store_true", help="reinitialise mismatched first-layer tensors")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on one split")
    e.add_argument("--split", choices=SPLIT_CHOICES, default="finetune-test")
    e.add_argument("--surgery", action="store_true")
    x = sub.add_parser("experiment", parents=[common], help="pretrain, zero-shot, few-shot, backward transfer")
    x.add_argument("--no-baseline", action="store_true")
    x.add_argument("--ssl", action="store_true", help="also run the SSL-vs-scratch comparison")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op and model path")
    a = sub.add_parser("ablate", parents=[common], help="mask-ratio, fusion and preset tables")
    a.add_argument("--which", default="mask_ratio,fusion,presets")
    a.add_argument("--steps", type=int, help="SSL steps per mask ratio")
    return p


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

def resolve_config(args):
    from .experiment import ExperimentConfig
    raw = {}
    if args.config is not None:
        if not args.config.exists():
            raise CliError("CONFIG_NOT_FOUND", f"no config file at {args.config}")
        try:
            raw = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise CliError("CONFIG_INVALID", f"{args.config}: {exc}") from exc
    model = dict(raw.get("model", {}))
    if args.preset is not None:
        from .encoder import PRESETS
        model.update(PRESETS[args.preset])
    if args.fusion is not None:
        model["fusion"] = args.fusion
    mae = dict(raw.get("mae", {}))
    if args.mask_ratio is not None:
        mae["ratio"] = args.mask_ratio
    if args.loss_all_patches:
        mae["loss_all_patches"] = True
    raw = {**raw, "model": model, "mae": mae}
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        return ExperimentConfig.from_dict(raw)
    except (KeyError, ValueError, TypeError) as exc:
        raise CliError("CONFIG_INVALID", str(exc).strip("'\"")) from exc


def out_dir(args) -> Path:
    p = args.out_dir or Path(os.environ.get("ADAVIT_OUT", "out"))
    p.mkdir(parents=True, exist_ok=True)
    return p


def corpus_counts(cfg) -> dict:
    return {**cfg.counts, "ssl-pretrain": cfg.ssl_cases}


def corpus(cfg, out: Path):
    """The on-disk corpus from ``synth`` when present, else the same corpus generated in memory."""
    from .experiment import make_corpus
    from .synth import CorpusManifest
    path = out / "corpus" / "manifest.json"
    if path.exists():
        return CorpusManifest.read(path)
    return make_corpus(cfg, corpus_counts(cfg))


def load_ckpt(args):
    from .train import load_checkpoint
    if args.ckpt is None:
        raise CliError("CKPT_REQUIRED", f"{args.command} needs --ckpt")
    return load_checkpoint(args.ckpt)


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def table(rows: list[dict], cols: list[str]) -> str:
    def fmt(v):
        return f"{v:.4g}" if isinstance(v, float) else str(v)
    cells = [[fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg, out):
    from .experiment import make_corpus
    man = make_corpus(cfg, corpus_counts(cfg), out_dir=out / "corpus")
    print(table([{"split": k, "cases": v} for k, v in sorted(man.counts().items())], ["split", "cases"]))
    print(f"manifest: {out / 'corpus' / 'manifest.json'}")


def cmd_train(args, cfg, out):
    from .experiment import ExperimentReport, pretrain_model
    from .synth import cases_for
    from .train import evaluate, save_checkpoint
    man = corpus(cfg, out)
    res = pretrain_model(args.model, cfg, man)
    ckpt = save_checkpoint(out / f"{args.model}.ckpt", res.best)
    rep = ExperimentReport("train", cfg.seed, cfg.to_dict())
    rep.curves["train"] = res.history
    score = rep.add("pretrain-test", evaluate(res.model, cases_for(man, "pretrain-test")))
    rep.summary = {"model": args.model, "best_epoch": res.best.epoch, "pretrain_test": score,
                   "checkpoint": ckpt.name}
    rep.write(out, "train")
    print(table(res.history, ["epoch", "lr", "train_loss", "val_dice"]))
    print(f"pretrain-test Dice {score:.4f}; checkpoint {ckpt}")


def cmd_pretrain_ssl(args, cfg, out):
    from .experiment import ExperimentReport, ssl_pretrain
    from .synth import cases_for
    from .train import save_checkpoint
    man = corpus(cfg, out)
    res = ssl_pretrain(cfg, cases_for(man, "ssl-pretrain"), args.steps)
    ckpt = save_checkpoint(out / "ssl.ckpt", res.best)
    rep = ExperimentReport("pretrain_ssl", cfg.seed, cfg.to_dict())
    rep.curves["ssl"] = res.history
    losses = [h["loss"] for h in res.history]
    rep.summary = {"steps": res.steps, "loss_first": losses[0], "loss_last": losses[-1], "checkpoint": ckpt.name}
    rep.write(out, "pretrain_ssl")
    print(f"{res.steps} steps, masked MSE {losses[0]:.4g} -> {losses[-1]:.4g}; checkpoint {ckpt}")


def cmd_finetune(args, cfg, out):
    from .experiment import run_few_shot
    from .synth import cases_for
    from .train import save_checkpoint
    ck = load_ckpt(args)
    man = corpus(cfg, out)
    k = cfg.few_shot_k if args.k is None else args.k
    ft, rep = run_few_shot(ck, cases_for(man, "finetune-train"), cases_for(man, "finetune-val"),
                           cases_for(man, "finetune-test"), cfg.train_config("finetune"), k,
                           surgery=args.surgery, config=cfg.to_dict())
    path = save_checkpoint(out / "finetune.ckpt", ft)
    rep.summary["checkpoint"] = path.name
    rep.write(out, "finetune")
    s = rep.summary
    print(f"K={k}: zero-shot Dice {s['zero_shot']:.4f} -> few-shot {s['few_shot']:.4f}; checkpoint {path}")


def cmd_eval(args, cfg, out):
    from .experiment import ExperimentReport, model_for_cases
    from .synth import cases_for
    from .train import evaluate
    ck = load_ckpt(args)
    cases = cases_for(corpus(cfg, out), args.split)
    if ck.kind == "mae":
        raise CliError("CKPT_INVALID", "an MAE checkpoint has no segmentation head; finetune it first")
    model, load = model_for_cases(ck, cases, surgery=args.surgery)
    rep = ExperimentReport("eval", cfg.seed, cfg.to_dict())
    score = rep.add(args.split, evaluate(model, cases))
    rep.summary = {"checkpoint": str(args.ckpt), "split": args.split, "mean_dice": score, "load": load}
    rep.write(out, f"eval_{args.split}")
    rows = rep.results[args.split]["cases"]
    print(table([{"case": r["case_id"], "modalities": "+".join(r["modalities"]), "dice": r["dice"]} for r in rows],
                ["case", "modalities", "dice"]))
    print(f"mean Dice {score:.4f}")


def cmd_experiment(args, cfg, out):
    from .experiment import run_protocol, run_ssl_comparison
    if args.no_baseline:
        cfg = type(cfg).from_dict({**cfg.to_dict(), "baseline": False})
    rep = run_protocol(cfg, corpus(cfg, out))
    rep.write(out, "experiment")
    kinds = [k for k in ("adavit", "concat") if k in rep.summary]
    cols = ["matched", "pretrain_test", "zero_shot", "few_shot", "backward"]
    print(table([{"model": k, **{c: rep.summary[k][c] for c in cols}} for k in kinds], ["model", *cols]))
    if args.ssl:
        ssl = run_ssl_comparison(cfg)
        ssl.write(out, "ssl_comparison")
        print(table([ssl.summary], ["ssl", "scratch", "ssl_steps", "mae_loss_first", "mae_loss_last"]))


def cmd_gradcheck(args, cfg, out):
    from .checks import run_suite
    rows = run_suite()
    for r in rows:
        r["pass"] = r["max_rel_err"] < GRADCHECK_TOL
    write_json(out / "gradcheck.json", {"tolerance": GRADCHECK_TOL,
                                       "rows": [{k: v for k, v in r.items() if k != "seconds"} for r in rows]})
    print(table(rows, ["name", "max_rel_err", "n_checks", "pass"]))
    failed = [r["name"] for r in rows if not r["pass"]]
    if failed:
        raise CliError("GRADCHECK_FAILED", f"relative error >= {GRADCHECK_TOL} in {failed}", exit_code=1)


def cmd_ablate(args, cfg, out):
    from .experiment import run_ablations
    which = tuple(w.strip() for w in args.which.split(",") if w.strip())
    bad = set(which) - {"mask_ratio", "fusion", "presets"}
    if bad:
        raise CliError("CONFIG_INVALID", f"unknown ablations {sorted(bad)}")
    rep = run_ablations(cfg, which, ssl_steps=args.steps)
    rep.write(out, "ablations")
    for name, rows in rep.summary.items():
        print(f"[{name}]")
        print(table(rows, list(rows[0])))


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "pretrain-ssl": cmd_pretrain_ssl, "finetune": cmd_finetune,
    "eval": cmd_eval, "experiment": cmd_experiment, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate,
}


def _fail(code: str, message: str, exit_code: int) -> int:
    print(json.dumps({"error": code, "message": message}), file=sys.stderr)
    return exit_code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _limit_threads(args.threads)
    import logging
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    from .train import CheckpointError
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg, out_dir(args))
    except CliError as exc:
        return _fail(exc.code, str(exc), exc.exit_code)
    except CheckpointError as exc:
        return _fail(exc.code, str(exc), 3)
    except FileNotFoundError as exc:
        return _fail("FILE_NOT_FOUND", str(exc), 3)
    return 0


if __name__ == "__main__":
    sys.exit(main())
