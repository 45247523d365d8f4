"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line with the measured
numbers, then asserts. Criteria 6 to 8 train real desk-scale models and take
most of the suite's runtime.
"""

import itertools
import json
import time

import numpy as np
import pytest

from adavit import tensor as T
from adavit.checks import op_cases, run_suite
from adavit.encoder import encode
from adavit.experiment import ExperimentConfig, preset_table, run_protocol, run_ssl_comparison
from adavit.mae import MaeConfig, MaePretrainer
from adavit.modality import dynamic_tokenize, plain_patch_embed
from adavit.model import AdaViT, ModelConfig
from adavit.synth import PhantomSpec, generate_case, generate_corpus, read_volume, write_volume
from adavit.train import (
    TrainConfig, adavit_from_checkpoint, build_model, dice_metric, load_checkpoint, predict, save_checkpoint,
    snapshot, train_ssl, train_supervised,
)

MODS = ["ADC", "TraceW", "T2"]
SEEDS = (0, 1, 2)


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def desk64():
    return ModelConfig(dtype="float64")


def desk_case(mods, seed):
    return generate_case(PhantomSpec(), list(mods), seed, f"acc-{seed}", dtype=np.float64)


# 1 -----------------------------------------------------------------------------

def test_criterion_1_gradient_integrity(capsys):
    start = time.perf_counter()
    rows = run_suite()
    secs = time.perf_counter() - start
    names = {r["name"] for r in rows}
    worst = max(rows, key=lambda r: r["max_rel_err"])
    e2e = {"e2e_seg_max_dice", "e2e_seg_mean_dice", "e2e_mae_masked_mse"}
    ok = worst["max_rel_err"] < 1e-4 and secs < 300 and e2e <= names and set(op_cases()) <= names
    verdict(capsys, 1, ok, f"{len(rows)} checks, worst {worst['name']} rel err {worst['max_rel_err']:.2e}, "
                           f"{secs:.1f}s")


# 2 -----------------------------------------------------------------------------

def test_criterion_2_variable_modality_totality(capsys, tmp_path):
    model = AdaViT(desk64(), MODS, seed=0)
    path = save_checkpoint(tmp_path / "m.ckpt", snapshot(model))
    model = build_model(load_checkpoint(path))
    shapes = {n: t.shape for n, t in model.store.items()}
    case = desk_case(MODS, 3)
    seen = []
    for r in (1, 2, 3):
        for subset in itertools.combinations(MODS, r):
            out = model(case.subset(list(subset)))
            seen.append(out.shape == (1, 32, 32, 32) and bool(np.all(np.isfinite(out.data))))
    same = shapes == {n: t.shape for n, t in model.store.items()}
    verdict(capsys, 2, all(seen) and len(seen) == 7 and same,
            f"{sum(seen)}/7 subsets give (1, 32, 32, 32); parameter shapes unchanged: {same}")


# 3 -----------------------------------------------------------------------------

def test_criterion_3_identity_scaling(capsys):
    model = AdaViT(desk64(), MODS, seed=0)
    rng = np.random.default_rng(1)
    model.dct.B.data = rng.standard_normal(model.dct.B.shape)  # nonzero bias so b_mod matters
    case = desk_case(MODS, 4)
    diff = max(np.abs(dynamic_tokenize(model.dct, model.registry, T.Tensor(case.volumes[m]), m).data
                      - plain_patch_embed(model.dct, T.Tensor(case.volumes[m])).data).max() for m in MODS)
    verdict(capsys, 3, diff < 1e-12, f"max abs diff {diff:.2e}")


# 4 -----------------------------------------------------------------------------

def test_criterion_4_order_invariance(capsys):
    model = AdaViT(desk64(), MODS, seed=0)
    case = desk_case(MODS, 5)
    ref = model(case).data
    bitwise = all(np.array_equal(model({m: case.volumes[m] for m in perm}).data, ref)
                  for perm in itertools.permutations(MODS))
    seq = model.sequence(case)
    out = encode(model.enc_cfg, model.store, seq)
    worst = 0.0
    for s in range(3):
        perm = np.random.default_rng(s).permutation(len(seq))
        out_p = encode(model.enc_cfg, model.store, seq.permuted(perm))
        worst = max(worst, np.abs(out_p.final.data - out.final.data[perm]).max(),
                    *(np.abs(out_p.taps[t].data - out.taps[t].data[perm]).max() for t in out.taps))
    verdict(capsys, 4, bitwise and worst < 1e-9,
            f"6 orderings bitwise identical: {bitwise}; token permutation max dev {worst:.1e}")


# 5 -----------------------------------------------------------------------------

def test_criterion_5_token_shape_laws(capsys):
    cfg = desk64()
    n_patch = 32 ** 3 // 8 ** 3
    seg = AdaViT(cfg, MODS, seed=0)
    bad = []
    for n in (1, 2, 3):
        case = desk_case(MODS[:n], 6)
        if len(seg.sequence(case)) != n * n_patch:
            bad.append(("unmasked", n))
        for rho in (0.0, 0.5, 0.7, 0.9):
            mae = MaePretrainer(cfg, MaeConfig(ratio=rho, decoder_depth=1), MODS, seed=0)
            plan = mae.plan(case, seed=n)
            out = mae(case, plan)
            if out.encoder_length != sum(len(plan.keep[m]) for m in plan.modalities):
                bad.append(("encoder", n, rho))
            if out.decoder_length != n * n_patch:
                bad.append(("decoder", n, rho))
    verdict(capsys, 5, not bad, f"12 (N, rho) combinations checked, violations: {bad}")


# 6 -----------------------------------------------------------------------------

def test_criterion_6_overfit_one_case(capsys):
    model = AdaViT(ModelConfig(), MODS, seed=0)
    case = generate_case(PhantomSpec(), MODS, 11, "overfit")
    res = train_supervised(model, [case], [], TrainConfig(lr_init=1e-3, epochs=300, batch_size=1, eval_every=300))
    dice = float(dice_metric(predict(model, case), case.label_channels()).mean())
    verdict(capsys, "6a", dice >= 0.95 and res.steps <= 300, f"train Dice {dice:.4f} after {res.steps} steps")


def test_criterion_6_desk_config(capsys):
    cfg = ModelConfig()
    assert (cfg.volume_shape, cfg.patch_size, cfg.embed_dim) == ((32, 32, 32), 8, 96)
    man = generate_corpus(PhantomSpec(), None, {"finetune-train": 64, "finetune-val": 16}, seed=0)
    train, val = man.load_split("finetune-train"), man.load_split("finetune-val")
    model = AdaViT(cfg, MODS, seed=0)
    res = train_supervised(model, train, val, TrainConfig(lr_init=1e-3, epochs=16, max_seconds=1800, eval_every=2))
    best = max(h.get("val_dice", -1.0) for h in res.history)
    ok = best >= 0.80 and res.seconds < 1800
    verdict(capsys, "6b", ok, f"val Dice {best:.4f} at epoch {res.best.epoch}, {res.seconds / 60:.1f} CPU-min")


# 7 -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def protocol_runs():
    return {s: run_protocol(ExperimentConfig(seed=s)).summary for s in SEEDS}


def test_criterion_7_mismatch_transfer(capsys, protocol_runs):
    lines, ok = [], True
    strictly = 0
    for s, summ in protocol_runs.items():
        a, c = summ["adavit"], summ["concat"]
        ok_a = a["zero_shot"] > 0 and a["zero_shot"] >= 0.5 * a["matched"]
        ok_b = a["few_shot"] >= a["zero_shot"] - 0.02
        strictly += a["few_shot"] > a["zero_shot"]
        ok_c = a["backward"] >= 0.7 * a["pretrain_test"]
        ok_d = (c["surgery"] and c["zero_filled_backward"] and "concat.incompatibility" in summ
                and c["zero_shot"] < a["zero_shot"] and c["backward"] < a["backward"])
        ok &= ok_a and ok_b and ok_c and ok_d
        lines.append(f"seed {s}: zs {a['zero_shot']:.3f}/matched {a['matched']:.3f}, fs {a['few_shot']:.3f}, "
                     f"bw {a['backward']:.3f}/pre {a['pretrain_test']:.3f}, concat zs {c['zero_shot']:.3f} "
                     f"bw {c['backward']:.3f} [{'a' * ok_a}{'b' * ok_b}{'c' * ok_c}{'d' * ok_d}]")
    ok &= strictly >= 2
    verdict(capsys, 7, ok, f"few-shot strictly better in {strictly}/3 seeds; " + "; ".join(lines))


# 8 -----------------------------------------------------------------------------

def test_criterion_8_ssl_benefit(capsys):
    cfg = ExperimentConfig(mae={"ratio": 0.7})
    case = generate_case(cfg.phantom_spec(), MODS, 5, "fixed")
    mae = MaePretrainer(cfg.model_config(), cfg.mae_config(), MODS, 0)
    losses = [h["loss"] for h in train_ssl(mae, [case], cfg.train_config("ssl"), steps=200).history]
    first_below = next((i + 1 for i, v in enumerate(losses) if v < 0.5 * losses[0]), None)

    wins, parts = 0, []
    for s in SEEDS:
        summ = run_ssl_comparison(cfg.with_seed(s), ssl_steps=2000).summary
        wins += summ["ssl"] >= summ["scratch"]
        parts.append(f"seed {s}: ssl {summ['ssl']:.3f} vs scratch {summ['scratch']:.3f}")
    ok = first_below is not None and wins >= 2
    verdict(capsys, 8, ok, f"MAE loss < 0.5x initial at step {first_below}; SSL >= scratch in {wins}/3 ({'; '.join(parts)})")


# 9 -----------------------------------------------------------------------------

def test_criterion_9_ablation_harness(capsys, tmp_path):
    from adavit.cli import main
    conf = tmp_path / "tiny.json"
    conf.write_text(json.dumps({
        "model": {"volume_shape": [16, 16, 16], "patch_size": 4, "embed_dim": 16, "num_heads": 2, "depth": 2,
                  "modality_dim": 4, "feature_size": 4},
        "phantom": {"lesion_radius": [2.5, 4.0]},
        "counts": {"pretrain-train": 2, "pretrain-val": 1, "pretrain-test": 2,
                   "finetune-train": 2, "finetune-val": 1, "finetune-test": 2},
        "pretrain": {"epochs": 1}, "finetune": {"epochs": 1}, "ssl_finetune": {"epochs": 1}, "ssl_cases": 2,
        "mae": {"decoder_depth": 1, "decoder_heads": 2}}))
    codes = [main(["ablate", "--config", str(conf), "--out-dir", str(tmp_path / w), "--which", w, "--steps", "2"])
             for w in ("mask_ratio", "fusion", "presets")]
    tables = {w: json.loads((tmp_path / w / "ablations.json").read_text())["summary"][w]
              for w in ("mask_ratio", "fusion", "presets")}
    rows = preset_table()
    shape_ok = ([r["ratio"] for r in tables["mask_ratio"]] == [0.5, 0.7, 0.9]
                and [r["fusion"] for r in tables["fusion"]] == ["max", "mean"])
    presets_ok = [(r["embed_dim"], r["num_heads"], r["depth"]) for r in rows] == [
        (768, 12, 12), (1024, 16, 24), (1280, 16, 32)] and all(
        r["built"] == r["analytic"] == r["depth"] * (12 * r["embed_dim"] ** 2 + 13 * r["embed_dim"]) for r in rows)
    counts = ", ".join(f"{r['preset']} {r['built']:,}" for r in rows)
    verdict(capsys, 9, codes == [0, 0, 0] and shape_ok and presets_ok,
            f"exit codes {codes}; table shapes ok: {shape_ok}; presets {counts}")


# 10 ----------------------------------------------------------------------------

def test_criterion_10_persistence(capsys, tmp_path):
    model = AdaViT(ModelConfig(), ["ADC", "TraceW"], seed=0)
    case = generate_case(PhantomSpec(), ["ADC", "TraceW"], 2, "p")
    train_supervised(model, [case], [], TrainConfig(lr_init=1e-3, epochs=2, batch_size=1))
    ck = snapshot(model)
    back = load_checkpoint(save_checkpoint(tmp_path / "m.ckpt", ck))
    roundtrip = back.params.keys() == ck.params.keys() and all(
        back.params[n].dtype == a.dtype and back.params[n].tobytes() == a.tobytes() for n, a in ck.params.items())

    ext = adavit_from_checkpoint(back, ["T2"])
    unchanged = all(ext.store[n].data.tobytes() == a.tobytes() for n, a in ck.params.items())
    new = sorted(set(ext.store.names()) - set(ck.params))

    vols_ok = True
    for dtype in (np.float32, np.float64, np.uint8):
        arr = (np.random.default_rng(0).random((5, 6, 7)) * 200).astype(dtype)
        write_volume(tmp_path / f"v_{dtype.__name__}.avol", arr)
        got = read_volume(tmp_path / f"v_{dtype.__name__}.avol")
        vols_ok &= got.dtype == arr.dtype and got.tobytes() == arr.tobytes()
    verdict(capsys, 10, roundtrip and unchanged and vols_ok and bool(new),
            f"checkpoint bitwise: {roundtrip}; existing params unchanged after adding T2: {unchanged} "
            f"(new tensors {new}); volumes bitwise: {vols_ok}")
