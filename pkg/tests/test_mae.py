import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adavit import tensor as T
from adavit.mae import (
    MaeConfig, MaePretrainer, masked_count, mse_masked, patch_mask_volume, patchify, reconstruction_panels,
    sample_mask, unpatchify,
)
from adavit.tensor import Tensor

from conftest import MODS, tiny_case, tiny_config


def _mae(ratio=0.5, **kw):
    return MaePretrainer(tiny_config(), MaeConfig(ratio=ratio, decoder_depth=1, decoder_heads=2, **kw), MODS, seed=0)


@pytest.mark.parametrize("ratio", [0.0, 0.5, 0.7, 0.9])
@pytest.mark.parametrize("n_mod", [1, 2, 3])
def test_length_laws(ratio, n_mod):
    mae = _mae(ratio)
    case = tiny_case(MODS[:n_mod])
    plan = mae.plan(case, seed=4)
    out = mae(case, plan)
    assert out.encoder_length == sum(len(plan.keep[m]) for m in plan.modalities)
    assert out.encoder_length == n_mod * (64 - masked_count(ratio, 64))
    assert out.decoder_length == n_mod * 64
    for m in plan.modalities:
        assert out.recon[m].shape == (16, 16, 16)


def test_mask_counts_examples():
    assert masked_count(0.5, 8) == 4
    assert masked_count(0.7, 64) == 45
    assert masked_count(0.0, 64) == 0
    assert masked_count(0.99, 4) == 3  # one patch always survives


def test_two_modalities_eight_patches_half_masked():
    plan = sample_mask(0.5, 8, seed=1, modalities=["a", "b"])
    assert sum(len(v) for v in plan.keep.values()) == 8


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.95), st.integers(1, 100), st.integers(0, 1000))
def test_mask_partition(ratio, n, seed):
    plan = sample_mask(ratio, n, seed, ["x", "y"])
    for m in ("x", "y"):
        both = np.concatenate([plan.keep[m], plan.mask[m]])
        assert sorted(both.tolist()) == list(range(n))
        assert len(plan.keep[m]) >= 1


def test_masks_differ_between_modalities_and_are_seeded():
    a = sample_mask(0.5, 64, 3, ["x", "y"])
    b = sample_mask(0.5, 64, 3, ["x", "y"])
    assert np.array_equal(a.mask["x"], b.mask["x"])
    assert not np.array_equal(a.mask["x"], a.mask["y"])


def test_bad_ratio():
    with pytest.raises(ValueError):
        sample_mask(1.0, 8, 0)
    with pytest.raises(ValueError):
        MaeConfig(ratio=-0.1)


def test_patchify_roundtrip():
    vol = np.random.default_rng(0).standard_normal((8, 4, 12))
    rows = patchify(vol, 4)
    assert rows.shape == (2 * 1 * 3, 64)
    np.testing.assert_array_equal(rows[1], vol[0:4, 0:4, 4:8].ravel())
    np.testing.assert_array_equal(unpatchify(Tensor(rows), (2, 1, 3), 4).data, vol)


def test_mse_all_masked_constant_field():
    plan = sample_mask(0.5, 8, 0, ["a"])
    plan.mask["a"] = np.arange(8)
    plan.keep["a"] = np.array([], dtype=int)
    loss = mse_masked({"a": Tensor(np.zeros((8, 8, 8)))}, {"a": np.ones((8, 8, 8))}, plan, 4)
    assert float(loss.data) == 1.0


def test_mse_toy_matches_hand_sum():
    rng = np.random.default_rng(2)
    pred, tgt = rng.standard_normal((4, 4, 8)), rng.standard_normal((4, 4, 8))
    plan = sample_mask(0.5, 2, 0, ["a"])
    (masked,) = plan.mask["a"]
    sl = slice(0, 4) if masked == 0 else slice(4, 8)
    hand = sum((pred[i, j, k] - tgt[i, j, k]) ** 2 for i in range(4) for j in range(4) for k in range(8)
               if sl.start <= k < sl.stop) / 64
    got = float(mse_masked({"a": Tensor(pred)}, {"a": tgt}, plan, 4).data)
    assert abs(got - hand) < 1e-12


def test_loss_gradient_is_zero_on_unmasked_patches():
    mae = _mae(0.5)
    case = tiny_case(["ADC", "T2"])
    plan = mae.plan(case, seed=0)
    out = mae(case, plan)
    preds = {m: Tensor(r.data.copy(), requires_grad=True) for m, r in out.recon.items()}
    mse_masked(preds, {m: case.volumes[m] for m in plan.modalities}, plan, 4).backward()
    for m, t in preds.items():
        visible = patch_mask_volume(plan.keep[m], (4, 4, 4), 4) > 0
        assert np.all(t.grad[visible] == 0)
        assert np.all(t.grad[~visible] != 0)


def test_all_patch_flag_changes_loss():
    case = tiny_case(["ADC"])
    a, b = _mae(0.5), _mae(0.5, loss_all_patches=True)
    plan = a.plan(case, 0)
    assert float(a(case, plan).loss.data) != float(b(case, plan).loss.data)


def test_decoder_sees_encoder_embeddings_for_kept_tokens():
    mae = _mae(0.5)
    case = tiny_case(["ADC", "TraceW"])
    plan = mae.plan(case, 1)
    out = mae(case, plan)
    reg = mae.registry
    pos = mae.backbone.tables.pos.data
    for k, (m, i) in enumerate(out.decoder_provenance):
        np.testing.assert_array_equal(out.decoder_embeddings.data[k], pos[i] + reg.embedding(m).data)


def test_determinism_bitwise():
    case = tiny_case(MODS)
    runs = []
    for _ in range(2):
        mae = _mae(0.7)
        out = mae(case, mae.plan(case, 9))
        out.loss.backward()
        runs.append((out.loss.data.copy(), {n: t.grad.copy() for n, t in mae.store.items() if t.grad is not None}))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert runs[0][1].keys() == runs[1][1].keys()
    assert all(np.array_equal(runs[0][1][n], runs[1][1][n]) for n in runs[0][1])


def test_backbone_names_match_segmenter():
    from adavit.model import AdaViT
    mae = _mae()
    seg = AdaViT(tiny_config(), MODS, seed=0)
    shared = [n for n in seg.store.names() if not n.startswith("seg.")]
    assert set(shared) <= set(mae.store.names())
    for n in shared:
        assert mae.store[n].shape == seg.store[n].shape


def test_reconstruction_panels():
    mae = _mae(0.5)
    case = tiny_case(["ADC"])
    plan = mae.plan(case, 0)
    panels = reconstruction_panels(case, plan, mae(case, plan), 4)
    p = panels["ADC"]
    assert set(p) == {"original", "masked", "reconstructed"}
    hidden = patch_mask_volume(plan.mask["ADC"], (4, 4, 4), 4) > 0
    assert np.all(p["masked"][hidden] == 0)
