import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adavit import tensor as T
from adavit.modality import (
    ModalityError, ModalityRegistry, build_case_sequence, dynamic_tokenize, init_dct, init_tables,
    patch_grid, plain_patch_embed, project_modality, sinusoidal_3d,
)
from adavit.model import AdaViT
from adavit.tensor import ParamStore, ShapeError, Tensor

from conftest import MODS, tiny_case, tiny_config


def _setup(E=6, p=4, shape=(8, 8, 8), l=3, seed=0):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    reg = ModalityRegistry(store, E, l, seed)
    dct = init_dct(store, E, p, rng)
    tables = init_tables(store, reg, shape, p, rng)
    return store, reg, dct, tables, rng


def _brute_tokens(vol, W, B, p):
    """Per-patch dot products in z-fastest patch order."""
    gx, gy, gz = (s // p for s in vol.shape)
    rows = []
    for a, b, c in itertools.product(range(gx), range(gy), range(gz)):
        patch = vol[a * p:(a + 1) * p, b * p:(b + 1) * p, c * p:(c + 1) * p]
        rows.append([float((W[e, 0] * patch).sum() + B[e]) for e in range(W.shape[0])])
    return np.array(rows)


def test_identity_scaling_matches_plain_embedding():
    store, reg, dct, _, rng = _setup()
    reg.register("ADC")
    dct.B.data = rng.standard_normal(dct.B.shape)
    vol = Tensor(rng.uniform(0, 1, (8, 8, 8)))
    diff = np.abs(dynamic_tokenize(dct, reg, vol, "ADC").data - plain_patch_embed(dct, vol).data).max()
    assert diff < 1e-12


def test_dynamic_tokens_match_brute_force_with_trained_projector():
    store, reg, dct, _, rng = _setup()
    reg.register("T2")
    store["modality.projector.w"].data = rng.standard_normal((3, 12))
    store["modality.projector.b"].data = rng.standard_normal(12)
    dct.B.data = rng.standard_normal(6)
    vol = rng.uniform(0, 1, (8, 8, 8))
    m = store["modality.vec.T2"].data
    proj = m @ store["modality.projector.w"].data + store["modality.projector.b"].data
    W = dct.W.data * proj[:6, None, None, None, None]
    B = dct.B.data * proj[6:]
    expect = _brute_tokens(vol, W, B, 4)
    got = dynamic_tokenize(dct, reg, Tensor(vol), "T2").data
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_patch_order_is_z_fastest():
    store, reg, dct, _, _ = _setup(E=1, p=2, shape=(4, 6, 8))
    reg.register("ADC")
    dct.W.data = np.ones_like(dct.W.data)
    vol = np.zeros((4, 6, 8))
    vol[2, 4, 6] = 1.0  # patch (1, 2, 3) of grid (2, 3, 4)
    toks = dynamic_tokenize(dct, reg, Tensor(vol), "ADC").data[:, 0]
    assert np.flatnonzero(toks).tolist() == [1 * 12 + 2 * 4 + 3]


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.floats(-2, 2))
def test_projection_is_affine_in_the_modality_vector(m, scale):
    store, reg, _, _, rng = _setup()
    reg.register("a")
    store["modality.projector.w"].data = rng.standard_normal((3, 12))
    v = store["modality.vec.a"]
    v.data = np.array(m)
    w1, b1 = (t.data.copy() for t in project_modality(reg, "a"))
    v.data = np.array(m) * scale
    w2, b2 = (t.data for t in project_modality(reg, "a"))
    b = store["modality.projector.b"].data
    np.testing.assert_allclose(w2 - b[:6], scale * (w1 - b[:6]), atol=1e-9)
    np.testing.assert_allclose(b2 - b[6:], scale * (b1 - b[6:]), atol=1e-9)


def test_registry_errors_and_order():
    store, reg, *_ = _setup()
    for m in ["T2", "ADC", "TraceW"]:
        reg.register(m)
    with pytest.raises(ModalityError):
        reg.register("ADC")
    with pytest.raises(ModalityError):
        reg.vector("FLAIR")
    assert reg.order(["TraceW", "T2"]) == ["T2", "TraceW"]
    assert reg.ensure(["ADC", "SWI"]) == ["SWI"]


def test_registering_a_modality_leaves_existing_values_untouched():
    model = AdaViT(tiny_config(), ["ADC", "TraceW"], seed=0)
    before = {n: t.data.copy() for n, t in model.store.items()}
    model.register_modality("T2")
    for n, a in before.items():
        assert np.array_equal(model.store[n].data, a), n
    assert set(model.store.names()) - set(before) == {"modality.vec.T2", "modality.emb.T2"}


@pytest.mark.parametrize("n_mod", [1, 2, 3])
def test_sequence_length_is_modalities_times_patches(n_mod):
    model = AdaViT(tiny_config(), MODS, seed=0)
    seq = model.sequence(tiny_case(MODS[:n_mod]))
    assert len(seq) == seq.tokens.shape[0] == n_mod * 64
    assert seq.modalities == MODS[:n_mod]


def test_keep_selects_patches_and_provenance():
    model = AdaViT(tiny_config(), MODS, seed=0)
    case = tiny_case(["ADC", "T2"])
    keep = {"ADC": [5, 1], "T2": [0, 63, 7]}
    full = model.sequence(case)
    part = model.sequence(case, keep=keep)
    assert part.provenance == [("ADC", 1), ("ADC", 5), ("T2", 0), ("T2", 7), ("T2", 63)]
    rows = [0 * 64 + 1, 5, 64 + 0, 64 + 7, 64 + 63]
    np.testing.assert_array_equal(part.tokens.data, full.tokens.data[rows])


def test_position_shared_across_modalities():
    store, reg, dct, tables, rng = _setup()
    for m in ("a", "b"):
        reg.register(m)
    vol = np.zeros((8, 8, 8))
    seq = build_case_sequence(dct, reg, tables, {"a": vol, "b": vol}, modality_embedding=False)
    np.testing.assert_array_equal(seq.tokens.data[:8], seq.tokens.data[8:])
    np.testing.assert_array_equal(seq.tokens.data[:8], tables.pos.data)


def test_modality_dict_order_does_not_change_tokens(case3):
    model = AdaViT(tiny_config(), MODS, seed=0)
    a = model.sequence(case3)
    b = model.sequence({m: case3.volumes[m] for m in reversed(MODS)})
    assert np.array_equal(a.tokens.data, b.tokens.data)
    assert a.provenance == b.provenance


def test_sequence_errors():
    store, reg, dct, tables, _ = _setup()
    reg.register("a")
    reg.register("b")
    with pytest.raises(ValueError):
        build_case_sequence(dct, reg, tables, {})
    with pytest.raises(ModalityError):
        build_case_sequence(dct, reg, tables, {"zz": np.zeros((8, 8, 8))})
    with pytest.raises(ShapeError):
        build_case_sequence(dct, reg, tables, {"a": np.zeros((8, 8, 8)), "b": np.zeros((8, 8, 12))})
    with pytest.raises(ShapeError):
        build_case_sequence(dct, reg, tables, {"a": np.zeros((8, 8, 12))})
    with pytest.raises(ShapeError):
        patch_grid((8, 8, 9), 4)


def test_sinusoidal_table_shape_and_distinct_rows():
    tab = sinusoidal_3d((2, 3, 4), 18)
    assert tab.shape == (24, 18)
    assert len({tuple(np.round(r, 12)) for r in tab}) == 24
