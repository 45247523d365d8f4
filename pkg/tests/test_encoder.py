import math

import numpy as np
import pytest

from adavit import tensor as T
from adavit.encoder import (
    PRESETS, EncoderConfig, attention, block, default_taps, encode, init_blocks, init_encoder,
)
from adavit.modality import TokenSequence
from adavit.model import AdaViT
from adavit.tensor import ParamStore, Tensor

from conftest import MODS, tiny_case, tiny_config


def _naive_attention(q, k, v, heads):
    n, E = q.shape
    dh = E // heads
    out = np.zeros_like(q)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            s = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in range(n)])
            w = np.exp(s - s.max())
            w /= w.sum()
            out[i, sl] = sum(w[j] * v[j, sl] for j in range(n))
    return out


def test_attention_matches_loop_oracle():
    rng = np.random.default_rng(0)
    q, k, v = (rng.standard_normal((5, 6)) for _ in range(3))
    got = attention(Tensor(q), Tensor(k), Tensor(v), 3).data
    np.testing.assert_allclose(got, _naive_attention(q, k, v, 3), atol=1e-12)


def _naive_block_params(E, ratio):
    # count by listing each tensor's shape
    shapes = [(E,), (E,), (E, 3 * E), (3 * E,), (E, E), (E,), (E,), (E,),
              (E, ratio * E), (ratio * E,), (ratio * E, E), (E,)]
    return sum(math.prod(s) for s in shapes)


@pytest.mark.parametrize("name", list(PRESETS))
def test_preset_parameter_counts(name):
    cfg = EncoderConfig.preset(name)
    store = ParamStore()
    init_encoder(store, cfg, np.random.default_rng(0), np.float32, meta=True)
    E = cfg.embed_dim
    assert store.num_values() == cfg.depth * (12 * E * E + 13 * E) == cfg.depth * _naive_block_params(E, 4)
    assert cfg.param_count() == store.num_values()


def test_default_taps():
    assert default_taps(12, 4) == [3, 6, 9, 12]
    assert default_taps(4, 3) == [1, 3, 4]
    assert default_taps(24, 4) == [6, 12, 18, 24]


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        EncoderConfig(embed_dim=10, num_heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(depth=2, tap_layers=[3])


def test_permutation_equivariance(case3):
    model = AdaViT(tiny_config(), MODS, seed=0)
    seq = model.sequence(case3)
    perm = np.random.default_rng(5).permutation(len(seq))
    out = encode(model.enc_cfg, model.store, seq)
    out_p = encode(model.enc_cfg, model.store, seq.permuted(perm))
    assert np.abs(out_p.final.data - out.final.data[perm]).max() < 1e-9
    for t in out.taps:
        assert np.abs(out_p.taps[t].data - out.taps[t].data[perm]).max() < 1e-9
    assert out_p.provenance == [out.provenance[i] for i in perm]


@pytest.mark.parametrize("n", [1, 7, 64, 130])
def test_blocks_accept_any_length(n):
    store = ParamStore()
    init_blocks(store, "enc", 8, 1, 4, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).standard_normal((n, 8)))
    assert block(x, store, "enc.blocks.0", 2).shape == (n, 8)


def test_taps_are_post_block_outputs():
    model = AdaViT(tiny_config(depth=2, tap_layers=[1, 2]), ["ADC"], seed=0)
    seq = model.sequence(tiny_case(["ADC"]))
    out = encode(model.enc_cfg, model.store, seq)
    after1 = block(seq.tokens, model.store, "encoder.blocks.0", 2)
    np.testing.assert_array_equal(out.taps[1].data, after1.data)
    np.testing.assert_array_equal(out.taps[2].data, out.final.data)


def test_empty_sequence_rejected():
    cfg = EncoderConfig(embed_dim=8, num_heads=2, depth=1)
    with pytest.raises(ValueError):
        encode(cfg, ParamStore(), TokenSequence(Tensor(np.zeros((0, 8))), [], (1, 1, 1)))
