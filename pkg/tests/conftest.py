import numpy as np
import pytest

from adavit.model import ModelConfig
from adavit.synth import PhantomSpec, generate_case

MODS = ["ADC", "TraceW", "T2"]


def tiny_config(**kw) -> ModelConfig:
    base = dict(volume_shape=(16, 16, 16), patch_size=4, embed_dim=16, num_heads=2, depth=2,
                modality_dim=4, feature_size=4, dtype="float64")
    return ModelConfig(**{**base, **kw})


def tiny_spec(**kw) -> PhantomSpec:
    return PhantomSpec(**{"shape": (16, 16, 16), "lesion_radius": (2.5, 4.0), **kw})


def tiny_case(mods=("ADC", "TraceW"), seed=1, dtype=np.float64):
    return generate_case(tiny_spec(), list(mods), seed, f"tiny-{seed}", dtype=dtype)


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture
def case3():
    return tiny_case(MODS)
