"""Finite-difference suite over every differentiable op and the end-to-end model paths."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .gradcheck import GradcheckResult, gradcheck
from .tensor import Tensor


def _rand(rng, *shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def op_cases(seed: int = 7) -> dict[str, tuple[Callable, list[Tensor]]]:
    rng = np.random.default_rng(seed)
    x45 = lambda: _rand(rng, 4, 5)
    pos = lambda *s: _rand(rng, *s, lo=0.5, hi=2.0)
    return {
        "add": (T.add, [x45(), _rand(rng, 5)]),
        "sub": (T.sub, [x45(), _rand(rng, 5)]),
        "mul": (T.mul, [x45(), _rand(rng, 5)]),
        "div": (T.div, [x45(), pos(5)]),
        "matmul": (T.matmul, [_rand(rng, 3, 4), _rand(rng, 4, 2)]),
        "matmul_batched": (T.matmul, [_rand(rng, 2, 3, 4), _rand(rng, 2, 4, 2)]),
        "exp": (T.exp, [x45()]),
        "log": (T.log, [pos(4, 5)]),
        "square": (T.square, [x45()]),
        "sqrt": (T.sqrt, [pos(4, 5)]),
        "tanh": (T.tanh, [x45()]),
        "sigmoid": (T.sigmoid, [x45()]),
        "gelu": (T.gelu, [x45()]),
        "sum_axis": (lambda a: T.tsum(a, axis=0), [x45()]),
        "mean": (T.mean, [x45()]),
        "reshape": (lambda a: T.reshape(a, (2, 10)), [x45()]),
        "transpose": (lambda a: T.transpose(a, (1, 0)), [x45()]),
        "swap_last": (T.swap_last, [_rand(rng, 2, 3, 4)]),
        "getitem": (lambda a: a[1:3], [x45()]),
        "take_rows": (lambda a: T.take_rows(a, [0, 2, 2, 3]), [x45()]),
        "concat": (lambda a, b: T.concat([a, b], axis=0), [x45(), _rand(rng, 2, 5)]),
        "stack": (lambda a, b: T.stack([a, b], axis=0), [x45(), x45()]),
        "pad_zeros": (lambda a: T.pad_zeros(a, 1, (0, 1)), [x45()]),
        "softmax": (lambda a: T.softmax(a, -1), [x45()]),
        "layer_norm": (lambda a, g, b: T.layer_norm(a, g, b, 1e-5), [x45(), _rand(rng, 5), _rand(rng, 5)]),
        "channel_scale": (T.channel_scale, [_rand(rng, 3, 2, 2), _rand(rng, 3)]),
        "channel_bias": (T.channel_bias, [_rand(rng, 3, 2, 2), _rand(rng, 3)]),
        "conv3d_patch": (lambda x, w, b: T.conv3d(x, w, b, stride=2),
                         [_rand(rng, 2, 4, 4, 4), _rand(rng, 3, 2, 2, 2, 2), _rand(rng, 3)]),
        "conv3d_3x3x3": (lambda x, w, b: T.conv3d(x, w, b, stride=1, padding=1),
                         [_rand(rng, 2, 4, 4, 4), _rand(rng, 3, 2, 3, 3, 3), _rand(rng, 3)]),
        "conv3d_3x3x3_many_in": (lambda x, w, b: T.conv3d(x, w, b, stride=1, padding=1),
                                 [_rand(rng, 4, 3, 4, 5), _rand(rng, 2, 4, 3, 3, 3), _rand(rng, 2)]),
        "conv3d_1x1x1": (lambda x, w: T.conv3d(x, w, None, stride=1),
                         [_rand(rng, 3, 2, 3, 2), _rand(rng, 2, 3, 1, 1, 1)]),
        "conv3d_strided": (lambda x, w: T.conv3d(x, w, None, stride=2, padding=1),
                           [_rand(rng, 1, 7, 7, 7), _rand(rng, 2, 1, 3, 3, 3)]),
        "transposed_conv3d": (lambda x, w, b: T.transposed_conv3d(x, w, b, stride=2),
                              [_rand(rng, 3, 2, 2, 2), _rand(rng, 3, 2, 2, 2, 2), _rand(rng, 2)]),
        "max_over_axis": (lambda a: T.max_over_axis(a, 0), [x45()]),
        "segment_max": (lambda a: T.segment_reduce(a, [0, 1, 0, 1], 2, "max"), [x45()]),
        "segment_mean": (lambda a: T.segment_reduce(a, [0, 1, 0, 0], 2, "mean"), [x45()]),
    }


def _tiny_model_config(fusion: str):
    from .model import ModelConfig
    return ModelConfig(volume_shape=(8, 8, 8), patch_size=4, embed_dim=8, num_heads=2, depth=2,
                       modality_dim=4, feature_size=2, fusion=fusion, dtype="float64")


def _generic_point(model, rng, scale: float = 0.2) -> None:
    # the init has zero projectors and 0.02-std linears, which leaves some gradients
    # near 1e-7 where finite differences only measure rounding; check at a generic point
    for _, t in model.store.items():
        t.data = t.data + scale * rng.standard_normal(t.shape)


def model_cases(seed: int = 3) -> dict[str, tuple[Callable, list[Tensor]]]:
    from .mae import MaeConfig, MaePretrainer
    from .model import AdaViT
    from .synth import PhantomSpec, generate_case
    from .train import dice_loss

    spec = PhantomSpec(shape=(8, 8, 8), lesion_radius=(1.5, 2.5))
    case = generate_case(spec, ["ADC", "TraceW"], seed, "gc", dtype=np.float64)
    rng = np.random.default_rng(seed)
    cases = {}
    for fusion in ("max", "mean"):
        model = AdaViT(_tiny_model_config(fusion), ["ADC", "TraceW"], seed)
        _generic_point(model, rng)
        params = [t for _, t in model.store.items()]
        target = case.label_channels()

        def seg_loss(*_, model=model, target=target):
            return dice_loss(model(case), target)

        cases[f"e2e_seg_{fusion}_dice"] = (seg_loss, params)

    mae = MaePretrainer(_tiny_model_config("max"), MaeConfig(ratio=0.5, decoder_depth=1, decoder_heads=2,
                                                               decoder_dim=8), ["ADC", "TraceW"], seed)
    _generic_point(mae, rng)
    plan = mae.plan(case, seed)
    cases["e2e_mae_masked_mse"] = (lambda *_: mae(case, plan).loss, [t for _, t in mae.store.items()])
    return cases


def run_suite(include_models: bool = True, seed: int = 7) -> list[dict]:
    """Rows ``{name, max_rel_err, n_checks, seconds}`` for every check, at float64."""
    rows = []
    suites = [op_cases(seed)]
    if include_models:
        suites.append(model_cases())
    for suite in suites:
        for name, (fn, inputs) in suite.items():
            start = time.perf_counter()
            many = len(inputs) > 8
            res: GradcheckResult = gradcheck(fn, inputs, name=name, n_dirs=2 if many else 6,
                                             elementwise_limit=0 if many else 40, seed=seed)
            rows.append({"name": name, "max_rel_err": res.max_rel_err, "n_checks": res.n_checks,
                         "seconds": time.perf_counter() - start})
    return rows
