"""Small synthetic models for tests, demos and benchmarks.

Weights are N(0, 0.02^2) from the package PRNG (one stream per tensor), norm
gains are 1 + N(0, 0.02^2). Nothing here is trained; the models only need to
be generic enough that invariance and watermark decoding are non-trivial.
"""
from __future__ import annotations

import numpy as np

from .model_graph import ModelArch
from .rng import SplitMix64, mix_seed
from .tensor_store import Checkpoint

INIT_STD = 0.02


def llama_like(L: int = 4, d: int = 64, h: int = 4, d_ff: int = 128, vocab: int = 256) -> ModelArch:
    """RMSnorm + SwiGLU + rotary, no biases."""
    return ModelArch(d=d, L=L, h=h, d_k=d // h, d_v=d // h, d_ff=d_ff, vocab=vocab,
                     norm_kind="rmsnorm", activation="swiglu", positional="rotary", has_biases=False)


def classic(L: int = 4, d: int = 64, h: int = 4, d_ff: int = 128, vocab: int = 256) -> ModelArch:
    """Layernorm + ReLU + FFN biases, no positional encoding."""
    return ModelArch(d=d, L=L, h=h, d_k=d // h, d_v=d // h, d_ff=d_ff, vocab=vocab,
                     norm_kind="layernorm", activation="relu", positional="none", has_biases=True)


def random_checkpoint(arch: ModelArch, seed: int = 0, dtype: str = "F64", std: float = INIT_STD) -> Checkpoint:
    arrays = {}
    for ordinal, (name, shape) in enumerate(arch.expected_shapes().items()):
        rng = SplitMix64(mix_seed(seed, ordinal))
        values = std * rng.normal(int(np.prod(shape))).reshape(shape)
        if name in _gain_names(arch):
            values = values + 1.0
        arrays[name] = values
    return Checkpoint.from_arrays(arrays, dtype, {"generator": "invmark.toy", "seed": str(seed)})


def _gain_names(arch: ModelArch) -> set[str]:
    names = {arch.name("Ln_out_gain")}
    for layer in range(arch.L):
        names |= {arch.name("Ln_att_gain", layer), arch.name("Ln_ffn_gain", layer)}
    return names
