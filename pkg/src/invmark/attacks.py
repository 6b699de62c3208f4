"""Weight-processing attacks used to probe watermark robustness.

Fine-tuning is not simulated; Gaussian noise is its cheap stand-in.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import SplitMix64, mix_seed
from .tensor_store import Checkpoint


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    sigma: float = 0.0
    bits: int = 8
    sparsity: float = 0.0
    seed: int = 0
    relative: bool = False  # noise sigma as a multiple of each tensor's std

    def __post_init__(self):
        if self.kind not in ("noise", "quantize", "prune"):
            raise ValueError(f"unknown attack {self.kind!r}")


def add_noise(ckpt: Checkpoint, sigma: float, seed: int = 0, relative: bool = False) -> Checkpoint:
    """Add i.i.d. N(0, sigma^2) to every tensor, gains and biases included.

    Each tensor draws from its own stream seeded by ``(seed, tensor ordinal)``.
    With ``relative`` the standard deviation is ``sigma * std(tensor)``.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return ckpt
    out = {}
    for ordinal, (name, t) in enumerate(ckpt.tensors.items()):
        x = t.array.astype(np.float64)
        scale = sigma * float(x.std()) if relative else sigma
        rng = SplitMix64(mix_seed(seed, ordinal))
        out[name] = x + scale * rng.normal(x.size).reshape(x.shape)
    return ckpt.replace(out)


def quantize_array(x: np.ndarray, bits: int) -> np.ndarray:
    """Round to the nearest of ``2**bits`` evenly spaced levels spanning [min, max].

    Ties go to the lower level. The top level is pinned to ``max`` exactly so
    that quantizing twice is a no-op.
    """
    x = np.asarray(x, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        return x.copy()
    n = (1 << bits) - 1
    step = (hi - lo) / n
    j = np.clip(np.ceil((x - lo) / step - 0.5), 0, n)
    return np.where(j == n, hi, lo + j * step)


def quantize(ckpt: Checkpoint, bits: int) -> Checkpoint:
    if bits < 1:
        raise ValueError("bits must be at least 1")
    return ckpt.replace({name: quantize_array(t.array, bits) for name, t in ckpt.tensors.items()})


def prune(ckpt: Checkpoint, sparsity: float) -> Checkpoint:
    """Global magnitude pruning over all matrices; vectors (gains, biases) are left alone.

    The ``floor(sparsity * n)`` smallest magnitudes are zeroed, ties broken by
    tensor order then flat index.
    """
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError("sparsity must lie in [0, 1]")
    names = [n for n, t in ckpt.tensors.items() if t.array.ndim == 2]
    if not names:
        return ckpt
    flat = np.concatenate([np.abs(ckpt[n].astype(np.float64)).ravel() for n in names])
    n_zero = int(np.floor(sparsity * flat.size))
    if n_zero == 0:
        return ckpt
    order = np.argsort(flat, kind="stable")
    mask = np.ones(flat.size, dtype=bool)
    mask[order[:n_zero]] = False
    out, start = {}, 0
    for n in names:
        arr = ckpt[n]
        stop = start + arr.size
        out[n] = np.where(mask[start:stop].reshape(arr.shape), arr, 0).astype(arr.dtype)
        start = stop
    return ckpt.replace(out)


def apply_attack(ckpt: Checkpoint, spec: AttackSpec) -> Checkpoint:
    if spec.kind == "noise":
        return add_noise(ckpt, spec.sigma, spec.seed, spec.relative)
    if spec.kind == "quantize":
        return quantize(ckpt, spec.bits)
    return prune(ckpt, spec.sparsity)
