"""Minimal float64 decoder-only transformer.

Pre-norm residual blocks (layernorm or RMSnorm), causal multi-head attention
with optional interleaved-pair rotary embeddings, ReLU or SwiGLU feed-forward,
a final norm and an output projection. It only exists to check that
watermarked checkpoints compute the same function as the original.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .model_graph import ModelArch, validate_checkpoint
from .rng import SplitMix64
from .tensor_store import Checkpoint

NORM_EPS = 1e-5
MAX_CONTEXT = 4096


def load_weights(ckpt: Checkpoint | Mapping[str, np.ndarray], arch: ModelArch) -> dict[str, np.ndarray]:
    if isinstance(ckpt, Checkpoint):
        validate_checkpoint(ckpt, arch)
        return ckpt.float64()
    return {n: np.asarray(a, dtype=np.float64) for n, a in ckpt.items()}


def normalize(z: np.ndarray, kind: str, gain: np.ndarray, bias: np.ndarray | None = None,
              eps: float = NORM_EPS) -> np.ndarray:
    if kind == "layernorm":
        z = z - z.mean(axis=-1, keepdims=True)
    out = z / np.sqrt(np.mean(z * z, axis=-1, keepdims=True) + eps) * gain
    if bias is not None:
        out = out + bias
    return out


def rotary_frequencies(d_k: int, base: float = 10000.0) -> np.ndarray:
    """theta_i = base^(-2i/d_k) for the d_k/2 pairs of a head."""
    return base ** (-2.0 * np.arange(d_k // 2) / d_k)


def apply_rotary(x: np.ndarray, positions: np.ndarray, base: float = 10000.0) -> np.ndarray:
    """Rotate pair (2i, 2i+1) of each row by ``position * theta_i``.

    ``x`` has shape (..., n, d_k) and ``positions`` shape (n,).
    """
    d_k = x.shape[-1]
    ang = np.asarray(positions, dtype=np.float64)[:, None] * rotary_frequencies(d_k, base)[None, :]
    c, s = np.cos(ang), np.sin(ang)
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x, dtype=np.float64)
    out[..., 0::2] = x0 * c - x1 * s
    out[..., 1::2] = x0 * s + x1 * c
    return out


def _softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _layer(w, arch: ModelArch, z: np.ndarray, layer: int, attn_out: list | None):
    nm = lambda role: w[arch.name(role, layer)]  # noqa: E731
    opt = lambda role: nm(role) if arch.has_role(role) else None  # noqa: E731
    b, n, _ = z.shape
    h, dk, dv = arch.h, arch.d_k, arch.d_v

    a = normalize(z, arch.norm_kind, nm("Ln_att_gain"), opt("Ln_att_bias"))
    q = (a @ nm("Wq")).reshape(b, n, h, dk).transpose(0, 2, 1, 3)
    k = (a @ nm("Wk")).reshape(b, n, h, dk).transpose(0, 2, 1, 3)
    v = (a @ nm("Wv")).reshape(b, n, h, dv).transpose(0, 2, 1, 3)
    if arch.positional == "rotary":
        pos = np.arange(n)
        q, k = apply_rotary(q, pos, arch.rotary_base), apply_rotary(k, pos, arch.rotary_base)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dk)
    scores = np.where(np.tril(np.ones((n, n), dtype=bool)), scores, -np.inf)
    probs = _softmax(scores)
    if attn_out is not None:
        attn_out.append(probs)
    heads = (probs @ v).transpose(0, 2, 1, 3).reshape(b, n, h * dv)
    z = z + heads @ nm("Wo")

    f = normalize(z, arch.norm_kind, nm("Ln_ffn_gain"), opt("Ln_ffn_bias"))
    pre = f @ nm("W1")
    if arch.has_biases:
        pre = pre + nm("b1")
    if arch.activation == "swiglu":
        act = pre / (1.0 + np.exp(-pre)) * (f @ nm("W3"))
    else:
        act = np.maximum(pre, 0.0)
    out = act @ nm("W2")
    if arch.has_biases:
        out = out + nm("b2")
    return z + out


def forward_batch(weights: Mapping[str, np.ndarray], arch: ModelArch, tokens: np.ndarray,
                  attn_out: list | None = None) -> np.ndarray:
    """Logits of shape (B, n, vocab) for a (B, n) token array.

    If ``attn_out`` is a list, each layer's attention weights (B, h, n, n) are appended to it.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise ValueError("tokens must be a non-empty (batch, length) array")
    if tokens.shape[1] > MAX_CONTEXT:
        raise ValueError(f"sequence longer than the context bound {MAX_CONTEXT}")
    if tokens.min() < 0 or tokens.max() >= arch.vocab:
        raise ValueError(f"token ids must lie in [0, {arch.vocab})")
    z = weights[arch.name("E")][tokens]
    for layer in range(arch.L):
        z = _layer(weights, arch, z, layer, attn_out)
    bias = weights[arch.name("Ln_out_bias")] if arch.norm_kind == "layernorm" else None
    return normalize(z, arch.norm_kind, weights[arch.name("Ln_out_gain")], bias) @ weights[arch.name("W_out")]


def forward(ckpt, arch: ModelArch, seq: Sequence[int]) -> np.ndarray:
    """Logits (n, vocab) for one token sequence."""
    return forward_batch(load_weights(ckpt, arch), arch, np.asarray(seq)[None, :])[0]


def greedy_tokens(logits: np.ndarray) -> np.ndarray:
    """Argmax along the last axis; ties resolve to the lowest token id."""
    return np.argmax(logits, axis=-1)


def greedy_next_tokens(ckpt, arch: ModelArch, seq: Sequence[int]) -> np.ndarray:
    return greedy_tokens(forward(ckpt, arch, seq))


def random_sequences(n_seqs: int, length: int, vocab: int, seed: int = 0) -> np.ndarray:
    return SplitMix64(seed).integers(vocab, n_seqs * length).reshape(n_seqs, length)


def _batched_logits(weights, arch, seqs: np.ndarray, batch: int = 64):
    for start in range(0, len(seqs), batch):
        yield start, forward_batch(weights, arch, seqs[start:start + batch])


@dataclass
class DistortionReport:
    fraction: float
    n_tokens: int
    bucket_edges: list[int]  # position ranges [edges[i], edges[i+1])
    bucket_fractions: list[float]


def distortion(ckpt_a, ckpt_b, arch: ModelArch, seqs, n_buckets: int = 4) -> DistortionReport:
    """Share of positions whose greedy next token differs between two checkpoints."""
    seqs = np.asarray(seqs)
    if seqs.ndim == 1:
        seqs = seqs[None, :]
    wa, wb = load_weights(ckpt_a, arch), load_weights(ckpt_b, arch)
    diff = np.zeros(seqs.shape, dtype=bool)
    for start, la in _batched_logits(wa, arch, seqs):
        lb = forward_batch(wb, arch, seqs[start:start + len(la)])
        diff[start:start + len(la)] = greedy_tokens(la) != greedy_tokens(lb)
    n = seqs.shape[1]
    edges = np.linspace(0, n, min(n_buckets, n) + 1).round().astype(int).tolist()
    buckets = [float(diff[:, a:b].mean()) for a, b in zip(edges[:-1], edges[1:])]
    return DistortionReport(float(diff.mean()), int(diff.size), edges, buckets)


@dataclass
class EquivalenceReport:
    max_abs_logit_diff: float
    max_abs_logit: float
    tol: float
    passed: bool


def equivalence_check(ckpt_a, ckpt_b, arch: ModelArch, n_seqs: int = 64, tol: float = 1e-9,
                      seq_len: int = 32, seed: int = 0) -> EquivalenceReport:
    """Pass when the max logit gap is at most ``tol * (1 + max|logit|)`` on random sequences."""
    seqs = random_sequences(n_seqs, seq_len, arch.vocab, seed)
    wa, wb = load_weights(ckpt_a, arch), load_weights(ckpt_b, arch)
    max_diff, max_logit = 0.0, 0.0
    for start, la in _batched_logits(wa, arch, seqs):
        lb = forward_batch(wb, arch, seqs[start:start + len(la)])
        max_diff = max(max_diff, float(np.max(np.abs(la - lb))))
        max_logit = max(max_logit, float(np.max(np.abs(la))))
    return EquivalenceReport(max_diff, max_logit, tol, bool(max_diff <= tol * (1.0 + max_logit)))
