"""Keyed candidate sets, identifier insertion and brute-force extraction.

Each site owns ``2**k`` candidate transforms drawn from a SplitMix64 stream
seeded by ``(master_seed, site ordinal, candidate index)``. Inserting a
message applies, site by site in key order, the candidate selected by that
site's chunk. Extraction needs the original checkpoint: for each site it
compares the observed tensors with the original pushed through every
candidate and keeps the closest one.
"""
from __future__ import annotations

import json
import math
import secrets
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CodecError, ConfigurationError
from .invariants import (TransformCandidate, act_batch, apply_to_arrays, compose_pipeline,
                         invert_candidate)
from .model_graph import (DEFAULT_FAMILIES, PERMUTATION_FAMILIES, SCALING_FAMILIES,
                          ModelArch, Role, Site, acted_size, resolve_sites,
                          tensors_for_site, validate_checkpoint)
from .rng import SplitMix64, mix_seed
from .tensor_store import Checkpoint, Tensor

# Upper bound on float64 elements materialised per candidate batch (~128 MB).
BATCH_ELEMENTS = 1 << 24


@dataclass(frozen=True)
class WatermarkKey:
    master_seed: int
    k: int = 8
    families: tuple[str, ...] = DEFAULT_FAMILIES
    scaling_log10_range: tuple[float, float] = (-1.0, 1.0)
    lambda_enabled: bool = False
    subset_r: int = 100

    def __post_init__(self):
        object.__setattr__(self, "families", tuple(self.families))
        object.__setattr__(self, "scaling_log10_range", tuple(float(x) for x in self.scaling_log10_range))
        if not isinstance(self.k, int) or not 1 <= self.k <= 16:
            raise ConfigurationError(f"k must be an integer in [1, 16], got {self.k!r}")
        if not 0 <= self.master_seed < 1 << 64:
            raise ConfigurationError("master_seed must be an unsigned 64-bit integer")
        if self.subset_r < 1:
            raise ConfigurationError("subset_r must be positive")
        a, b = self.scaling_log10_range
        if not a <= b:
            raise ConfigurationError("scaling_log10_range must be increasing")

    @property
    def n_candidates(self) -> int:
        return 1 << self.k

    @classmethod
    def generate(cls, **kwargs) -> "WatermarkKey":
        return cls(master_seed=secrets.randbits(64), **kwargs)

    def to_dict(self) -> dict:
        return {"master_seed": hex(self.master_seed), "k": self.k, "families": list(self.families),
                "scaling_log10_range": list(self.scaling_log10_range),
                "lambda_enabled": self.lambda_enabled, "subset_r": self.subset_r}

    @classmethod
    def from_dict(cls, obj: dict) -> "WatermarkKey":
        obj = dict(obj)
        seed = obj.pop("master_seed")
        try:
            seed = int(seed, 0) if isinstance(seed, str) else int(seed)
            return cls(master_seed=seed, **obj)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid key: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "WatermarkKey":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise ConfigurationError(f"cannot read key file {path}: {exc}") from exc


@dataclass(frozen=True)
class Message:
    """An identifier: ``m`` chunks of ``k`` bits."""

    chunks: tuple[int, ...]
    k: int = 8

    def __post_init__(self):
        object.__setattr__(self, "chunks", tuple(int(c) for c in self.chunks))
        if any(not 0 <= c < 1 << self.k for c in self.chunks):
            raise CodecError(f"chunks must lie in [0, 2**{self.k})")

    def __len__(self):
        return len(self.chunks)

    def __getitem__(self, i):
        return self.chunks[i]

    @classmethod
    def random(cls, m: int, k: int = 8, rng: np.random.Generator | None = None) -> "Message":
        """Uniform identifier; OS entropy unless an explicit generator is passed."""
        if rng is None:
            return cls(tuple(secrets.randbelow(1 << k) for _ in range(m)), k)
        return cls(tuple(rng.integers(0, 1 << k, size=m).tolist()), k)

    def to_hex(self) -> str:
        """Fixed-width lowercase hex, ``ceil(k/4)`` digits per chunk (one byte per chunk for k=8)."""
        width = math.ceil(self.k / 4)
        return "".join(f"{c:0{width}x}" for c in self.chunks)

    @classmethod
    def from_hex(cls, text: str, k: int = 8) -> "Message":
        width = math.ceil(k / 4)
        text = text.strip().lower()
        if len(text) % width:
            raise CodecError(f"identifier length {len(text)} is not a multiple of {width}")
        try:
            chunks = [int(text[i:i + width], 16) for i in range(0, len(text), width)]
        except ValueError as exc:
            raise CodecError(f"identifier {text!r} is not hexadecimal") from exc
        return cls(tuple(chunks), k)


@dataclass
class ExtractionResult:
    chunks: Message
    sites: list[Site]
    distances: np.ndarray  # (m, 2**k)
    margins: np.ndarray  # second-best minus best, per site
    reverted: dict[str, np.ndarray] | None = field(default=None, repr=False)


# --------------------------------------------------------------------------
# candidates
# --------------------------------------------------------------------------

def _draw(key: WatermarkKey, site: Site, index: int, arch: ModelArch) -> TransformCandidate:
    rng = SplitMix64(mix_seed(key.master_seed, site.ordinal, index))
    fam = site.family
    if fam in PERMUTATION_FAMILIES:
        return TransformCandidate(fam, permutation=rng.permutation(acted_size(fam, arch)))
    a, b = key.scaling_log10_range
    if fam in SCALING_FAMILIES:
        return TransformCandidate(fam, scale=10.0 ** (a + (b - a) * rng.uniform(arch.d)))
    n = arch.h * arch.d_k // 2
    angles = 2.0 * np.pi * rng.uniform(n)
    lam = 10.0 ** (a + (b - a) * rng.uniform(n)) if key.lambda_enabled else np.ones(n)
    return TransformCandidate(fam, angles=angles, lam=lam)


def derive_candidate(key: WatermarkKey, site: Site, index: int, arch: ModelArch) -> TransformCandidate:
    if not 0 <= index < key.n_candidates:
        raise CodecError(f"candidate index {index} out of range for k={key.k}")
    return _draw(key, site, index, arch)


@lru_cache(maxsize=64)
def candidate_table(key: WatermarkKey, site: Site, arch: ModelArch) -> np.ndarray:
    """Stacked payloads of all ``2**k`` candidates of a site (read-only, cached)."""
    table = np.stack([_draw(key, site, i, arch).payload() for i in range(key.n_candidates)])
    table.setflags(write=False)
    return table


def _candidate_from_payload(family: str, payload: np.ndarray) -> TransformCandidate:
    if family in PERMUTATION_FAMILIES:
        return TransformCandidate(family, permutation=np.array(payload))
    if family in SCALING_FAMILIES:
        return TransformCandidate(family, scale=np.array(payload))
    return TransformCandidate(family, angles=np.array(payload[0]), lam=np.array(payload[1]))


# --------------------------------------------------------------------------
# insertion
# --------------------------------------------------------------------------

def _as_message(msg, k: int) -> Message:
    if isinstance(msg, Message):
        if msg.k != k:
            raise CodecError(f"message has k={msg.k}, key has k={k}")
        return msg
    return Message(tuple(msg), k)


def watermark_steps(arch: ModelArch, key: WatermarkKey, msg) -> list[tuple[Site, TransformCandidate]]:
    sites = resolve_sites(arch, key.families)
    msg = _as_message(msg, key.k)
    if len(msg) != len(sites):
        raise CodecError(f"message has {len(msg)} chunks but the key defines {len(sites)} sites")
    return [(s, derive_candidate(key, s, msg[s.ordinal], arch)) for s in sites]


def insert(ckpt: Checkpoint, arch: ModelArch, key: WatermarkKey, msg) -> Checkpoint:
    validate_checkpoint(ckpt, arch)
    return compose_pipeline(ckpt, watermark_steps(arch, key, msg), arch)


# --------------------------------------------------------------------------
# extraction
# --------------------------------------------------------------------------

def frobenius_distance(a, b, subset: tuple[int | str, int] | None = None) -> float:
    """sqrt of the summed squared differences, in float64.

    ``subset=(axis, r)`` keeps the first ``r`` indices along ``axis`` (0, 1 or
    ``"both"``) of both operands before comparing.
    """
    a = np.asarray(a.array if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.array if isinstance(b, Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if subset is not None:
        axis, r = subset
        a, b = _take_first(a, axis, r), _take_first(b, axis, r)
    return float(np.sqrt(np.sum((a - b) ** 2)))


def _take_first(arr: np.ndarray, axis, r: int) -> np.ndarray:
    if axis == "both":
        return arr[:r, :r] if arr.ndim == 2 else arr[:r]
    index = [slice(None)] * arr.ndim
    index[axis] = slice(0, r)
    return arr[tuple(index)]


def subset_for(role: Role, family: str, arr: np.ndarray, r: int) -> np.ndarray:
    """Restrict a tensor to the part compared in fast mode.

    Permutation and QK transforms keep their acted axis whole and cut the
    other one to ``r``; scaling cuts alpha, gains and both matrix axes to ``r``.
    """
    if family in SCALING_FAMILIES:
        return _take_first(arr, "both", r)
    if role.kind == "elements":
        return arr
    if role.kind in ("rows", "row_blocks"):
        return arr[:, :r]
    return arr[:r, :]


def fast_regions(sites: Sequence[Site], arch: ModelArch, r: int) -> dict[str, tuple[int | None, int | None]]:
    """Leading (rows, cols) of each tensor that fast extraction ever reads.

    A tensor axis may be cut to ``r`` only if no site permutes along it;
    column permutations, QK rotations and diagonal scalings all commute with
    taking the first ``r`` rows. ``None`` means the axis is kept whole.
    """
    cut: dict[str, list[bool]] = {}
    for site in sites:
        for name, role in tensors_for_site(site, arch):
            rows_ok, cols_ok = cut.setdefault(name, [True, True])
            if site.family in SCALING_FAMILIES:
                continue
            if role.kind in ("rows", "row_blocks", "elements"):
                rows_ok = False
            else:
                cols_ok = False
            cut[name] = [rows_ok, cols_ok]
    return {name: (r if ok[0] else None, r if ok[1] else None) for name, ok in cut.items()}


def _region(arr: np.ndarray, limits: tuple[int | None, int | None]) -> np.ndarray:
    if arr.ndim == 1:
        return arr[:limits[0]]
    return arr[:limits[0], :limits[1]]


def _direct(obs_parts, ref_parts, roles, family, payloads) -> np.ndarray:
    """Summed Frobenius distances computed literally, batch by batch."""
    n_cand = payloads.shape[0]
    per_cand = max(sum(p.size for p in ref_parts), 1)
    batch = max(1, min(n_cand, BATCH_ELEMENTS // per_cand))
    total = np.zeros(n_cand)
    for start in range(0, n_cand, batch):
        payload = payloads[start:start + batch]
        for obs, ref, role in zip(obs_parts, ref_parts, roles):
            diff = act_batch(ref, role, family, payload)
            diff -= obs[None]
            diff = diff.reshape(payload.shape[0], -1)
            total[start:start + batch] += np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return total


def _units(arr: np.ndarray, role: Role) -> np.ndarray:
    """View a tensor as (n, unit_size): one row per index a permutation moves."""
    kind, b = role.kind, role.block
    if kind == "rows":
        return arr
    if kind == "elements":
        return arr[:, None]
    if kind == "cols":
        return arr.T
    if kind == "row_blocks":
        return arr.reshape(-1, b * arr.shape[1])
    if kind == "col_blocks":
        rows = arr.shape[0]
        return arr.reshape(rows, -1, b).transpose(1, 0, 2).reshape(-1, rows * b)
    if kind == "cols_within_blocks":
        rows = arr.shape[0]
        return arr.reshape(rows, -1, b).transpose(2, 0, 1).reshape(b, -1)
    raise CodecError(f"role {kind!r} is not a permutation role")


def _pairwise_sq(obs_units: np.ndarray, ref_units: np.ndarray) -> np.ndarray:
    """D[j, i] = squared distance between observed unit j and reference unit i."""
    n, u = obs_units.shape
    out = np.empty((n, ref_units.shape[0]))
    step = max(1, BATCH_ELEMENTS // max(1, n * u))
    for j in range(0, n, step):
        diff = obs_units[j:j + step, None, :] - ref_units[None, :, :]
        out[j:j + step] = np.einsum("jiu,jiu->ji", diff, diff)
    return out


def _permutation_distances(obs_parts, ref_parts, roles, perms) -> np.ndarray:
    """Exact: a permuted tensor's squared distance is a sum of unit-to-unit distances."""
    total = np.zeros(perms.shape[0])
    rows = np.arange(perms.shape[1])
    for obs, ref, role in zip(obs_parts, ref_parts, roles):
        d = _pairwise_sq(_units(obs, role), _units(ref, role))
        total += np.sqrt(d[rows, perms].sum(axis=1))
    return total


def _screen(obs_parts, ref_parts, roles, family, payloads):
    """Expanded-norm distances and an error bound for each, per candidate.

    ``|O - T(R)|^2`` is written as ``|O|^2 - 2<O, T(R)> + |T(R)|^2`` using a
    unit Gram matrix (permutations), per-row (scaling) or per-column-pair (QK)
    inner products, so the cost no longer scales with the number of
    candidates times the tensor size.
    """
    eps = np.finfo(np.float64).eps
    approx = np.zeros(payloads.shape[0])
    bound = np.zeros(payloads.shape[0])
    for obs, ref, role in zip(obs_parts, ref_parts, roles):
        if family in PERMUTATION_FAMILIES:
            uo, ur = _units(obs, role), _units(ref, role)
            gram = uo @ ur.T
            picked = gram[np.arange(gram.shape[0]), payloads]
            oo, rr = float(np.sum(uo * uo)), float(np.sum(ur * ur))
            cross = picked.sum(axis=1)
            sq = oo + rr - 2.0 * cross
            err = 4.0 * (uo.shape[1] + gram.shape[0] + 2) * eps * (oo + rr + 2.0 * np.abs(picked).sum(axis=1))
        elif family in SCALING_FAMILIES:
            t = payloads[:, :obs.shape[0]]
            if role.kind == "elements":
                approx += np.sqrt(np.sum((ref[None] * t - obs[None]) ** 2, axis=1))
                continue
            t = 1.0 / t
            oo, orr, rr = (np.einsum("ij,ij->i", a, b) for a, b in ((obs, obs), (obs, ref), (ref, ref)))
            cross, own = (t * orr).sum(axis=1), (t * t * rr).sum(axis=1)
            sq = oo.sum() - 2.0 * cross + own
            err = 4.0 * (obs.shape[1] + 2) * eps * (oo.sum() + 2.0 * np.abs(t * orr).sum(axis=1) + own)
        else:
            f = payloads[:, 1] if role.kind == "col_pairs" else 1.0 / payloads[:, 1]
            c, s = np.cos(payloads[:, 0]) * f, np.sin(payloads[:, 0]) * f
            x0, x1, y0, y1 = ref[:, 0::2], ref[:, 1::2], obs[:, 0::2], obs[:, 1::2]
            m_diag = np.einsum("ij,ij->j", x0, y0) + np.einsum("ij,ij->j", x1, y1)
            m_off = np.einsum("ij,ij->j", x1, y0) - np.einsum("ij,ij->j", x0, y1)
            tr_s = np.einsum("ij,ij->j", x0, x0) + np.einsum("ij,ij->j", x1, x1)
            yy = float(np.sum(obs * obs))
            cross = (c * m_diag + s * m_off).sum(axis=1)
            own = (f * f * tr_s).sum(axis=1)
            sq = yy - 2.0 * cross + own
            err = 4.0 * (obs.shape[0] + 2) * eps * (yy + 2.0 * np.abs(cross) + own
                                                    + 2.0 * (np.abs(c * m_diag) + np.abs(s * m_off)).sum(axis=1))
        approx += np.sqrt(np.maximum(sq, 0.0))
        bound += np.sqrt(err)
    return approx, bound


def _site_distances(obs_parts, ref_parts, roles, family, table) -> np.ndarray:
    n_cand = table.shape[0]
    if family in PERMUTATION_FAMILIES and table.shape[1] <= n_cand:
        return _permutation_distances(obs_parts, ref_parts, roles, table)
    approx, bound = _screen(obs_parts, ref_parts, roles, family, table)
    # every candidate that might be the minimum, plus the runner-up, is recomputed literally
    ceiling = max(np.min(approx + bound), np.partition(approx, min(1, n_cand - 1))[min(1, n_cand - 1)])
    idx = np.flatnonzero(approx - bound <= ceiling)
    out = approx.copy()
    out[idx] = _direct(obs_parts, ref_parts, roles, family, table[idx])
    return out


def extract(observed: Checkpoint, original: Checkpoint, arch: ModelArch, key: WatermarkKey,
            fast: bool = False, keep_reverted: bool = False) -> ExtractionResult:
    """Decode the identifier carried by ``observed``.

    Sites are processed in insertion order. The reference starts as the
    original and is advanced by each decoded transform, so when site ``s`` is
    scored the reference already carries sites ``0..s-1``; the candidate that
    best explains ``observed`` on the site's tensors wins (ties go to the
    lowest index). With ``keep_reverted`` the decoded transforms are undone on
    the observed weights in reverse order, which recovers the original when
    decoding is right.
    """
    validate_checkpoint(observed, arch)
    validate_checkpoint(original, arch)
    sites = resolve_sites(arch, key.families)
    if fast:
        regions = fast_regions(sites, arch, key.subset_r)
    else:
        regions = {n: (None, None) for s in sites for n, _ in tensors_for_site(s, arch)}
    obs = {n: _region(observed[n], lim).astype(np.float64) for n, lim in regions.items()}
    ref = {n: _region(original[n], lim).astype(np.float64) for n, lim in regions.items()}

    chunks, distances, decoded = [], [], []
    for site in sites:
        pairs = tensors_for_site(site, arch)
        roles = [role for _, role in pairs]
        if fast:
            obs_parts = [subset_for(role, site.family, obs[n], key.subset_r) for n, role in pairs]
            ref_parts = [subset_for(role, site.family, ref[n], key.subset_r) for n, role in pairs]
        else:
            obs_parts = [obs[n] for n, _ in pairs]
            ref_parts = [ref[n] for n, _ in pairs]
        table = candidate_table(key, site, arch)
        dist = _site_distances(obs_parts, ref_parts, roles, site.family, table)
        best = int(np.argmin(dist))
        cand = _candidate_from_payload(site.family, table[best])
        ref.update(apply_to_arrays(ref, site, cand, arch))
        chunks.append(best)
        distances.append(dist)
        decoded.append((site, cand))

    distances = np.array(distances).reshape(len(sites), key.n_candidates)
    if key.n_candidates > 1:
        two = np.sort(distances, axis=1)[:, :2]
        margins = two[:, 1] - two[:, 0]
    else:
        margins = np.full(len(sites), np.inf)

    reverted = None
    if keep_reverted:
        reverted = observed.float64()
        for site, cand in reversed(decoded):
            reverted.update(apply_to_arrays(reverted, site, invert_candidate(cand), arch))
    return ExtractionResult(Message(tuple(chunks), key.k), sites, distances, margins, reverted)
