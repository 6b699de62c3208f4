"""Function-preserving transformations of transformer weights.

Every family is a right or left multiplication by an invertible structured
matrix (permutation, positive diagonal, or 2x2 rotation/scale blocks), so a
transform and its inverse are cheap to apply and the model output is unchanged.

The array-level helpers take a *batch* of candidates and return the stacked
transformed arrays, which is what brute-force extraction needs; applying a
single transform is the batch-of-one case.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EngineError
from .model_graph import (PERMUTATION_FAMILIES, QK_PRODUCT, SCALING_FAMILIES, ModelArch, Role,
                          Site, acted_size, tensors_for_site)
from .tensor_store import Checkpoint


@dataclass(frozen=True, eq=False)
class TransformCandidate:
    """One concrete transform of a family.

    Exactly one payload is set: ``permutation`` (new position j holds old index
    ``permutation[j]``), ``scale`` (the alpha vector of a scaling family) or
    ``angles`` with ``lam`` (one rotation angle and one scale per column pair of
    the QK product).
    """

    family: str
    permutation: np.ndarray | None = None
    scale: np.ndarray | None = None
    angles: np.ndarray | None = None
    lam: np.ndarray | None = None

    def __eq__(self, other):
        if not isinstance(other, TransformCandidate) or other.family != self.family:
            return NotImplemented if not isinstance(other, TransformCandidate) else False
        return all(_same(getattr(self, f), getattr(other, f)) for f in ("permutation", "scale", "angles", "lam"))

    def payload(self) -> np.ndarray:
        if self.family in PERMUTATION_FAMILIES:
            return self.permutation
        if self.family in SCALING_FAMILIES:
            return self.scale
        return np.stack([self.angles, self.lam])


def _same(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def identity_candidate(family: str, arch: ModelArch) -> TransformCandidate:
    if family in PERMUTATION_FAMILIES:
        return TransformCandidate(family, permutation=np.arange(acted_size(family, arch)))
    if family in SCALING_FAMILIES:
        return TransformCandidate(family, scale=np.ones(arch.d))
    n = arch.h * arch.d_k // 2
    return TransformCandidate(family, angles=np.zeros(n), lam=np.ones(n))


def invert_candidate(cand: TransformCandidate) -> TransformCandidate:
    if cand.permutation is not None:
        return TransformCandidate(cand.family, permutation=np.argsort(cand.permutation, kind="stable"))
    if cand.scale is not None:
        return TransformCandidate(cand.family, scale=1.0 / cand.scale)
    return TransformCandidate(cand.family, angles=-cand.angles, lam=1.0 / cand.lam)


def check_candidate(cand: TransformCandidate, site: Site, arch: ModelArch) -> None:
    if cand.family != site.family:
        raise EngineError(f"candidate family {cand.family} does not match site family {site.family}")
    fam = cand.family
    if fam in PERMUTATION_FAMILIES:
        n = acted_size(fam, arch)
        p = cand.permutation
        if p is None or p.shape != (n,) or not np.array_equal(np.sort(p), np.arange(n)):
            raise EngineError(f"{fam} candidate is not a permutation of {n} elements")
    elif fam in SCALING_FAMILIES:
        if cand.scale is None or cand.scale.shape != (arch.d,) or np.any(cand.scale <= 0):
            raise EngineError(f"{fam} candidate needs {arch.d} positive scales")
    elif fam == QK_PRODUCT:
        n = arch.h * arch.d_k // 2
        if (arch.d_k % 2 or cand.angles is None or cand.lam is None
                or cand.angles.shape != (n,) or cand.lam.shape != (n,) or np.any(cand.lam <= 0)):
            raise EngineError(f"qk_product candidate needs {n} angles and positive scales, even d_k")


# --------------------------------------------------------------------------
# batched array actions
# --------------------------------------------------------------------------

def _block_index(perms: np.ndarray, block: int) -> np.ndarray:
    """Expand (B, n) block permutations to (B, n*block) element indices."""
    return (perms[:, :, None] * block + np.arange(block)).reshape(perms.shape[0], -1)


def _within_block_index(perms: np.ndarray, width: int) -> np.ndarray:
    """Same permutation of ``perms.shape[1]`` columns repeated inside each block."""
    b, n = perms.shape
    starts = np.arange(0, width, n)
    return (starts[None, :, None] + perms[:, None, :]).reshape(b, -1)


def permute_batch(arr: np.ndarray, role: Role, perms: np.ndarray) -> np.ndarray:
    kind = role.kind
    if kind in ("rows", "elements"):
        return arr[perms]
    if kind == "cols":
        return np.moveaxis(arr[:, perms], 1, 0)
    if kind == "row_blocks":
        return arr[_block_index(perms, role.block)]
    if kind == "col_blocks":
        return np.moveaxis(arr[:, _block_index(perms, role.block)], 1, 0)
    if kind == "cols_within_blocks":
        return np.moveaxis(arr[:, _within_block_index(perms, arr.shape[1])], 1, 0)
    raise EngineError(f"role {kind!r} cannot be permuted")


def scale_batch(arr: np.ndarray, role: Role, scales: np.ndarray) -> np.ndarray:
    """Gains (and norm biases) are multiplied by alpha, following rows divided by it.

    Only the leading ``len(arr)`` scales are used, so a row subset of the
    tensor pairs with the same prefix of alpha.
    """
    s = scales[:, :arr.shape[0]]
    if role.kind == "elements":
        return arr[None, :] * s
    if role.kind == "rows":
        return arr[None, :, :] / s[:, :, None]
    raise EngineError(f"role {role.kind!r} cannot be scaled")


def rotate_batch(arr: np.ndarray, role: Role, angles: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Right-multiply by block-diagonal 2x2 blocks.

    Query side: block ``lam * R(theta)`` with ``R = [[c, -s], [s, c]]``; key
    side uses ``(P^T)^-1``, i.e. ``R(theta) / lam``.
    """
    rows, cols = arr.shape
    if cols % 2 or angles.shape[1] != cols // 2:
        raise EngineError(f"QK product needs {cols // 2} angles, got {angles.shape[1]}")
    factor = lam if role.kind == "col_pairs" else 1.0 / lam
    c = np.cos(angles) * factor
    s = np.sin(angles) * factor
    pairs = arr.reshape(rows, cols // 2, 2)
    x0, x1 = pairs[None, :, :, 0], pairs[None, :, :, 1]
    c, s = c[:, None, :], s[:, None, :]
    out = np.empty((angles.shape[0], rows, cols // 2, 2))
    out[..., 0] = x0 * c + x1 * s
    out[..., 1] = x1 * c - x0 * s
    return out.reshape(angles.shape[0], rows, cols)


def act_batch(arr: np.ndarray, role: Role, family: str, payload: np.ndarray) -> np.ndarray:
    """Apply a stack of candidate payloads of one family to one float64 array."""
    if family in PERMUTATION_FAMILIES:
        return permute_batch(arr, role, payload)
    if family in SCALING_FAMILIES:
        return scale_batch(arr, role, payload)
    if family == QK_PRODUCT:
        return rotate_batch(arr, role, payload[:, 0], payload[:, 1])
    raise EngineError(f"unknown family {family!r}")


def apply_to_arrays(arrays: Mapping[str, np.ndarray], site: Site, cand: TransformCandidate,
                    arch: ModelArch) -> dict[str, np.ndarray]:
    """Transformed float64 copies of the tensors the site touches (others not returned)."""
    check_candidate(cand, site, arch)
    payload = cand.payload()[None]
    out = {}
    for name, role in tensors_for_site(site, arch):
        arr = np.asarray(arrays[name], dtype=np.float64)
        try:
            out[name] = act_batch(arr, role, site.family, payload)[0]
        except IndexError as exc:
            raise EngineError(f"{site.family} does not fit tensor {name!r} of shape {arr.shape}") from exc
    return out


# --------------------------------------------------------------------------
# checkpoint level
# --------------------------------------------------------------------------

def apply_transform(ckpt: Checkpoint, site: Site, cand: TransformCandidate, arch: ModelArch) -> Checkpoint:
    touched = apply_to_arrays({n: ckpt[n] for n, _ in tensors_for_site(site, arch)}, site, cand, arch)
    try:
        return ckpt.replace(touched)
    except ValueError as exc:
        raise EngineError(str(exc)) from exc


def apply_qk_product(ckpt: Checkpoint, layer: int, angles: Sequence[float], lam: Sequence[float] | None,
                     arch: ModelArch) -> Checkpoint:
    angles = np.asarray(angles, dtype=np.float64)
    lam = np.ones_like(angles) if lam is None else np.asarray(lam, dtype=np.float64)
    if arch.d_k % 2:
        raise EngineError("qk_product needs an even d_k")
    site = Site(QK_PRODUCT, layer, 0)
    return apply_transform(ckpt, site, TransformCandidate(QK_PRODUCT, angles=angles, lam=lam), arch)


def compose_pipeline(ckpt: Checkpoint, steps: Iterable[tuple[Site, TransformCandidate]],
                     arch: ModelArch) -> Checkpoint:
    """Left fold of ``apply_transform``; arithmetic stays in float64 and is cast once at the end."""
    work: dict[str, np.ndarray] = {}
    for site, cand in steps:
        names = [n for n, _ in tensors_for_site(site, arch)]
        current = {n: work[n] if n in work else ckpt[n] for n in names}
        work.update(apply_to_arrays(current, site, cand, arch))
    if not work:
        return ckpt
    return ckpt.replace(work)
