"""Matching an extracted message against the registry of distributed identifiers.

For a random model each chunk agrees with a given identifier with probability
``p = 2**-k``, so the chance of at most ``s`` errors out of ``m`` is the
binomial tail ``P(Bin(m, p) >= m - s)``, which is the regularized incomplete
beta function ``I_p(m - s, s + 1)``. With ``N`` identifiers in the registry the
p-value is ``1 - (1 - I)^N``. Because ``p`` is a power of two both binomial
tails are exact rationals, so they are summed in integer arithmetic and only
logged at the end; the result stays accurate when ``I`` underflows and when
``1 - I`` is what carries the information.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .codec import Message
from .errors import MatchError

TINY_TAIL = 1e-12
LN10 = math.log(10.0)
LN2 = math.log(2.0)


@dataclass
class Registry:
    entries: list[tuple[str, Message]]

    def __len__(self):
        return len(self.entries)

    @classmethod
    def load(cls, path: str | Path, k: int = 8) -> "Registry":
        entries = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    entries.append((str(obj["model_id"]), Message.from_hex(obj["identifier"], k)))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise MatchError(f"{path}:{lineno}: malformed registry line") from exc
        return cls(entries)

    @staticmethod
    def append(path: str | Path, model_id: str, identifier: Message) -> None:
        line = json.dumps({"model_id": model_id, "identifier": identifier.to_hex()}, sort_keys=True)
        with open(path, "a") as fh:
            fh.write(line + "\n")


@dataclass
class MatchReport:
    best_model_id: str
    s: int
    m: int
    k: int
    N: int
    log10_pvalue: float
    matched: bool
    threshold: float

    def to_dict(self) -> dict:
        return asdict(self)


def chunk_errors(extracted, identifier) -> int:
    a, b = np.asarray(tuple(extracted)), np.asarray(tuple(identifier))
    if a.shape != b.shape:
        raise MatchError(f"length mismatch: {a.size} vs {b.size} chunks")
    return int(np.count_nonzero(a != b))


def _log_ratio(num: int, log2_den: int) -> float:
    """Natural log of ``num / 2**log2_den`` for a non-negative integer ``num``."""
    if num == 0:
        return -math.inf
    ratio = Fraction(num, 1 << log2_den)
    if ratio >= Fraction(2) ** -1000:
        return math.log(float(ratio))  # correctly rounded ratio, then one log
    return math.log(num) - log2_den * LN2


def binomial_tails(m: int, k: int, j0: int) -> tuple[float, float]:
    """Natural logs of ``P(Bin(m, 2^-k) >= j0)`` and ``P(Bin(m, 2^-k) < j0)``.

    With ``p = 2^-k`` each tail is an integer over ``2^(k m)``, so both are
    summed exactly; only the final logs round. Whichever tail is below one
    half is logged directly and the other comes from ``log1p`` of it.
    """
    q_num = (1 << k) - 1
    upper = sum(math.comb(m, j) * q_num ** (m - j) for j in range(max(j0, 0), m + 1))
    lower = (1 << (k * m)) - upper
    log_upper, log_lower = _log_ratio(upper, k * m), _log_ratio(lower, k * m)
    if upper <= lower:
        log_lower = math.log1p(-math.exp(log_upper))
    else:
        log_upper = math.log1p(-math.exp(log_lower))
    return log_upper, log_lower


def _log1mexp(y: float) -> float:
    """log(1 - e^y) for y <= 0."""
    if y == 0.0:
        return -math.inf
    if y > -LN2:
        return math.log(-math.expm1(y))
    return math.log1p(-math.exp(y))


def log10_pvalue(s: int, m: int, k: int, N: int = 1) -> float:
    """log10 of ``1 - (1 - I_{2^-k}(m-s, s+1))^N``."""
    if not 0 <= s <= m:
        raise ValueError(f"s={s} outside [0, {m}]")
    if N < 1 or m < 1:
        raise ValueError("N and m must be positive")
    log_upper, log_lower = binomial_tails(m, k, m - s)
    x = math.exp(log_upper)
    if log_upper < math.log(TINY_TAIL) and N * x < TINY_TAIL:
        # 1 - (1-x)^N = N x (1 - (N-1) x / 2 + ...); x may underflow, log_upper does not
        ln_p = math.log(N) + log_upper + math.log1p(-(N - 1) * x / 2)
    else:
        ln_p = _log1mexp(N * log_lower) if log_lower > -math.inf else 0.0
    return min(ln_p / LN10, 0.0)


pvalue = log10_pvalue


def match(extracted, registry: Registry, p_threshold: float = 1e-6) -> MatchReport:
    if not len(registry):
        raise MatchError("registry is empty")
    ms = {len(ident) for _, ident in registry.entries}
    ks = {ident.k for _, ident in registry.entries}
    if len(ms) != 1 or len(ks) != 1:
        raise MatchError("registry mixes identifiers of different length or chunk width")
    m, k = ms.pop(), ks.pop()
    if isinstance(extracted, Message) and extracted.k != k:
        raise MatchError(f"extracted message has k={extracted.k}, registry has k={k}")
    ext = np.asarray(tuple(extracted))
    if ext.size != m:
        raise MatchError(f"extracted message has {ext.size} chunks, registry identifiers have {m}")

    table = np.array([ident.chunks for _, ident in registry.entries])
    errors = np.count_nonzero(table != ext[None, :], axis=1)
    best = int(np.argmin(errors))
    s = int(errors[best])
    lp = log10_pvalue(s, m, k, len(registry))
    return MatchReport(registry.entries[best][0], s, m, k, len(registry), lp,
                       lp <= math.log10(p_threshold), p_threshold)
