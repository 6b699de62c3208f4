"""Transformer architecture description and watermark site resolution.

A site is one (family, layer) location that carries one chunk of the
identifier. ``tensors_for_site`` says which tensors a family touches and along
which axis; the invariant engine interprets those roles.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

from .errors import ConfigurationError

PERM_HEADS = "perm_heads"
PERM_FFN = "perm_ffn"
PERM_EMBED = "perm_embed"
PERM_INSIDE_HEAD = "perm_inside_head"
QK_PRODUCT = "qk_product"
SCALING_ATT = "scaling_att"
SCALING_FFN = "scaling_ffn"

FAMILIES = (PERM_HEADS, PERM_FFN, PERM_EMBED, PERM_INSIDE_HEAD, QK_PRODUCT, SCALING_ATT, SCALING_FFN)
PERMUTATION_FAMILIES = frozenset({PERM_HEADS, PERM_FFN, PERM_EMBED, PERM_INSIDE_HEAD})
SCALING_FAMILIES = frozenset({SCALING_ATT, SCALING_FFN})
DEFAULT_FAMILIES = (PERM_HEADS, PERM_FFN, QK_PRODUCT, SCALING_ATT, SCALING_FFN)

GLOBAL = None  # layer of the single perm_embed site

GLOBAL_ROLES = ("E", "W_out", "Ln_out_gain", "Ln_out_bias")
LAYER_ROLES = ("Wq", "Wk", "Wv", "Wo", "W1", "W2", "W3", "Ln_att_gain", "Ln_att_bias",
               "Ln_ffn_gain", "Ln_ffn_bias", "b1", "b2")

DEFAULT_NAME_MAP = {
    "E": "tok_embeddings.weight",
    "W_out": "output.weight",
    "Ln_out_gain": "norm.weight",
    "Ln_out_bias": "norm.bias",
    "Wq": "layers.{layer}.attention.wq.weight",
    "Wk": "layers.{layer}.attention.wk.weight",
    "Wv": "layers.{layer}.attention.wv.weight",
    "Wo": "layers.{layer}.attention.wo.weight",
    "W1": "layers.{layer}.feed_forward.w1.weight",
    "W2": "layers.{layer}.feed_forward.w2.weight",
    "W3": "layers.{layer}.feed_forward.w3.weight",
    "b1": "layers.{layer}.feed_forward.w1.bias",
    "b2": "layers.{layer}.feed_forward.w2.bias",
    "Ln_att_gain": "layers.{layer}.attention_norm.weight",
    "Ln_att_bias": "layers.{layer}.attention_norm.bias",
    "Ln_ffn_gain": "layers.{layer}.ffn_norm.weight",
    "Ln_ffn_bias": "layers.{layer}.ffn_norm.bias",
}


class Role(NamedTuple):
    """How a transform acts on one tensor.

    kind is one of ``rows``, ``cols``, ``elements``, ``row_blocks``,
    ``col_blocks``, ``cols_within_blocks``, ``col_pairs`` (query side of a QK
    product) and ``col_pairs_dual`` (key side). ``block`` is the block width
    for the block kinds and 1 otherwise.
    """

    kind: str
    block: int = 1


ROWS = Role("rows")
COLS = Role("cols")
ELEMENTS = Role("elements")


@dataclass(frozen=True)
class ModelArch:
    d: int
    L: int
    h: int
    d_k: int
    d_v: int
    d_ff: int
    vocab: int
    norm_kind: str = "rmsnorm"
    activation: str = "swiglu"
    positional: str = "rotary"
    has_biases: bool = False
    rotary_base: float = 10000.0
    name_map: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_NAME_MAP))

    def __post_init__(self):
        for attr in ("d", "L", "h", "d_k", "d_v", "d_ff", "vocab"):
            value = getattr(self, attr)
            if not isinstance(value, int) or value <= 0:
                raise ConfigurationError(f"{attr} must be a positive integer, got {value!r}")
        if self.norm_kind not in ("layernorm", "rmsnorm"):
            raise ConfigurationError(f"unknown norm_kind {self.norm_kind!r}")
        if self.activation not in ("relu", "swiglu"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.positional not in ("none", "rotary"):
            raise ConfigurationError(f"unknown positional {self.positional!r}")
        if self.positional == "rotary" and self.d_k % 2:
            raise ConfigurationError("rotary embeddings need an even d_k")

    def __hash__(self):
        return hash((self.d, self.L, self.h, self.d_k, self.d_v, self.d_ff, self.vocab, self.norm_kind,
                     self.activation, self.positional, self.has_biases, self.rotary_base,
                     tuple(sorted(self.name_map.items()))))

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelArch":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ConfigurationError(f"unknown architecture fields: {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "ModelArch":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read architecture file {path}: {exc}") from exc
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def with_(self, **changes) -> "ModelArch":
        return replace(self, **changes)

    def roles(self) -> list[str]:
        """Roles that must be present for this architecture, per layer roles included."""
        layer = ["Wq", "Wk", "Wv", "Wo", "W1", "W2", "Ln_att_gain", "Ln_ffn_gain"]
        if self.activation == "swiglu":
            layer.append("W3")
        if self.norm_kind == "layernorm":
            layer += ["Ln_att_bias", "Ln_ffn_bias"]
        if self.has_biases:
            layer += ["b1", "b2"]
        glob = ["E", "W_out", "Ln_out_gain"] + (["Ln_out_bias"] if self.norm_kind == "layernorm" else [])
        return glob + layer

    def has_role(self, role: str) -> bool:
        return role in self.roles()

    def name(self, role: str, layer: int | None = None) -> str:
        if role not in self.name_map:
            raise ConfigurationError(f"name_map has no entry for role {role!r}")
        template = self.name_map[role]
        if role in LAYER_ROLES:
            if layer is None:
                raise ConfigurationError(f"role {role!r} needs a layer index")
            return template.format(layer=layer)
        return template

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        d, hk, hv = self.d, self.h * self.d_k, self.h * self.d_v
        shapes = {"E": (self.vocab, d), "W_out": (d, self.vocab), "Ln_out_gain": (d,), "Ln_out_bias": (d,),
                  "Wq": (d, hk), "Wk": (d, hk), "Wv": (d, hv), "Wo": (hv, d),
                  "W1": (d, self.d_ff), "W3": (d, self.d_ff), "W2": (self.d_ff, d),
                  "b1": (self.d_ff,), "b2": (d,), "Ln_att_gain": (d,), "Ln_att_bias": (d,),
                  "Ln_ffn_gain": (d,), "Ln_ffn_bias": (d,)}
        out = {}
        for role in self.roles():
            if role in LAYER_ROLES:
                for layer in range(self.L):
                    out[self.name(role, layer)] = shapes[role]
            else:
                out[self.name(role)] = shapes[role]
        return out


def validate_checkpoint(ckpt, arch: ModelArch) -> None:
    """Raise ConfigurationError unless every tensor the architecture needs is present with its shape."""
    for name, shape in arch.expected_shapes().items():
        if name not in ckpt:
            raise ConfigurationError(f"checkpoint is missing tensor {name!r}")
        if tuple(ckpt[name].shape) != shape:
            raise ConfigurationError(f"tensor {name!r} has shape {tuple(ckpt[name].shape)}, expected {shape}")


@dataclass(frozen=True)
class Site:
    family: str
    layer: int | None
    ordinal: int


def check_families(arch: ModelArch, families) -> tuple[str, ...]:
    families = tuple(families)
    for fam in families:
        if fam not in FAMILIES:
            raise ConfigurationError(f"unknown invariant family {fam!r}")
    if len(set(families)) != len(families):
        raise ConfigurationError("families must not repeat")
    if PERM_INSIDE_HEAD in families and arch.positional != "none":
        raise ConfigurationError("perm_inside_head is not an invariant under rotary embeddings")
    if QK_PRODUCT in families and arch.d_k % 2:
        raise ConfigurationError("qk_product needs an even d_k")
    return families


def resolve_sites(arch: ModelArch, families) -> list[Site]:
    families = check_families(arch, families)
    sites = []
    for fam in families:
        layers = [GLOBAL] if fam == PERM_EMBED else range(arch.L)
        for layer in layers:
            sites.append(Site(fam, layer, len(sites)))
    return sites


def tensors_for_site(site: Site, arch: ModelArch) -> list[tuple[str, Role]]:
    """Every tensor a site's transform touches, with the axis it acts on."""
    fam, layer, a = site.family, site.layer, arch
    if fam != PERM_EMBED and not (isinstance(layer, int) and 0 <= layer < a.L):
        raise ConfigurationError(f"site layer {layer!r} out of range for {fam}")
    n = lambda role: a.name(role, layer)  # noqa: E731

    if fam == PERM_HEADS:
        return [(n("Wq"), Role("col_blocks", a.d_k)), (n("Wk"), Role("col_blocks", a.d_k)),
                (n("Wv"), Role("col_blocks", a.d_v)), (n("Wo"), Role("row_blocks", a.d_v))]
    if fam == PERM_FFN:
        out = [(n("W1"), COLS)]
        if a.activation == "swiglu":
            out.append((n("W3"), COLS))
        out.append((n("W2"), ROWS))
        if a.has_biases:
            out.append((n("b1"), ELEMENTS))
        return out
    if fam == PERM_INSIDE_HEAD:
        return [(n("Wq"), Role("cols_within_blocks", a.d_k)), (n("Wk"), Role("cols_within_blocks", a.d_k))]
    if fam == QK_PRODUCT:
        return [(n("Wq"), Role("col_pairs")), (n("Wk"), Role("col_pairs_dual"))]
    if fam in SCALING_FAMILIES:
        norm = "Ln_att" if fam == SCALING_ATT else "Ln_ffn"
        out = [(n(norm + "_gain"), ELEMENTS)]
        if a.norm_kind == "layernorm":
            out.append((n(norm + "_bias"), ELEMENTS))
        following = ["Wq", "Wk", "Wv"] if fam == SCALING_ATT else (
            ["W1", "W3"] if a.activation == "swiglu" else ["W1"])
        out += [(n(r), ROWS) for r in following]
        return out
    if fam == PERM_EMBED:
        if layer is not GLOBAL:
            raise ConfigurationError("perm_embed is a global site")
        out = [(a.name("E"), COLS)]
        for l in range(a.L):
            out += [(a.name(r, l), ROWS) for r in ("Wq", "Wk", "Wv", "W1")]
            if a.activation == "swiglu":
                out.append((a.name("W3", l), ROWS))
            out += [(a.name("Wo", l), COLS), (a.name("W2", l), COLS)]
            norms = ["Ln_att_gain", "Ln_ffn_gain"]
            if a.norm_kind == "layernorm":
                norms += ["Ln_att_bias", "Ln_ffn_bias"]
            if a.has_biases:
                norms.append("b2")
            out += [(a.name(r, l), ELEMENTS) for r in norms]
        out.append((a.name("Ln_out_gain"), ELEMENTS))
        if a.norm_kind == "layernorm":
            out.append((a.name("Ln_out_bias"), ELEMENTS))
        out.append((a.name("W_out"), ROWS))
        return out
    raise ConfigurationError(f"unknown invariant family {fam!r}")


def acted_size(family: str, arch: ModelArch) -> int:
    """Size of the dimension a permutation candidate acts on."""
    return {PERM_HEADS: arch.h, PERM_FFN: arch.d_ff, PERM_EMBED: arch.d, PERM_INSIDE_HEAD: arch.d_k}[family]
