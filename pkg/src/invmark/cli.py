"""Command-line entry point: ``invmark <subcommand> ...``.

Machine-readable results go to stdout as one JSON document; diagnostics go to
stderr. Exit status is 0 on success, 1 on a runtime failure and 2 on a usage
error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import toy
from .attacks import add_noise, prune, quantize
from .codec import Message, WatermarkKey, extract, insert
from .errors import InvmarkError
from .matcher import Registry, match
from .model_graph import DEFAULT_FAMILIES, ModelArch, resolve_sites, validate_checkpoint
from .tensor_store import read_checkpoint, write_checkpoint
from .transformer import distortion, equivalence_check, random_sequences

BENCH_GROUPS = {"perm": ("perm_heads", "perm_ffn"), "scaling": ("scaling_att", "scaling_ffn"),
                "qk": ("qk_product",)}


class UsageError(Exception):
    pass


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _families(text: str | None) -> tuple[str, ...]:
    if not text:
        return DEFAULT_FAMILIES
    return tuple(f.strip() for f in text.split(",") if f.strip())


def _load_model(ckpt_path, arch_path):
    arch = ModelArch.load(arch_path)
    ckpt = read_checkpoint(ckpt_path)
    validate_checkpoint(ckpt, arch)
    return ckpt, arch


def cmd_keygen(args) -> int:
    if not 1 <= args.k <= 16:
        raise UsageError(f"--k must lie in [1, 16], got {args.k}")
    opts = dict(k=args.k, families=_families(args.families), lambda_enabled=args.lambda_enabled,
                subset_r=args.subset_r, scaling_log10_range=tuple(args.scaling_range))
    key = WatermarkKey(args.seed, **opts) if args.seed is not None else WatermarkKey.generate(**opts)
    key.save(args.out)
    _emit(key.to_dict())
    return 0


def cmd_insert(args) -> int:
    ckpt, arch = _load_model(args.input, args.arch)
    key = WatermarkKey.load(args.key)
    m = len(resolve_sites(arch, key.families))
    if args.random_id:
        msg = Message.random(m, key.k)
    else:
        msg = Message.from_hex(args.identifier, key.k)
        if len(msg) != m:
            raise UsageError(f"identifier has {len(msg)} chunks, the key and architecture need {m}")
    write_checkpoint(insert(ckpt, arch, key, msg), args.out)
    model_id = args.model_id or Path(args.out).stem
    if args.registry:
        Registry.append(args.registry, model_id, msg)
    _emit({"model_id": model_id, "identifier": msg.to_hex(), "m": m, "k": key.k})
    return 0


def cmd_extract(args) -> int:
    observed, arch = _load_model(args.observed, args.arch)
    original, _ = _load_model(args.original, args.arch)
    key = WatermarkKey.load(args.key)
    res = extract(observed, original, arch, key, fast=args.fast)
    out = {"identifier_hex": res.chunks.to_hex(), "k": key.k, "m": len(res.chunks), "fast": args.fast,
           "margins": [float(x) for x in res.margins],
           "sites": [{"family": s.family, "layer": s.layer, "chunk": c}
                     for s, c in zip(res.sites, res.chunks.chunks)]}
    if args.out:
        Path(args.out).write_text(json.dumps(out, sort_keys=True) + "\n")
    _emit(out)
    return 0


def cmd_match(args) -> int:
    if args.from_extract:
        doc = json.loads(Path(args.from_extract).read_text())
        k = int(doc["k"])
        extracted = Message.from_hex(doc["identifier_hex"], k)
    elif args.identifier:
        k = WatermarkKey.load(args.key).k if args.key else args.k
        extracted = Message.from_hex(args.identifier, k)
    else:
        raise UsageError("give an identifier or --from-extract")
    report = match(extracted, Registry.load(args.registry, k), args.p_threshold)
    _emit(report.to_dict())
    return 0


def cmd_attack(args) -> int:
    if args.noise_sigma is None and args.quantize_bits is None and args.prune_sparsity is None:
        raise UsageError("choose at least one of --noise-sigma, --quantize-bits, --prune-sparsity")
    ckpt = read_checkpoint(args.input)
    applied = []
    if args.noise_sigma is not None:
        ckpt = add_noise(ckpt, args.noise_sigma, args.seed, relative=args.noise_relative)
        applied.append({"kind": "noise", "sigma": args.noise_sigma, "relative": args.noise_relative,
                        "seed": args.seed})
    if args.quantize_bits is not None:
        ckpt = quantize(ckpt, args.quantize_bits)
        applied.append({"kind": "quantize", "bits": args.quantize_bits})
    if args.prune_sparsity is not None:
        ckpt = prune(ckpt, args.prune_sparsity)
        applied.append({"kind": "prune", "sparsity": args.prune_sparsity})
    write_checkpoint(ckpt, args.out)
    _emit({"attacks": applied, "out": str(args.out)})
    return 0


def cmd_verify(args) -> int:
    a, arch = _load_model(args.a, args.arch)
    b, _ = _load_model(args.b, args.arch)
    eq = equivalence_check(a, b, arch, n_seqs=args.n_seqs, tol=args.tol, seq_len=args.seq_len, seed=args.seed)
    out = {"max_logit_diff": eq.max_abs_logit_diff, "max_abs_logit": eq.max_abs_logit, "tol": eq.tol,
           "pass": eq.passed, "distortion": None}
    if args.distortion_seqs:
        seqs = random_sequences(args.distortion_seqs, args.seq_len, arch.vocab, args.seed + 1)
        rep = distortion(a, b, arch, seqs)
        out["distortion"] = rep.fraction
        out["distortion_by_position"] = {"edges": rep.bucket_edges, "fractions": rep.bucket_fractions}
    _emit(out)
    return 0


def _parse_size(text: str) -> tuple[int, int]:
    try:
        d, L = text.lower().split("x")
        return int(d), int(L)
    except ValueError as exc:
        raise UsageError(f"size {text!r} is not of the form DxL") from exc


def cmd_bench(args) -> int:
    rows = []
    for size in args.sizes.split(","):
        d, L = _parse_size(size)
        h = max(1, d // args.head_dim)
        arch = toy.llama_like(L=L, d=d, h=h, d_ff=4 * d if args.ffn_mult is None else args.ffn_mult * d,
                              vocab=args.vocab)
        base = toy.random_checkpoint(arch, seed=args.seed, dtype="F32")
        row = {"d": d, "L": L, "h": h}
        for group, fams in BENCH_GROUPS.items():
            key = WatermarkKey(args.seed, k=args.k, families=fams)
            msg = Message.random(len(resolve_sites(arch, fams)), args.k, np.random.default_rng(args.seed))
            t0 = time.perf_counter()
            marked = insert(base, arch, key, msg)
            t1 = time.perf_counter()
            got = extract(marked, base, arch, key, fast=args.fast)
            t2 = time.perf_counter()
            row[f"insert_{group}_s"] = round(t1 - t0, 4)
            row[f"extract_{group}_s"] = round(t2 - t1, 4)
            row[f"accuracy_{group}"] = float(np.mean(np.array(got.chunks.chunks) == np.array(msg.chunks)))
        rows.append(row)
        print(f"bench d={d} L={L} done", file=sys.stderr)
    _emit({"k": args.k, "fast": args.fast, "rows": rows})
    return 0


def cmd_toy(args) -> int:
    make = toy.llama_like if args.kind == "llama" else toy.classic
    arch = make(L=args.layers, d=args.d, h=args.heads, d_ff=args.d_ff, vocab=args.vocab)
    arch.save(args.arch_out)
    write_checkpoint(toy.random_checkpoint(arch, args.seed, args.dtype), args.out)
    _emit({"arch": str(args.arch_out), "checkpoint": str(args.out)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="invmark", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("keygen", help="write a watermark key")
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--families", help="comma-separated, default: " + ",".join(DEFAULT_FAMILIES))
    s.add_argument("--seed", type=lambda x: int(x, 0), help="master seed (default: OS entropy)")
    s.add_argument("--lambda", dest="lambda_enabled", action="store_true", help="scale QK pairs as well")
    s.add_argument("--subset-r", type=int, default=100)
    s.add_argument("--scaling-range", type=float, nargs=2, default=(-1.0, 1.0), metavar=("LO", "HI"))
    s.set_defaults(func=cmd_keygen)

    s = sub.add_parser("insert", help="watermark a checkpoint with an identifier")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--arch", required=True)
    s.add_argument("--key", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--identifier")
    g.add_argument("--random-id", action="store_true")
    s.add_argument("--out", required=True)
    s.add_argument("--registry")
    s.add_argument("--model-id")
    s.set_defaults(func=cmd_insert)

    s = sub.add_parser("extract", help="decode the identifier of a suspect checkpoint")
    s.add_argument("--observed", required=True)
    s.add_argument("--original", required=True)
    s.add_argument("--arch", required=True)
    s.add_argument("--key", required=True)
    s.add_argument("--fast", action="store_true")
    s.add_argument("--out", help="also write the JSON result here")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("match", help="match an identifier against a registry")
    s.add_argument("identifier", nargs="?")
    s.add_argument("--from-extract")
    s.add_argument("--registry", required=True)
    s.add_argument("--key")
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--p-threshold", type=float, default=1e-6)
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("attack", help="noise, quantize and/or prune a checkpoint (fine-tuning: use noise)")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--noise-sigma", type=float)
    s.add_argument("--noise-relative", action="store_true", help="sigma is a multiple of each tensor's std")
    s.add_argument("--quantize-bits", type=int)
    s.add_argument("--prune-sparsity", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("verify", help="compare the outputs of two checkpoints")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--arch", required=True)
    s.add_argument("--tol", type=float, default=1e-9)
    s.add_argument("--n-seqs", type=int, default=64)
    s.add_argument("--seq-len", type=int, default=32)
    s.add_argument("--distortion-seqs", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("bench", help="time insertion and extraction on synthetic models")
    s.add_argument("--sizes", default="64x2,128x2,256x2", help="comma-separated DxL")
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--fast", action="store_true")
    s.add_argument("--head-dim", type=int, default=16)
    s.add_argument("--ffn-mult", type=int)
    s.add_argument("--vocab", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("toy", help="write a random toy checkpoint and its architecture file")
    s.add_argument("--kind", choices=("llama", "classic"), default="llama")
    s.add_argument("--out", required=True)
    s.add_argument("--arch-out", required=True)
    s.add_argument("--layers", type=int, default=4)
    s.add_argument("--d", type=int, default=64)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--d-ff", type=int, default=128)
    s.add_argument("--vocab", type=int, default=256)
    s.add_argument("--dtype", choices=("F32", "F64"), default="F32")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_toy)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"invmark {args.command}: {exc}", file=sys.stderr)
        return 2
    except (InvmarkError, OSError, ValueError, KeyError) as exc:
        print(f"invmark {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
