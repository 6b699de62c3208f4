"""
Watermark a checkpoint and trace it back
========================================

Insert a random identifier into a small LLaMA-shaped model, decode it from
the weights alone and match it against a registry of distributed copies.
"""
import numpy as np

from invmark import toy
from invmark.codec import Message, WatermarkKey, extract, insert
from invmark.matcher import Registry, match
from invmark.model_graph import resolve_sites

# 16 heads so that 256 distinct head orders exist (see the note at the end)
arch = toy.llama_like(L=4, d=64, h=16, d_ff=128)
original = toy.random_checkpoint(arch, seed=0, dtype="F32")

# the key fixes the 256 candidate transforms of every site
key = WatermarkKey(master_seed=2024)
sites = resolve_sites(arch, key.families)
print(f"{len(sites)} sites, {key.k} bits each")

# hand out ten copies, each with its own identifier
rng = np.random.default_rng(0)
registry = Registry([(f"customer-{i}", Message.random(len(sites), key.k, rng)) for i in range(10)])
copies = {name: insert(original, arch, key, ident) for name, ident in registry.entries}

# one copy leaks; decode it with the original as reference
leaked = copies["customer-7"]
result = extract(leaked, original, arch, key)
print("decoded:", result.chunks.to_hex())
print("smallest margin between best and runner-up:", float(result.margins.min()))

report = match(result.chunks, registry)
print(f"best match {report.best_model_id}, {report.s} chunk errors, log10 p = {report.log10_pvalue:.1f}")

# fast mode only compares the first rows/columns of each matrix
print("fast mode agrees:", extract(leaked, original, arch, key, fast=True).chunks == result.chunks)

# With h=4 heads only 4! = 24 head orders exist, so the 256 head candidates
# collapse onto 24 distinct transforms and the decoder returns the lowest
# equivalent index; the decoded transform is right but the chunk may differ.
small = toy.llama_like()
base = toy.random_checkpoint(small, seed=0, dtype="F32")
msg = Message.random(20, 8, rng)
got = extract(insert(base, small, key, msg), base, small, key).chunks
print("h=4 head chunks sent/decoded:", msg.chunks[:4], got.chunks[:4])
