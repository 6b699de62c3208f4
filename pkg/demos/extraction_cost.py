"""
Cost of insertion and extraction
================================

Time both directions on synthetic single-layer models of growing width, with
full-matrix and first-rows extraction. No GPU involved.
"""
import time

import numpy as np

from invmark import toy
from invmark.codec import Message, WatermarkKey, extract, insert
from invmark.model_graph import resolve_sites

key = WatermarkKey(71)
print(f"{'d':>6s} {'insert':>8s} {'full':>8s} {'fast':>8s} {'speedup':>8s}  same")
for d in (256, 512, 1024, 2048):
    arch = toy.llama_like(L=1, d=d, h=16, d_ff=d, vocab=64)
    base = toy.random_checkpoint(arch, seed=0, dtype="F32")
    msg = Message.random(len(resolve_sites(arch, key.families)), 8, np.random.default_rng(d))
    t0 = time.perf_counter()
    marked = insert(base, arch, key, msg)
    t1 = time.perf_counter()
    full = extract(marked, base, arch, key)
    t2 = time.perf_counter()
    fast = extract(marked, base, arch, key, fast=True)
    t3 = time.perf_counter()
    print(f"{d:6d} {t1 - t0:8.3f} {t2 - t1:8.3f} {t3 - t2:8.3f} {(t2 - t1) / (t3 - t2):8.1f}  {fast.chunks == full.chunks}")
