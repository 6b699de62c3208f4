"""
How much processing does the watermark survive?
===============================================

Prune, quantize and add noise to watermarked copies, then count how many
8-bit chunks still decode correctly, per invariant family.
"""
from collections import defaultdict

import numpy as np

from invmark import toy
from invmark.attacks import add_noise, prune, quantize
from invmark.codec import Message, WatermarkKey, extract, insert
from invmark.model_graph import resolve_sites

arch = toy.llama_like(L=4, d=64, h=16, d_ff=128)
key = WatermarkKey(51)
sites = resolve_sites(arch, key.families)
rng = np.random.default_rng(0)

attacks = {
    "prune 50%": lambda c: prune(c, 0.5),
    "prune 90%": lambda c: prune(c, 0.9),
    "quantize 8b": lambda c: quantize(c, 8),
    "quantize 3b": lambda c: quantize(c, 3),
    "noise 0.1 std": lambda c: add_noise(c, 0.1, seed=1, relative=True),
    "noise 1.0 std": lambda c: add_noise(c, 1.0, seed=1, relative=True),
}

hits = {name: defaultdict(list) for name in attacks}
for model in range(10):
    base = toy.random_checkpoint(arch, seed=model, dtype="F32")
    msg = Message.random(len(sites), 8, rng)
    marked = insert(base, arch, key, msg)
    for name, attack in attacks.items():
        got = extract(attack(marked), base, arch, key).chunks
        for site, a, b in zip(sites, got.chunks, msg.chunks):
            hits[name][site.family].append(a == b)

families = list(key.families)
print(f"{'attack':15s}" + "".join(f"{f:>13s}" for f in families))
for name, per in hits.items():
    print(f"{name:15s}" + "".join(f"{np.mean(per[f]):13.2f}" for f in families))
