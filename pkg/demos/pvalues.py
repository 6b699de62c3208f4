"""
When is a match significant?
============================

The chance that a random model agrees with one of N identifiers on at least
m - s chunks, for 64 chunks of 8 bits.
"""
from invmark.matcher import log10_pvalue

m, k = 64, 8
print("log10 p-value")
print(" s       N=1     N=100    N=10^6")
for s in (0, 32, 48, 56, 58, 60, 62, 63, 64):
    row = [log10_pvalue(s, m, k, n) for n in (1, 100, 10**6)]
    print(f"{s:2d}  " + "".join(f"{v:10.2f}" for v in row))

# eight matching bytes already make an unlikely coincidence
print("p(56 errors, N=100) =", 10 ** log10_pvalue(56, m, k, 100))
