"""Outlier eigenvalues of a spiked matrix and the stable-rank gap.

A Hessian estimated from N samples is modelled as a few true spikes plus a
Wigner perturbation of size s(N) = N^(-1/2). Smaller datasets mean larger
perturbations, which pull the outliers outward and raise the stable rank.
"""

import numpy as np

from fedloru.linalg import symmetric_eigvals
from fedloru.spectral import (
    Semicircle,
    SpikedModel,
    limiting_stable_rank_difference,
    predicted_eigenvalue,
    spiked_sample,
)

measure = Semicircle(1.0)
model = SpikedModel((3.0, 1.0, -2.0), 1000)

print("  N    s(N)   predicted top   sampled top (5 draws)")
for n in (4, 16, 100, 1000):
    s = n ** -0.5
    tops = [symmetric_eigvals(spiked_sample(model, s, 1.0, seed))[0] for seed in range(5)]
    print(f"{n:4d}  {s:.3f}   {predicted_eigenvalue(3.0, n, measure):12.4f}   {np.mean(tops):12.4f}")

# Below the threshold |theta| = s a spike is swallowed by the bulk edge 2s.
print("\ntheta 0.1 at N=16 lands on the edge:", predicted_eigenvalue(0.1, 16, measure))

# The limiting stable-rank difference between a small and a large dataset.
for m, n in ((4, 100), (16, 1000), (100, 1000)):
    print(f"srank(H_{m}) - srank(H_{n}) -> {limiting_stable_rank_difference(model, m, n, measure):.5f}")
