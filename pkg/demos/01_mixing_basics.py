#!/usr/bin/env python3
"""Walkthrough of the core mechanism: craft N experts from K basis models.

Builds a small basis bank, assigns mixing coefficients to timestep intervals,
materializes experts, and verifies that mixing inside a linear layer equals
materialize-then-multiply.
"""

import numpy as np

from remixdiff import numerics as nx
from remixdiff import remix
from remixdiff.numerics import Tensor

rng = np.random.default_rng(0)

# A 1000-step denoising chain split into N=6 intervals, served by K=3 bases.
T, N, K = 1000, 6, 3
partition = remix.IntervalPartition(T=T, N=N)
print(f"chain T={T}, experts N={N}, bases K={K}, interval width {partition.width}")
for t in (0, 250, 999):
    print(f"  timestep {t} -> expert {remix.interval_of(t, partition)}")

# The bank stores every layer K-widened: leading axis indexes the basis.
layers = {
    "fc.w": Tensor(rng.standard_normal((K, 8, 4)).astype(np.float32), requires_grad=True),
    "fc.b": Tensor(rng.standard_normal((K, 4)).astype(np.float32), requires_grad=True),
}
bank = remix.BasisBank(K, layers)
audit = remix.size_audit(bank, N)
print(f"\nstored values: bank {audit['bank_values']} vs "
      f"{audit['expert_values']} for {N} independent experts")

# Learnable softmax mixer: one row of logits per expert.
mixer = remix.create_mixer("softmax", "global", N, K, rng)
print("\ncoefficient rows (softmax of random logits):")
print(np.round(remix.coefficient_matrix(mixer), 3))

# Materializing expert i averages the bank under its coefficient row.
alpha = remix.coefficients(mixer, 2)
theta = remix.materialize_expert(bank, alpha.data)
print("\nexpert 2 weight shape:", theta["fc.w"].shape, "(same as a plain layer)")

# The mixed linear layer computes the same thing without materializing first.
x = Tensor(rng.standard_normal((5, 8)).astype(np.float32))
mixed = remix.mixed_linear_forward(x, layers["fc.w"], layers["fc.b"], alpha)
plain = x.data @ theta["fc.w"] + theta["fc.b"]
print("mixed-linear vs materialized max abs diff:",
      float(np.abs(mixed.data - plain).max()))

# Gradients flow to the bank AND the coefficients through the mixing op.
loss = nx.reduce_sum(mixed * mixed)
loss.backward()
print("\ncoefficient gradient (inner products of d(loss)/d(theta) with each basis):")
print(mixer.logits.grad[2])
print("one training signal updates every basis:",
      all(np.any(t.grad[k] != 0) for t in layers.values() for k in range(K)))
