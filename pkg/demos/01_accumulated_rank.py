"""Why accumulate: a run of rank-r updates adds up to a higher-rank change.

Each round of FedLoRU trains only a rank-r pair (A, B). Every tau rounds the
pair is folded into the frozen base and a fresh pair starts from zero, so
the total weight change is a sum of several rank-r pieces.
"""

import numpy as np

from fedloru.experiment import TrainConfig, build_experiment, run_rounds
from fedloru.linalg import numerical_rank
from fedloru.lowrank import comm_cost_full, comm_cost_lowrank

# A 32-feature, 20-class softmax model trained with rank-2 updates.
cfg = TrainConfig(algorithm="fedloru", clients=8, rounds=30, tau=5, rank=2, lr=5e-4, local_epochs=1,
                  n_samples=1600, n_features=32, n_classes=20, seed=0)
exp = build_experiment(cfg)
start = exp.server.model.layers[0].base.copy()

print("round  accumulations  rank of total change")
for _ in range(6):
    exp = run_rounds(exp, rounds=5)
    change = exp.server.model.layers[0].effective_weight() - start
    print(f"{exp.server.round:5d}  {len(exp.server.accumulated):13d}  {numerical_rank(change):20d}")

# Each piece is rank 2, so six accumulations reach rank 12 while every
# upload stays at the rank-2 price.
m, n = start.shape
print(f"\nper-client upload for the weight matrix: {comm_cost_lowrank(m, n, 2)} params "
      f"(full matrix: {comm_cost_full(m, n)})")

# Without accumulation (FedLoRA) the change never leaves rank 2.
flat = run_rounds(build_experiment(TrainConfig(**{**cfg.to_dict(), "algorithm": "fedlora"})))
change = flat.server.model.layers[0].effective_weight() - start
print(f"FedLoRA after 30 rounds: rank {numerical_rank(change)}")
np.testing.assert_array_equal(flat.server.model.layers[0].base, start)
