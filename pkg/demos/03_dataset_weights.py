"""
Weighting datasets by how slowly they converge
==============================================

Datasets that take longer to fit get a larger share of the loss. The weight
grows with the epoch ``n_e`` at which a dataset's training macro F-1 first
reaches 0.9, saturating at a rate set by ``beta``.
"""

import numpy as np

from sfxembed.training import fdr_weights

###############################################################################
# Raw weights are the effective number (1 - beta**n) / (1 - beta): exactly 1
# at n = 1 and close to n while beta**n stays near 1.

for beta in (0.9, 0.99, 0.999):
    raw = fdr_weights({f"n={n}": n for n in (1, 2, 5, 10, 30)}, beta).raw
    print(f"beta={beta}: " + ", ".join(f"{k} {v:.3f}" for k, v in raw.items()))

###############################################################################
# After rescaling, the weights of D datasets sum to D, so an easy dataset
# drops below 1 and a hard one rises above it.

w = fdr_weights({"clean": 3, "noisy": 9, "huge": 20}, beta=0.9)
print({k: round(v, 3) for k, v in w.alpha.items()}, "sum", round(sum(w.alpha.values()), 12))

###############################################################################
# A smaller beta compresses the range: slow datasets stop gaining weight.

n = np.arange(1, 31)
for beta in (0.5, 0.9, 0.99):
    alpha = fdr_weights({str(k): int(k) for k in n}, beta).alpha
    print(f"beta={beta}: alpha'(1)={alpha['1']:.3f} alpha'(30)={alpha['30']:.3f}")
