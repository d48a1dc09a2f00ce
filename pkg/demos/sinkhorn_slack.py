"""Soft assignment with a slack row and column.

A score matrix between m source and n target points is padded with one
extra row and column holding a single learnable score alpha. Sinkhorn
iterations in log space then push every real row and column to sum to one;
points without a partner park their mass in the slack entries.

Run:  python3 demos/sinkhorn_slack.py
"""

import numpy as np

from riga.matcher import extract_fine, sinkhorn_normalize

np.set_printoptions(precision=3, suppress=True)

# three source points, three targets; 0<->1 and 1<->0 are strong, point 2 has no partner
scores = np.array([[0.0, 4.0, -1.0],
                   [4.0, 0.0, -1.0],
                   [-1.0, -1.0, -1.0]])
Z = sinkhorn_normalize(scores, alpha=1.0, iterations=100)
print("augmented confidence matrix (last row and column are slack):")
print(Z.values)
print("row sums:", Z.values.sum(1))
print("col sums:", Z.values.sum(0))
print("mutual matches:", extract_fine(Z.values).pairs())

# the 1x1 case has a closed form: the match probability is a logistic in (s - alpha) / 2
for s in (-2.0, 0.0, 2.0):
    z = sinkhorn_normalize([[s]], 0.0, 100).values[0, 0]
    print(f"s={s:+.0f}: sinkhorn {z:.6f}   closed form {1 / (1 + np.exp(-s / 2)):.6f}")
