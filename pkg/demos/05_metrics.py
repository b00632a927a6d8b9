"""
Average precision, PR curves and linear probes
==============================================
"""

import numpy as np

from hybridsdm.data import checkerboard_field
from hybridsdm.evaluation import average_precision, interpolated_precision, probe_r2

scores = np.array([0.9, 0.8, 0.7])
labels = np.array([1, 0, 1])
print("AP:", average_precision(scores, labels))  # (1/1 + 2/3) / 2

# ties keep their input order
print("AP with tied scores:", average_precision([0.5, 0.5], [0, 1]))

grid = np.linspace(0, 1, 5)
print("interpolated precision:", interpolated_precision(scores, labels, grid))

# a held-out ridge fit measures how much of a field an embedding can explain
rng = np.random.default_rng(0)
coords = rng.uniform(-1, 1, (4000, 2))
field = checkerboard_field(coords, squares=4)
smooth = np.column_stack([np.sin(np.pi * coords), np.cos(np.pi * coords)])
cells = np.eye(16)[(np.floor((coords[:, 0] + 1) * 2) * 4 + np.floor((coords[:, 1] + 1) * 2)).astype(int)]
print("R2 smooth features:", round(probe_r2(smooth, field), 3))
print("R2 cell indicators:", round(probe_r2(cells, field), 3))
