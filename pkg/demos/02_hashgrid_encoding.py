"""
Multiresolution grid features
=============================

A hash-grid encoder stores learnable features at the vertices of L regular
grids whose resolutions grow geometrically. A location's feature vector is
the bilinear blend of its four surrounding vertices on every level.
"""

import numpy as np

from hybridsdm.hashgrid import HashGridEncoder, resolution_schedule

print("resolutions:", np.round(resolution_schedule(16, 512, 8), 3))

enc = HashGridEncoder(n_levels=8, n_features=2, r_min=16, r_max=512, rng=np.random.default_rng(0))
for lv in enc.levels:
    storage = "dense" if lv.dense else "hashed"
    print(f"level {lv.level}: {lv.cells:3d} cells per side, {lv.table_size:5d} rows ({storage})")

# coordinates are (lat / 90, lon / 180)
points = np.array([[0.0, 0.0], [0.5, -0.25], [-1.0, 1.0]])
features = enc.encode(points)
print("output shape:", features.shape)

# the encoder is linear in its tables, so the backward pass is a scatter-add
enc.encode_backward(points, np.ones(features.shape))
touched = sum(int(np.count_nonzero(t.grad.any(axis=1))) for t in enc.tables)
print("table rows receiving gradient:", touched)
