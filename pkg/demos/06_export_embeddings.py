"""
Exporting an embedding grid
===========================

The exported file is one JSON header line followed by rows * cols * F
little-endian float32 values, ready for ICA or plotting elsewhere.
"""

import tempfile
from pathlib import Path

import numpy as np

from hybridsdm.evaluation import embedding_grid_centers, export_embedding_grid, read_embedding_grid
from hybridsdm.model import HybridModel, plan_capacity

model = HybridModel(plan_capacity(0.5, 32, 8), n_species=3, rng=np.random.default_rng(0))

with tempfile.TemporaryDirectory() as tmp:
    path = export_embedding_grid(model, (18, 36), Path(tmp) / "grid.emb")
    header, values = read_embedding_grid(path)

print({k: header[k] for k in ("rows", "cols", "features")})
direct = model.embed_array(embedding_grid_centers(18, 36)).astype(np.float32)
print("matches direct embedding:", np.array_equal(values, direct))
