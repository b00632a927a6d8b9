"""
Splitting capacity between implicit and explicit features
=========================================================

The embedding width F is shared between an MLP over sinusoidal coordinates
(F_i columns) and L grid levels of M features each, with F_i + L * M = F.
"""

from hybridsdm.model import HybridModel, plan_capacity

for k in range(9):
    imp = k / 8
    plan = plan_capacity(imp, 256)
    n = HybridModel(plan, n_species=20).num_parameters()
    print(f"implicitness {imp:5.3f}: F_i={plan.F_i:3d}  L={plan.L:2d}  M={plan.M:2d}  parameters={n:,}")

# settings that do not divide evenly are refused with a suggestion
try:
    plan_capacity(0.3, 256, 16)
except ValueError as err:
    print("refused:", err)
