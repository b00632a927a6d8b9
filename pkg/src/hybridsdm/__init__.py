"""Hybrid implicit/explicit location encoders for presence-only species distribution models."""

from .checkpoint import Checkpoint, load_checkpoint, read_checkpoint, save_checkpoint
from .data import (ObservationSet, RangeRaster, SyntheticSpec, default_synthetic_spec,
                   generate_synthetic, load_observations, read_rasters)
from .evaluation import (EvalReport, average_precision, benchmark_timing, evaluate_map,
                         export_embedding_grid, precision_recall_curve, probe_r2)
from .hashgrid import HashGridEncoder, resolution_schedule, vertex_index
from .implicit import ImplicitEncoder, wrap_encode
from .model import CapacityPlan, GridConfig, HybridModel, plan_capacity
from .training import (AdamState, EvalSpec, TrainConfig, adam_step, an_full_loss,
                       apply_observation_cap, sample_pseudoabsences, sweep, train)

__version__ = "0.1.0"
