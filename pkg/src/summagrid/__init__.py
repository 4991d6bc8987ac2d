"""Simulated 2D-mesh (SUMMA) tensor-parallel transformer.

A q x q device grid runs a transformer whose activations and parameters are
both split across two mesh dimensions; block matrix products travel by
row/column broadcasts and reduces whose costs land in a per-device ledger.
A serial reference model defines numerical ground truth, a closed-form cost
model predicts the ledger, and arena-based buffer accounting mirrors the
workspace / forward / backward / parameter-gradient / conjunction scheme of
checkpointed execution.
"""

from .errors import (
    BufferOverflowError,
    CheckpointMissingError,
    ConfigError,
    MeshMismatchError,
    ShapeError,
    SummaGridError,
    VerificationError,
)
from .layers import ModelConfig
from .membuf import BufferPlan, CheckpointStore, Workspace, plan_buffers
from .mesh import (
    CommLedger,
    CommReport,
    CostParams,
    DeviceRank,
    Mesh,
    MeshConfig,
    Placement,
    create_mesh,
    ledger_csv,
    ledger_report,
    placement_traffic,
)
from .model import MeshModel, init_global_params, load_checkpoint, run_loss_and_grads, save_checkpoint
from .summa import (
    ShardedMatrix,
    gather,
    scatter,
    summa_ab,
    summa_ab_backward,
    summa_abt,
    summa_abt_backward,
    summa_atb,
    summa_atb_backward,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
