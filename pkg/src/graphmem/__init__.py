"""graphmem: a decoder-only language model whose feed-forward sublayer is a
graph-routed memory cell, with its training harness and diagnostics."""

from .errors import (
    CheckpointError,
    ConfigurationError,
    DomainError,
    GraphMemError,
    TrainingError,
)
from .memory_cell import (
    CentroidBank,
    EdgeGraph,
    MemoryCell,
    NavigationParams,
    RoutingResult,
    memory_cell_forward,
)
from .memory_maintenance import MaintenanceConfig
from .memory_objectives import LossWeights
from .model import (
    DENSE_FFN,
    GRAPH_MEMORY,
    Model,
    ModelConfig,
    desk_config,
    forward_batch,
    model_forward,
    paper_base_config,
    paper_baseline_config,
    parameter_count,
    toy_config,
)
from .numerics import Matrix, Tape, grad_check
from .training import (
    AdamW,
    TrainConfig,
    Trainer,
    lr_schedule,
    temperature_schedule,
    tokens_per_update,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "CentroidBank", "CheckpointError", "ConfigurationError",
    "DENSE_FFN", "DomainError", "EdgeGraph", "GRAPH_MEMORY", "GraphMemError",
    "LossWeights", "MaintenanceConfig", "Matrix", "MemoryCell", "Model",
    "ModelConfig", "NavigationParams", "RoutingResult", "Tape", "TrainConfig",
    "Trainer", "TrainingError", "desk_config", "forward_batch", "grad_check",
    "lr_schedule", "memory_cell_forward", "model_forward", "paper_base_config",
    "paper_baseline_config", "parameter_count", "temperature_schedule",
    "tokens_per_update", "toy_config", "validate",
]
