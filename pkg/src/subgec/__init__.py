"""Graph contrastive learning with Gaussian-embedded subgraphs and optimal-transport losses."""

from __future__ import annotations

from . import autodiff, gnn, graph, losses, ot, trainer
from .gnn import ModelParams
from .graph import Graph, load_dataset, save_dataset
from .losses import LossConfig
from .trainer import TrainConfig, linear_probe, train

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "LossConfig",
    "ModelParams",
    "TrainConfig",
    "autodiff",
    "gnn",
    "graph",
    "linear_probe",
    "load_dataset",
    "losses",
    "ot",
    "save_dataset",
    "train",
    "trainer",
]
