"""Quaternion graph neural networks (QGNN) and a GCN baseline on numpy."""

from .qalg import (
    DimensionError,
    DomainError,
    Quaternion,
    QTensor,
    hamilton,
    hamilton_block,
    hamilton_matmul,
    qconcat,
    qconjugate,
    qnorm,
    qnormalize,
    vec,
)
from .graph import CSRMatrix, Graph, GraphBatch, kfold_indices, normalize_adjacency, stratified_split
from .autograd import Tape, backward, check_gradients
from .layers import ConfigError, Model, ModelConfig, load_checkpoint, param_count, save_checkpoint
from .trainer import Metrics, TrainConfig, adam_step, cross_entropy, run_graph_task, run_node_task, run_text_task

__all__ = [
    "CSRMatrix", "ConfigError", "DimensionError", "DomainError", "Graph", "GraphBatch", "Metrics", "Model",
    "ModelConfig", "QTensor", "Quaternion", "Tape", "TrainConfig", "adam_step", "backward", "check_gradients",
    "cross_entropy", "hamilton", "hamilton_block", "hamilton_matmul", "kfold_indices", "load_checkpoint",
    "normalize_adjacency", "param_count", "qconcat", "qconjugate", "qnorm", "qnormalize", "run_graph_task",
    "run_node_task", "run_text_task", "save_checkpoint", "stratified_split", "vec",
]
