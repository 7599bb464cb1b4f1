"""Sparse DAG learning from linear SEM data by mixed-integer quadratic programming."""

from .graph import (CyclicInput, Digraph, LayerNumbering, SuperStructure, WeightedDag,
                    complete_superstructure, find_cycle, minimal_layers, moralize, shd,
                    tpr_fpr)
from .model import FormulationSpec, MiqpModel, build, estimate_big_m, extract_dag
from .sem import Dataset, GramCache, assign_weights, random_dag, sample_sem

__all__ = [
    "CyclicInput", "Digraph", "LayerNumbering", "SuperStructure", "WeightedDag",
    "complete_superstructure", "find_cycle", "minimal_layers", "moralize", "shd", "tpr_fpr",
    "FormulationSpec", "MiqpModel", "build", "estimate_big_m", "extract_dag",
    "Dataset", "GramCache", "assign_weights", "random_dag", "sample_sem",
]
