"""skihl: soft-logic label inference over a multi-resolution raster hierarchy,
coupled to an uncertainty-aware weakly supervised pixel classifier."""

from .hierarchy import (CellId, Frontier, HierarchyConfig, build_root,
                        canonical_key, cell_mean, children_of, leaf_adjacency,
                        leaf_means, load_frontier, refine, save_frontier)
from .inference import (LN2, SolveResult, SolverParams, TruthAssignment,
                        UncertaintyMap, entropy, entropy_uncertainty,
                        hierarchical_loss_report, hinge_objective, objective,
                        rule_distance, select_refinement, solve, t_and, t_not,
                        t_or)
from .knowledge import (CountsReport, GroundProgram, GroundRule, KBSyntaxError,
                        KnowledgeBase, Literal, Rule, count_ground_atoms,
                        default_kb, ground, parse_kb)
from .learner import (PixelClassifier, ReferenceClassifier, TrainParams,
                      cell_probability, load_checkpoint, mil_loss,
                      save_checkpoint, soft_bce, train, train_sparse_baseline)
from .metrics import avu, avu_from_counts, classification_report, confusion
from .pipeline import (PipelineConfig, RunReport, config_from_toml, evaluate,
                       run, run_baseline, run_full_grounding)
from .raster import (FeatureStack, LabelMap, RasterFormatError, SparseLabels,
                     load_label_map, load_raster, load_sparse_labels,
                     save_label_map, save_raster, save_sparse_labels)
from .synth import ScenarioConfig, generate, write_scenario

__version__ = "0.1.0"

__all__ = [
    "CellId", "Frontier", "HierarchyConfig", "build_root", "canonical_key",
    "cell_mean", "children_of", "leaf_adjacency", "leaf_means",
    "load_frontier", "refine", "save_frontier",
    "LN2", "SolveResult", "SolverParams", "TruthAssignment", "UncertaintyMap",
    "entropy", "entropy_uncertainty", "hierarchical_loss_report",
    "hinge_objective", "objective", "rule_distance", "select_refinement",
    "solve", "t_and", "t_not", "t_or",
    "CountsReport", "GroundProgram", "GroundRule", "KBSyntaxError",
    "KnowledgeBase", "Literal", "Rule", "count_ground_atoms", "default_kb",
    "ground", "parse_kb",
    "PixelClassifier", "ReferenceClassifier", "TrainParams",
    "cell_probability", "load_checkpoint", "mil_loss", "save_checkpoint",
    "soft_bce", "train", "train_sparse_baseline",
    "avu", "avu_from_counts", "classification_report", "confusion",
    "PipelineConfig", "RunReport", "config_from_toml", "evaluate", "run",
    "run_baseline", "run_full_grounding",
    "FeatureStack", "LabelMap", "RasterFormatError", "SparseLabels",
    "load_label_map", "load_raster", "load_sparse_labels", "save_label_map",
    "save_raster", "save_sparse_labels",
    "ScenarioConfig", "generate", "write_scenario",
    "__version__",
]
