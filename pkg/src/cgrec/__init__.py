"""cgrec

Cross-domain sequential recommendation with hierarchical category learning
and Shapley-driven loss re-balancing across domains.
"""

__version__ = "0.1.0"

from .coalition_game import GammaState, char_table, shapley_exact, update_gamma
from .config import RunConfig, TrainConfig, Variant, load_run_config
from .evaluator import EvalReport, evaluate
from .model import CGRecModel, build_model, load_checkpoint, save_checkpoint
from .sequence_store import HierVocab, ingest_events, ingest_files
from .synthgen import generate
from .trainer import fit

__all__ = [
    "CGRecModel",
    "EvalReport",
    "GammaState",
    "HierVocab",
    "RunConfig",
    "TrainConfig",
    "Variant",
    "__version__",
    "build_model",
    "char_table",
    "evaluate",
    "fit",
    "generate",
    "ingest_events",
    "ingest_files",
    "load_checkpoint",
    "load_run_config",
    "save_checkpoint",
    "shapley_exact",
    "update_gamma",
]
