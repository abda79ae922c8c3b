from .base import PolicyModel, TokenSequence, Vocabulary
from .checkpoint import build_model, load_checkpoint, quantize, save_checkpoint
from .optim import OptimizerState, apply_update
from .sampling import greedy_batch, sample_batch
from .tabular import TabularPolicy
from .transformer import MicroTransformer

__all__ = [
    "MicroTransformer",
    "OptimizerState",
    "PolicyModel",
    "TabularPolicy",
    "TokenSequence",
    "Vocabulary",
    "apply_update",
    "build_model",
    "greedy_batch",
    "load_checkpoint",
    "quantize",
    "sample_batch",
    "save_checkpoint",
]
