"""Federated mixture of generalist and specialist LoRA experts on a tiny language model,
plus numerical certification of the alternating-minimization theory."""
from .bilevel import BilevelState, TrainerConfig, local_train
from .config import RunConfig, load as load_config
from .convex import DecoupledInstance, QuadraticBilevel, contraction_rate, quad_operator_T
from .data import CategorySpec, ClientCorpus, generate, make_categories
from .estimators import DecoupledMoEClassifier, DecoupledMoERegressor
from .federation import FederationConfig, comm_bytes_per_round, run_experiment
from .moe_lora import MoELoraLayer, load_balance_loss, moe_forward
from .toy_lm import ModelConfig, TinyLM, perplexity

__all__ = [
    "BilevelState", "TrainerConfig", "local_train", "RunConfig", "load_config",
    "DecoupledInstance", "QuadraticBilevel", "contraction_rate", "quad_operator_T",
    "CategorySpec", "ClientCorpus", "generate", "make_categories",
    "DecoupledMoEClassifier", "DecoupledMoERegressor",
    "FederationConfig", "comm_bytes_per_round", "run_experiment",
    "MoELoraLayer", "load_balance_loss", "moe_forward",
    "ModelConfig", "TinyLM", "perplexity",
]
