"""Prompt relocation for visual prompt tuning on a small numpy ViT."""

__version__ = "0.1.0"

from .autodiff import ContractError, Tensor
from .data import Dataset, SyntheticSpec, load_dataset, make_block_sensitive_task, normalize, save_dataset
from .prompts import (Distribution, IdlenessReport, PromptSet, RelocationEvent, allocate, idleness_approx,
                      idleness_exact, prune, reward_approx, reward_exact, select_prune)
from .trainer import STRATEGIES, TrainConfig, run_training
from .vit import PromptedViT, VitConfig, VitWeights
