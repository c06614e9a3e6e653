"""Graph-of-neurons sequence modeling at desk scale.

A character-level language model assembled from N weight-shared "neurons",
each combining a selective state-space memory with learned attention routing
across the neuron axis, plus the training, ablation, and interpretability
machinery needed to study the architecture on one CPU.
"""

from .errors import (CheckpointError, ConfigError, ContractError,
                     DimensionError, InputError, TrainingDiverged)
from .graph import AttentionMap, CommunicationMode, neuron_attention
from .model import (InnConfig, InnModel, complexity_probe, count_params,
                    count_params_formula, inn_forward, mamba_stack_config,
                    mamba_stack_forward, replicate)
from .ssm import discretize, mamba_block, selective_scan
from .tensor import GradTape, Tensor, backward, grad_check
from .training import (TrainConfig, adamw_step, clip_grad_norm,
                       load_checkpoint, onecycle_lr, run_ablation,
                       save_checkpoint, train)

__version__ = "0.1.0"
