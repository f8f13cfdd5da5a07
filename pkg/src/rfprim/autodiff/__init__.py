from . import tape as F
from .container import ContainerError
from .nn import MlpConfig, MlpParams, init_mlp, kaiming_uniform, mlp_forward, pe_encode
from .optim import AdamState, NonFiniteGradientError, adam_step, lr_schedule
from .tape import GradStore, Tape, Var, backward

__all__ = [
    "F", "Tape", "Var", "GradStore", "backward", "MlpConfig", "MlpParams", "init_mlp",
    "kaiming_uniform", "mlp_forward", "pe_encode", "AdamState", "adam_step", "lr_schedule",
    "NonFiniteGradientError", "ContainerError",
]
