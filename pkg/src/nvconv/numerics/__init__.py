from . import autodiff as ad
from .autodiff import Tape, Var, backward, kink_monitor
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, check_gradients, finite_diff_grad, relative_error
from .ops import NumericError, matmul, relu6, sigmoid
from .params import ParamStore, adam_step, clip_grad_norm

__all__ = [
    "ad", "Tape", "Var", "backward", "kink_monitor",
    "CheckpointError", "load_checkpoint", "save_checkpoint",
    "GradCheckReport", "check_gradients", "finite_diff_grad", "relative_error",
    "NumericError", "matmul", "relu6", "sigmoid",
    "ParamStore", "adam_step", "clip_grad_norm",
]
