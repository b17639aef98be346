from .checkpoint import read_checkpoint, write_checkpoint
from .errors import AuditError, ConfigError, DimensionError, NumericError
from .gradcheck import grad_check
from .kernels import matmul
from .optim import OptimState, optim_step
from .params import Param, ParamStore
from .rng import Rng

__all__ = [
    "AuditError",
    "ConfigError",
    "DimensionError",
    "NumericError",
    "OptimState",
    "Param",
    "ParamStore",
    "Rng",
    "grad_check",
    "matmul",
    "optim_step",
    "read_checkpoint",
    "write_checkpoint",
]
