"""Single-stream diffusion transformers and the parameter-audit, flow-matching,
sampling and scaling tooling around them, on numpy."""

from .arch import ModelConfig, build_model, forward
from .audit import audit_model, expected_counts, flops_estimate
from .flow import TimestepDist, gaussian_oracle, make_batch
from .sampler import SamplerConfig, cfg_combine, generate, heun_integrate

__all__ = [
    "ModelConfig",
    "SamplerConfig",
    "TimestepDist",
    "audit_model",
    "build_model",
    "cfg_combine",
    "expected_counts",
    "flops_estimate",
    "forward",
    "gaussian_oracle",
    "generate",
    "heun_integrate",
    "make_batch",
]
