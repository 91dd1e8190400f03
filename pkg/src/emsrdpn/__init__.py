"""Multi-scale dual-path super-resolution network on a small numpy autodiff engine."""

from .network import NetworkConfig, forward, forward_multi, init_params, self_ensemble
from .tensor import GradientTape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "GradientTape",
    "NetworkConfig",
    "Tensor",
    "backward",
    "forward",
    "forward_multi",
    "init_params",
    "self_ensemble",
]
