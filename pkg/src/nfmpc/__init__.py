"""Learned latent-space sampling distributions for MPPI control."""

from .controller import (
    NFMPC,
    ConfigurationError,
    FlowMPPI,
    GaussianMPPI,
    LatentGaussian,
    MPPIConfig,
    NFMPCConfig,
    ShiftModel,
)
from .flow import FlowConfig, FlowDomainError, FlowModel
from .training import TrainConfig, train

__all__ = [
    "NFMPC", "ConfigurationError", "FlowMPPI", "GaussianMPPI", "LatentGaussian", "MPPIConfig",
    "NFMPCConfig", "ShiftModel", "FlowConfig", "FlowDomainError", "FlowModel", "TrainConfig", "train",
]
