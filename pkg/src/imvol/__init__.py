"""Resource orchestration for multiuser volumetric video playback over an O-RAN."""

from .env import (AllocationAction, DomainError, RenderingSite, StepOutcome, SystemConfig,
                  UserState, VolumetricEnv)

__all__ = ["AllocationAction", "DomainError", "RenderingSite", "StepOutcome", "SystemConfig",
           "UserState", "VolumetricEnv"]
__version__ = "0.1.0"
