"""Stackelberg-game unlearnable examples at desk scale."""

__version__ = "0.1.0"

from .estimators import GUEPoisoner, MLPVictim  # noqa: E402

__all__ = ["GUEPoisoner", "MLPVictim", "__version__"]
