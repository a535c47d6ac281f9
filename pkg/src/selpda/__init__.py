"""Selective-representation partial domain adaptation."""

__version__ = "0.1.0"

from selpda.errors import ConfigurationError, ContractError, TrainingError

__all__ = ["ConfigurationError", "ContractError", "TrainingError", "__version__"]
