"""Autoregressive and CTC-based non-autoregressive translation on a numpy autodiff core."""

__version__ = "0.1.0"

from .estimators import ARTranslator, DualXentFilter, EnsembleTranslator, NARTranslator, RuleBasedCleaner, load_translator

__all__ = ["ARTranslator", "NARTranslator", "EnsembleTranslator", "RuleBasedCleaner", "DualXentFilter",
           "load_translator", "__version__"]
