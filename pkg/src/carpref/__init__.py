"""Preference fine-tuning of a small autoregressive CDR3 model and mutant search."""

__version__ = "0.1.0"
