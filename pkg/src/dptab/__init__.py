"""Differentially private pretraining and parameter-efficient fine-tuning
of TabTransformer models on tabular data."""

__version__ = "0.1.0"
