"""Targeted unlearning of small language models with a numpy autodiff core."""

__version__ = "0.1.0"
