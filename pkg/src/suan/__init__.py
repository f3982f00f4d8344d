"""Stacked unified attention network for CTR prediction, with sparse/packed
inference, online distillation and power-law scaling fits."""

__version__ = "0.1.0"
