"""Bimodal classification under severely missing modality.

Prior-weighted missing-modality reconstruction, uncertainty-guided feature
regularization, and a bilevel meta-learning trainer, with baselines and an
avMNIST-style experiment pipeline.
"""

__version__ = "0.1.0"
