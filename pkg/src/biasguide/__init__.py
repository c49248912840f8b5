"""Guided debiasing of a small convnet on synthetic colour-biased shapes.

The numeric core (``autodiff``) is a reverse-mode tape over numpy arrays; the
remaining modules build a biased model ensemble, track bias-negative scores,
compute pairwise feature guidance and train the debiased model.
"""

__version__ = "0.1.0"
