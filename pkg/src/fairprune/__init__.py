"""Fairness-aware gradual magnitude pruning of small MLPs.

Dense models are pruned on a cubic schedule and fine-tuned under
per-group accuracy-gap constraints solved by alternating gradient
descent-ascent.
"""

__version__ = "0.1.0"
