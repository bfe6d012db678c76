"""Patch-based semi-supervised GAN classification of fundus images.

Modules: ``dataset`` (loading, tiling, splits, synthetic cohorts), ``model``
(networks and losses), ``training`` (SSL-GAN and ConvNet loops),
``evaluation`` (AUC, aggregation, experiment grid), ``overlay`` (heatmaps)
and ``cli``.
"""

__version__ = "0.1.0"
