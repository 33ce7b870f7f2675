"""Non-neural stages of a perineural-invasion detection pipeline for whole-slide images.

Tissue preprocessing, overlapping patch tiling, ensemble score aggregation,
heatmap stitching and diagnostic metrics, plus a synthetic cohort generator.
"""

__version__ = "0.1.0"
