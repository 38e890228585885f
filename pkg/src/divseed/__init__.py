"""divseed: point-wise self-supervision for semantic segmentation.

Per-class localization scorers are trained from image-level tags alone, a
greedy feature-space diversity sampler turns their score maps into a sparse
set of pseudo-labeled points, and a per-location classifier trained on those
points produces dense segmentations. A deterministic synthetic benchmark
with exact ground truth makes every stage verifiable end to end.
"""

__version__ = "0.1.0"
