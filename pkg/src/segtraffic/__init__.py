"""Vehicle segmentation on grayscale video frames.

Adaptive background modelling, a small RoI-pooling detector, foreground
driven proposals and active-net mesh refinement, plus detection metrics.
"""

__version__ = "0.1.0"
