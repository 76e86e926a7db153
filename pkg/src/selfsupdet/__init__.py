"""Self-supervised salient object detection and segmentation, desk scale.

A proposal-grid detector is trained without labels by pairing an
inpainting-based background objective (which cells are impossible to
re-synthesize from their surroundings) with an autoencoding foreground
objective (how well a cropped candidate re-composites over the predicted
background), optimized through the discrete candidate distribution with an
epsilon-smoothed importance-sampling estimator.
"""

__version__ = "0.1.0"
