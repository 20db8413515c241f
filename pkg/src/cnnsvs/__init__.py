"""CNN-based singing-voice acoustic modeling at desk scale.

Musical-score features are mapped to acoustic feature sequences segment by
segment with a fully convolutional network trained on a trajectory
likelihood.  A frame-wise FFNN + MLPG baseline, state-driven complexity
reduction with MAC accounting, and an MLSA vocoder are included.
"""

__version__ = "0.1.0"
