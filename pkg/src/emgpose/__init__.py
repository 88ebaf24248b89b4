"""Hardware-free sEMG-to-hand-pose pipeline: retargeting, EMG2Pose-style
regression and sliding-window streaming inference."""

__version__ = "0.1.0"
