"""Pseudo labels from scene flow and trajectory-regularized self-training for lidar detection."""

__version__ = "0.1.0"
