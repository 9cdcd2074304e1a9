"""Recurrent convolutional pose estimation for multimodal rendezvous imagery."""

__version__ = "0.1.0"
