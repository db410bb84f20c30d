"""Plug-and-play adversarial domain adaptation for cross-modality segmentation."""

__version__ = "0.1.0"
