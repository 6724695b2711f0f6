"""Desk-scale multi-task volumetric U-Net for cortical lesion detection,
with a synthetic brain-phantom generator and lesion-wise evaluation."""

__version__ = "0.1.0"
