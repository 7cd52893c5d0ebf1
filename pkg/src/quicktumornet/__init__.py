"""QuickTumorNet: encoder/decoder CNN for brain-tumor slice segmentation."""

__version__ = "0.1.0"
