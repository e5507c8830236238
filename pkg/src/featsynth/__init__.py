"""Feature-level synthetic data augmentation for semantic segmentation.

Trains a toy encoder/decoder segmentation network, a conditional feature
generator driven by label masks and latent codes, and a mixed real/synthetic
fine-tuning loop, plus the diagnostic battery used to compare feature stages.
"""

__version__ = "0.1.0"
