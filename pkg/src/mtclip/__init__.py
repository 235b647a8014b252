"""Multi-task contrastive image-text training with dense pseudo-label heads."""

__version__ = "0.1.0"
