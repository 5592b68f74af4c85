"""Retinal vessel segmentation with tokenized KAN blocks, attention gates and a label-aware pixel contrastive loss."""

__version__ = "0.1.0"
