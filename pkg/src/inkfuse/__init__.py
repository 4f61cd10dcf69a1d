"""Styled handwritten word generation with a ViT style encoder and cross-attention fusion."""

__version__ = "0.1.0"
