"""Segmentation library: plain-ViT backbone with a two-pathway local
high-frequency branch, guided subpixel upsampling, and a query decoder with
discriminative cross-attention, on a self-contained tensor/autodiff core."""

__version__ = "0.1.0"
