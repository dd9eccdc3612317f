"""Learnable-query multimodal fusion with gated mixing and a sparse MoE head."""

__version__ = "0.1.0"
