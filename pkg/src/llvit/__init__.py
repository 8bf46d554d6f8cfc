"""ViT with LUT-network channel mixers: training, integer inference, cost and latency models."""

__version__ = "0.1.0"
