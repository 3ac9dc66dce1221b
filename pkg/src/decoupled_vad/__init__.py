"""Two independently trained anomaly-scoring streams with overlap-aware fused inference."""

__version__ = "0.1.0"
