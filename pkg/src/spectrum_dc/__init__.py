"""Unsupervised feature learning for spectrogram tiles: PCA baseline and alternating CNN/K-means training."""

__version__ = "0.1.0"
