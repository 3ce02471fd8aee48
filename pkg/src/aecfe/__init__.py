"""Cross-domain autoencoder feature extraction for single-cell crops, with a random-forest probe."""

__version__ = "0.1.0"
