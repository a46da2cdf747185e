"""Blind denoising of multivariate sensor series with a contrastively regularised GRU autoencoder."""

__version__ = "0.1.0"
