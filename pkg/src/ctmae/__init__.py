"""Masked-autoencoder pretraining and ILD classification on 3D chest CT."""

__version__ = "0.1.0"
