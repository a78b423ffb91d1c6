"""Fixed-length SE(3)-equivariant latent autoencoder for 3D molecules."""

__version__ = "0.1.0"
