"""Latent-dynamics editing toolkit: conditional diffusion on state vectors,
DDIM inversion, contrastive embedding, trajectory traversal operators, kNN
lifting, and the experiment harness tying them together."""

__version__ = "0.1.0"
