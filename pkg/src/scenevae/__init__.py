"""VAE latent vectors as compact global scene descriptors, with PHOG and random baselines."""

__version__ = "0.1.0"
