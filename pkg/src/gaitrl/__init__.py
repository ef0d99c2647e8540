"""Planar-biped terrain locomotion with staged RL, adversarial gait styles,
and a mixture of latent residual experts."""

__version__ = "0.1.0"
