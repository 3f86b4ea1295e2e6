"""Monocular 3D detection under adversarial attack, with uncertainty-gated residual adversarial training."""

__version__ = "0.1.0"
