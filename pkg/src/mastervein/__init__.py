"""Toolkit for synthesizing and evaluating master-vein attacks on finger-vein
recognition systems: a handcrafted maximum-curvature matcher, a small
gradient-capable CNN matcher, latent-variable evolution, a masked/filtered
top-k adversarial attack, and a false-acceptance-rate evaluation harness."""

__version__ = "0.1.0"
