"""Imaginative visual agent: flow-warped VAE that imagines scenes from glimpses
and fixates where its imagined hypotheses disagree most."""

__version__ = "0.1.0"
