"""Output-feedback synthesis and Monte Carlo verification for irregular LQG problems."""

__version__ = "0.1.0"
