"""Adversarially learnt interpolants (ALI) and their marginalisation by
conditional flow matching for multi-marginal trajectory inference."""

__version__ = "0.1.0"
