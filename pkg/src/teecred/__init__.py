"""Simulated TEE credential lifecycle management over mutually attested channels."""

__version__ = "0.1.0"
