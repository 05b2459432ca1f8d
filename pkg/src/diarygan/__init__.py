"""Differentially private GAN toolkit for activity-diary synthesis and auditing."""

__version__ = "0.1.0"
