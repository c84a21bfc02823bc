"""Numerical laboratory for the Kähler-Ricci flow on flat complex tori."""

__version__ = "0.1.0"
