"""Survival-curve estimation fusing a historical efficacy trial with a bridging study."""
__version__ = "0.1.0"
