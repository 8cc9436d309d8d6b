"""Desk-scale vision-language pipeline for knee osteoarthritis severity."""

__version__ = "0.1.0"
