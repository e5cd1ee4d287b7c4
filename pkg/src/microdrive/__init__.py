"""Desk-scale vision-language-action driving pipeline on a synthetic micro-world."""

__version__ = "0.1.0"
