"""Rehearsal-free domain-incremental face anti-spoofing at desk scale."""
__version__ = "0.1.0"
