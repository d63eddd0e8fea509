"""Raman spectra to Gramian angular fields, a two-branch CNN, and history fusion."""
__version__ = "0.1.0"
