"""Multi-modal probe-scanning skill learning in a synthetic phantom."""

__version__ = "0.1.0"
