"""Chemotherapy-response quantification from multi-slide pathology cases."""

__version__ = "0.1.0"
