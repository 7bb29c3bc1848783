"""Handwritten word image synthesis with phase-aware token mixing and frequency-domain losses."""
__version__ = "0.1.0"
