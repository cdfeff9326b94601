"""Rigid-motion estimation for multi-shot MRI by test-time training of motion parameters."""
__version__ = "0.1.0"
