"""Bidirectional adversarial synthesis of geometrically matched image pairs."""

__version__ = "0.1.0"
