"""Search a grammar of matrix operations for cheaper equivalent expressions."""

__version__ = "0.1.0"
