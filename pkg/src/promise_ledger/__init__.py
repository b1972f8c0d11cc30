"""Promised-utility mechanisms for repeated allocation without money."""

__version__ = "0.1.0"
