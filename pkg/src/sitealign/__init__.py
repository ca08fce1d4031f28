"""Model-assisted photo-to-building-model registration workbench."""

__version__ = "0.1.0"
