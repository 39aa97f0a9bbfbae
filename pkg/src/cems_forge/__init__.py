"""Design and evaluation toolkit for curved electromagnetic skins on vehicles."""

__version__ = "0.1.0"
