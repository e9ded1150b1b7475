"""Graph-to-SMILES translation for reaction outcome and retrosynthesis tasks."""

__version__ = "0.1.0"
