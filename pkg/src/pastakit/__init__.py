"""Special-token adaptation for a frozen numpy Transformer encoder."""

__version__ = "0.1.0"
