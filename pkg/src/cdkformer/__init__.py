"""Long-tail trajectory prediction with deviation features and dual future queries."""

__version__ = "0.1.0"
