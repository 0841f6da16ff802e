"""a2pvis: profile a table, generate and gate charts, score insights, write the report."""

__version__ = "0.1.0"
