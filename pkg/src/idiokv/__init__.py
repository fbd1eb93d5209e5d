"""idiokv - KV-cache compression for grouped-query attention, driven by retrieval heads."""

__version__ = "0.1.0"
