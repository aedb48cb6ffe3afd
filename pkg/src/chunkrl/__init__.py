"""Multi-scale chunked critics with advantage-based chunk-size selection."""

__version__ = "0.1.0"
