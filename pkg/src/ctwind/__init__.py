"""Cross-temporal reconciliation of hierarchical wind-power forecasts."""

__version__ = "0.1.0"
