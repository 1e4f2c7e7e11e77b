"""Cluster-aware water demand forecasting for district metered areas."""

__version__ = "0.1.0"
