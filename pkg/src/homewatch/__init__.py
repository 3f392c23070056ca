"""Activity inference, anomaly detection and trend forecasting from smart-home sensor logs."""

__version__ = "0.1.0"
