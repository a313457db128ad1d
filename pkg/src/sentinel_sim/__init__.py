"""Proactive anomaly-aware live-stream scheduling on a synthetic cloud-edge platform."""

__version__ = "0.1.0"
