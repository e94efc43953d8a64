"""Neuro-symbolic diffusion anomaly detection with an RFF student for edge inference."""

__version__ = "0.1.0"
