"""KL-penalised Cox regression integrating external risk scores with internal survival data."""

__version__ = "0.1.0"

