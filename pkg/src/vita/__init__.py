"""Variational pretraining for weather-driven crop yield regression with asymmetric inputs."""

__version__ = "0.1.0"
