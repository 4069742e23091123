"""Headless multi-agent car-parking RL environment and training tools."""

__version__ = "0.1.0"
