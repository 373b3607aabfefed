"""Binary gaze-series compression and competing regression models."""
__version__ = "0.1.0"
