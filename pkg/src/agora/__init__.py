"""Feature-based GPU pricing: revenue simulation and a metering pipeline."""

__version__ = "0.1.0"
