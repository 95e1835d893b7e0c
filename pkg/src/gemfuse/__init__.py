"""Sensor-aware multi-modal fusion for toy-scale 2D object detection."""

__version__ = "0.1.0"
