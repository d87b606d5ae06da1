"""Network digital twin: LiDAR occupancy mapping, radio-map ray tracing, TA base-station
localization and radio-aware path planning."""

__version__ = "0.1.0"
