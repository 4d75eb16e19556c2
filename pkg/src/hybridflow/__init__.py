"""Hybrid spiking/analog optical-flow networks trained with BPTT on event-camera data."""

__version__ = "0.1.0"
