"""Simulation, unmixing and scoring of closely-spaced infrared small targets."""

__version__ = "0.1.0"
