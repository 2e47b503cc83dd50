"""Simulation of a three-dimensional photonic extreme learning machine for text classification."""

__version__ = "0.1.0"
