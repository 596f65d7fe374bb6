"""Discrete-event simulator of an OPSquare optical DCN under SDN control."""

__version__ = "0.1.0"
