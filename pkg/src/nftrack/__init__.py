"""Pilot-free near-field beam tracking simulator."""

__version__ = "0.1.0"
