"""Flexible trajectory-tracking MPC with a fictitious reference clock and safe terminal sets."""

__version__ = "0.1.0"
