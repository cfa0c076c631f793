"""Crowd-sourced spectrum measurement sandbox.

A simulated fleet of pocket-sized SDR sensors, the mobile gateways that
carry them, and the command-and-control server that tasks them, plus the
DSP and geolocation tooling used to turn uploaded captures into answers.
"""

__version__ = "0.1.0"
