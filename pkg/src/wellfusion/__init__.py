"""Closed-loop simulation of an intelligent layered water-injection well.

Steady and dynamic well models, PID/MPC/cascade/fusion controllers, fusion
weight analysis and wave-code telemetry scoring.
"""

__version__ = "0.1.0"
