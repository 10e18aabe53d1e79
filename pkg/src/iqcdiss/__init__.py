"""Robust invariant-ellipsoid analysis of uncertain linear systems with dynamic
multipliers: state-space tools, LMI assembly, a dense SDP solver, Riccati
factorizations, exact hold simulation and a command-line front end."""

__version__ = "0.1.0"
