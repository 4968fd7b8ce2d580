"""Quantum jump simulation with memory via a Markovian system-ancilla embedding."""

__version__ = "0.1.0"
