"""Evolving continual learning: a population of cell-based architectures,
searched with a two-objective evolutionary algorithm, yields one trained
expert per task."""

__version__ = "0.1.0"
