"""Continual binary detection engine with replay, distillation and rebalancing."""

__version__ = "0.1.0"
