"""Simulation and analysis toolkit for mobility-aware hierarchical federated learning."""
from __future__ import annotations

__version__ = "0.1.0"
