"""Labeled output series shared by the scenario layer and the CLI."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["ProfileBlock", "TimeSeries"]


@dataclass
class ProfileBlock:
    """One spatial profile: quantity columns over cell centers at a time."""

    time: float
    x: np.ndarray
    values: np.ndarray           # (n_cells, n_quantities)
    labels: list[str]


@dataclass
class TimeSeries:
    """Outlet history plus any recorded profiles and solver counters."""

    times: np.ndarray
    outlet: np.ndarray           # (n_times, n_quantities)
    labels: list[str]
    profiles: list[ProfileBlock] = field(default_factory=list)
    stats: list = field(default_factory=list)
