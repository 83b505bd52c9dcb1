"""Deterministic synthetic series: sinusoids + linear trend + seeded noise.

Stands in for benchmark datasets at desk scale; written in the exact input
format the data module parses (header row, ISO-8601 timestamps).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from .config import SynthConfig


@dataclass
class SineComponent:
    amplitude: float
    period: float  # in rows
    phase: float = 0.0


@dataclass
class SyntheticSpec:
    rows: int
    variables: int
    components: list[SineComponent] = field(default_factory=list)
    trend: float = 0.0        # added value per row
    noise: float = 0.0        # Gaussian sigma
    seed: int = 0
    start: str = "2024-01-01 00:00:00"
    step_hours: int = 1
    phase_shift_per_variable: float = 0.0


def generate_values(spec: SyntheticSpec) -> np.ndarray:
    """(rows, variables) float64 matrix of the configured process."""
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.rows, dtype=np.float64)
    out = np.zeros((spec.rows, spec.variables))
    for var in range(spec.variables):
        series = spec.trend * t
        shift = spec.phase_shift_per_variable * var
        for comp in spec.components:
            series = series + comp.amplitude * np.sin(
                2.0 * np.pi * t / comp.period + comp.phase + shift)
        if spec.noise > 0:
            series = series + rng.normal(0.0, spec.noise, size=spec.rows)
        out[:, var] = series
    return out


def write_series(path, spec: SyntheticSpec) -> None:
    """Generate and write the series in the standard input format."""
    values = generate_values(spec)
    start = datetime.fromisoformat(spec.start)
    step = timedelta(hours=spec.step_hours)
    names = [f"var{i}" for i in range(spec.variables)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("date," + ",".join(names) + "\n")
        for row in range(spec.rows):
            stamp = (start + row * step).isoformat(sep=" ")
            cells = ",".join(f"{values[row, col]:.6f}" for col in range(spec.variables))
            fh.write(f"{stamp},{cells}\n")


def make_synthetic(path, cfg: SynthConfig) -> SyntheticSpec:
    """Build the default one-sinusoid spec from config and write it."""
    spec = SyntheticSpec(
        rows=cfg.rows,
        variables=cfg.variables,
        components=[SineComponent(cfg.amplitude, cfg.period)] if cfg.amplitude else [],
        trend=cfg.trend,
        noise=cfg.noise,
        seed=cfg.seed,
        start=cfg.start,
        phase_shift_per_variable=0.7,
    )
    write_series(path, spec)
    return spec
