"""Current excitation profiles: constant current, synthetic drive cycle, CSV traces."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IngestionError

CSV_HEADER = ("t_s", "current_a", "voltage_v")


@dataclass(frozen=True)
class CurrentProfile:
    """Sampled current (A, positive = discharge) with optional measured voltage."""

    t: np.ndarray
    current: np.ndarray
    dt_nominal: float
    label: str = ""
    voltage: np.ndarray | None = None
    uniform: bool = True

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        current = np.asarray(self.current, dtype=float)
        if t.shape != current.shape or t.ndim != 1:
            raise ConfigurationError("time and current must be 1-D arrays of equal length")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ConfigurationError("profile time must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "current", current)
        if self.voltage is not None:
            voltage = np.asarray(self.voltage, dtype=float)
            if voltage.shape != t.shape:
                raise ConfigurationError("voltage column length mismatch")
            object.__setattr__(self, "voltage", voltage)

    def __len__(self) -> int:
        return self.t.size

    @property
    def samples(self) -> list[tuple[float, float]]:
        return list(zip(self.t.tolist(), self.current.tolist()))

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0]) + self.dt_nominal if len(self) else 0.0

    def charge(self) -> float:
        """Net charge (A·s) delivered by the zero-order-hold samples."""
        return float(np.sum(self.current) * self.dt_nominal)

    def trapezoid_charge(self) -> float:
        return float(np.trapezoid(self.current, self.t))

    def truncated(self, n: int) -> "CurrentProfile":
        volt = None if self.voltage is None else self.voltage[:n]
        return CurrentProfile(self.t[:n], self.current[:n], self.dt_nominal, self.label, volt, self.uniform)

    def with_voltage(self, voltage) -> "CurrentProfile":
        return CurrentProfile(self.t, self.current, self.dt_nominal, self.label, voltage, self.uniform)


def _grid(duration: float, dt: float) -> np.ndarray:
    if dt <= 0 or duration <= 0:
        raise ConfigurationError("duration and dt must be positive")
    n = int(round(duration / dt))
    return np.arange(n) * dt


def constant_current(c_rate: float, q_all: float, duration: float, dt: float = 1.0) -> CurrentProfile:
    """Constant discharge at ``c_rate`` of a cell with capacity ``q_all`` (A·s).

    Stopping at a voltage cut-off is left to the simulator
    (see :func:`iespsoc.scenarios.simulate_plant`).
    """
    if c_rate <= 0:
        raise ConfigurationError("C-rate must be positive")
    t = _grid(duration, dt)
    current = np.full(t.size, c_rate * q_all / 3600.0)
    return CurrentProfile(t, current, dt, f"{c_rate:g}C")


def synthetic_dynamic(duration: float, dt: float, seed: int, q_all: float,
                      envelope: tuple[float, float] = (-2.0, 2.0),
                      max_net_fraction: float = 0.8, min_net_fraction: float = 0.2) -> CurrentProfile:
    """Piecewise-constant drive-cycle stand-in.

    Pulses last 2-20 s; roughly two thirds are discharge, a fifth regenerative
    charge, the rest idle. ``envelope`` bounds the C-rate; the cumulative net
    discharge never exceeds ``max_net_fraction`` of ``q_all``.

    When the run is long enough to expect ``min_net_fraction`` of net
    discharge, draws falling short are rejected and redrawn from the same
    generator (at most 1000 attempts, then the last draw is returned).
    """
    lo, hi = envelope
    if lo > hi or lo < -3.0 or hi > 3.0:
        raise ConfigurationError("envelope must lie within [-3C, 3C]")
    t = _grid(duration, dt)
    one_c = q_all / 3600.0
    cap = max_net_fraction * q_all
    floor = min_net_fraction * q_all
    expected = (0.65 * max(hi, 0.0) * 0.575 + 0.2 * min(lo, 0.0) * 0.35) * one_c * t.size * dt
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        current, net = _pulse_train(rng, t.size, dt, lo, hi, one_c, cap)
        if expected < floor or net > floor:
            break
    return CurrentProfile(t, current, dt, f"dynamic(seed={seed})")


def _pulse_train(rng, n_steps, dt, lo, hi, one_c, cap):
    current = np.empty(n_steps)
    net = 0.0
    i = 0
    while i < n_steps:
        length = int(rng.integers(2, 21))
        kind = rng.random()
        if kind < 0.15:
            rate = 0.0
        elif kind < 0.35:
            rate = lo * rng.uniform(0.1, 0.6) if lo < 0 else 0.0
        else:
            rate = hi * rng.uniform(0.15, 1.0) if hi > 0 else 0.0
        n = min(length, n_steps - i)
        amps = rate * one_c
        if amps > 0 and net + amps * n * dt > cap:
            amps = 0.0
        current[i:i + n] = amps
        net += amps * n * dt
        i += n
    return current, net


def export_csv(profile: CurrentProfile, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(_to_csv_text(profile))


def _to_csv_text(profile: CurrentProfile) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    with_v = profile.voltage is not None
    writer.writerow(CSV_HEADER if with_v else CSV_HEADER[:2])
    for k in range(len(profile)):
        row = [repr(float(profile.t[k])), repr(float(profile.current[k]))]
        if with_v:
            row.append(repr(float(profile.voltage[k])))
        writer.writerow(row)
    return buf.getvalue()


def ingest_csv(path, column_map: dict | None = None, label: str | None = None) -> CurrentProfile:
    """Read ``t_s,current_a[,voltage_v]``; ``column_map`` renames source columns.

    Row numbers in errors count the header as row 1.
    """
    mapping = {"t_s": "t_s", "current_a": "current_a", "voltage_v": "voltage_v"}
    if column_map:
        mapping.update(column_map)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError("empty file", 1) from None
        try:
            i_t = header.index(mapping["t_s"])
            i_c = header.index(mapping["current_a"])
        except ValueError:
            raise IngestionError(f"header must contain {mapping['t_s']!r} and {mapping['current_a']!r}", 1) from None
        i_v = header.index(mapping["voltage_v"]) if mapping["voltage_v"] in header else None
        ts, cs, vs = [], [], []
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                t = float(row[i_t])
                c = float(row[i_c])
                v = float(row[i_v]) if i_v is not None else None
            except (ValueError, IndexError):
                raise IngestionError(f"unparsable row {row!r}", row_no) from None
            if not (math.isfinite(t) and math.isfinite(c) and (v is None or math.isfinite(v))):
                raise IngestionError("non-finite value", row_no)
            if ts and t <= ts[-1]:
                raise IngestionError(f"time {t!r} not after previous {ts[-1]!r}", row_no)
            ts.append(t)
            cs.append(c)
            if v is not None:
                vs.append(v)
    if not ts:
        raise IngestionError("no data rows")
    t = np.array(ts)
    steps = np.diff(t)
    dt = float(np.median(steps)) if steps.size else 1.0
    uniform = bool(steps.size == 0 or np.max(np.abs(steps - dt)) <= 1e-9)
    return CurrentProfile(t, np.array(cs), dt, label or Path(path).stem,
                          np.array(vs) if i_v is not None else None, uniform)


@dataclass(frozen=True)
class NoiseSpec:
    sigma_v: float = 0.0
    sigma_i: float = 0.0
    seed: int = 0
    shape: str = "gaussian"
    mixture_weight: float = 0.2

    def __post_init__(self):
        if self.sigma_v < 0 or self.sigma_i < 0:
            raise ConfigurationError("noise sigmas must be non-negative")
        if self.shape not in ("gaussian", "uniform-mixture"):
            raise ConfigurationError(f"unknown noise shape {self.shape!r}")


def _draws(rng: np.random.Generator, n: int, sigma: float, spec: NoiseSpec) -> np.ndarray:
    if sigma == 0:
        return np.zeros(n)
    if spec.shape == "gaussian":
        return sigma * rng.standard_normal(n)
    # uniform component with the same standard deviation as the Gaussian one
    gauss = rng.standard_normal(n)
    unif = rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), n)
    pick = rng.random(n) < spec.mixture_weight
    return sigma * np.where(pick, unif, gauss)


def add_noise(trace, spec: NoiseSpec, which: str = "v", stream: int = 0):
    """Noisy copy of a voltage array (``which='v'``) or a profile's current (``'i'``).

    ``stream`` separates independent sequences drawn from one seed.
    """
    rng = np.random.default_rng([spec.seed, stream, 0 if which == "v" else 1])
    if isinstance(trace, CurrentProfile):
        noisy = trace.current + _draws(rng, len(trace), spec.sigma_i if which == "i" else spec.sigma_v, spec)
        if which == "i":
            return CurrentProfile(trace.t, noisy, trace.dt_nominal, trace.label, trace.voltage, trace.uniform)
        if trace.voltage is None:
            raise ConfigurationError("profile has no voltage column")
        return trace.with_voltage(trace.voltage + _draws(rng, len(trace), spec.sigma_v, spec))
    arr = np.asarray(trace, dtype=float)
    sigma = spec.sigma_v if which == "v" else spec.sigma_i
    return arr + _draws(rng, arr.size, sigma, spec)
