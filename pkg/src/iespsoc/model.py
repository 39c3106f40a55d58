"""Improved extended single-particle (IESP) battery model.

The plant carries five dynamic states::

    s       normalized charge throughput (integral of I / Q_eff)
    dx_sp   surface-minus-average stoichiometry, positive particle
    dx_sn   surface-minus-average stoichiometry, negative particle
    dc1     electrolyte concentration deviation, positive side (mol/m^3)
    dc2     electrolyte concentration deviation, negative side (mol/m^3)

and is discretized with forward Euler. Positive current is discharge.
The terminal voltage is the open-circuit voltage of the two electrode
surfaces minus the concentration, activation and ohmic over-potentials.

The same functions serve as the synthetic ground-truth plant and as the
observer's internal predictor.
"""

from __future__ import annotations

import bisect
import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import ConfigurationError, DomainError, SaturationError

AS_PER_MAH = 3.6
RATE_FLOOR = 0.05
TAU_SN_BREAKS = (1.5, 2.5)
VOLTAGE_SANITY_BAND = (1.5, 5.0)

# parameter-file key -> ModelParams attribute
_FILE_KEYS = {
    "D_n": "D_n",
    "D_p": "D_p",
    "F": "F",
    "P_act": "P_act",
    "P_con_a": "P_con_a",
    "P_con_b": "P_con_b",
    "Q_all": "Q_all",
    "R": "R_gas",
    "R_ohm": "R_ohm",
    "T": "T",
    "t_plus": "t_plus",
    "c0": "c0",
    "tau_e": "tau_e",
    "tau_sn_1": "tau_sn_1",
    "tau_sn_2": "tau_sn_2",
    "tau_sn_3": "tau_sn_3",
    "tau_sp": "tau_sp",
    "x_sn0": "x_sn0",
    "x_sp0": "x_sp0",
    "n": "peukert_n",
}


@dataclass(frozen=True)
class ModelParams:
    """Physical and empirical constants of the IESP model.

    ``Q_all`` is held in ampere-seconds; the parameter file and
    :attr:`Q_all_mAh` use milliampere-hours.
    """

    D_p: float = 0.7284
    D_n: float = 0.6533
    Q_all: float = 2894.1 * AS_PER_MAH
    R_ohm: float = 0.045
    P_act: float = 90424.0
    P_con_a: float = 150.0
    P_con_b: float = 60.0
    tau_e: float = 80.0
    tau_sp: float = 1.85
    tau_sn_1: float = 1.1
    tau_sn_2: float = 10.0
    tau_sn_3: float = 0.05
    x_sp0: float = 0.68
    x_sn0: float = 0.745
    peukert_n: float = 1.021
    T: float = 298.15
    t_plus: float = 0.363
    c0: float = 1000.0
    R_gas: float = 8.314
    F: float = 96485.3

    def __post_init__(self):
        taus = (self.tau_e, self.tau_sp, self.tau_sn_1, self.tau_sn_2, self.tau_sn_3)
        if min(taus) <= 0:
            raise ConfigurationError("time constants must be positive")
        if self.Q_all <= 0:
            raise ConfigurationError("Q_all must be positive")
        for name in ("D_p", "D_n"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must lie in (0, 1]")
        for name in ("x_sp0", "x_sn0", "t_plus"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigurationError(f"{name} must lie in (0, 1)")
        if self.peukert_n < 1.0:
            raise ConfigurationError("Peukert exponent must be >= 1")
        if self.c0 <= 0 or self.T <= 0:
            raise ConfigurationError("c0 and T must be positive")

    @property
    def Q_all_mAh(self) -> float:
        return self.Q_all / AS_PER_MAH

    @property
    def one_c_current(self) -> float:
        """Current (A) that drains ``Q_all`` in one hour."""
        return self.Q_all / 3600.0

    @property
    def thermal_voltage2(self) -> float:
        """2RT/F in volts."""
        return 2.0 * self.R_gas * self.T / self.F

    def c_rate(self, current: float) -> float:
        return abs(current) / self.one_c_current

    def to_table(self) -> dict:
        """Parameter-file mapping (file keys, Q_all in mAh)."""
        out = {}
        for key, attr in _FILE_KEYS.items():
            value = getattr(self, attr)
            out[key] = value / AS_PER_MAH if key == "Q_all" else value
        return out

    @classmethod
    def from_table(cls, table: dict) -> "ModelParams":
        unknown = set(table) - set(_FILE_KEYS)
        if unknown:
            raise ConfigurationError(f"unknown parameter keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in table.items():
            value = float(value)
            kwargs[_FILE_KEYS[key]] = value * AS_PER_MAH if key == "Q_all" else value
        return cls(**kwargs)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_table(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ModelParams":
        return cls.from_table(json.loads(Path(path).read_text(encoding="utf-8")))


DEFAULT_PARAMS = ModelParams()


class _MonotoneCurve:
    """Monotone piecewise-cubic interpolant with a cheap scalar call."""

    def __init__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.ndim != 1 or x.shape != y.shape or x.size < 2:
            raise ConfigurationError("OCP table needs two equal-length columns")
        if np.any(np.diff(x) <= 0):
            raise ConfigurationError("OCP stoichiometry column must be strictly increasing")
        self.x = x
        self.y = y
        self._pp = PchipInterpolator(x, y, extrapolate=False)
        self._breaks = x.tolist()
        self._coef = self._pp.c.T.tolist()
        self.lo = float(x[0])
        self.hi = float(x[-1])

    def __call__(self, value: float) -> float:
        if not self.lo <= value <= self.hi:
            raise DomainError(f"stoichiometry {value!r} outside curve support [{self.lo}, {self.hi}]")
        i = min(bisect.bisect_right(self._breaks, value) - 1, len(self._coef) - 1)
        c3, c2, c1, c0 = self._coef[i]
        h = value - self._breaks[i]
        return ((c3 * h + c2) * h + c1) * h + c0

    def evaluate(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if np.any(values < self.lo) or np.any(values > self.hi):
            raise DomainError("stoichiometry outside curve support")
        return self._pp(values)

    def derivative(self, value: float) -> float:
        return float(self._pp(value, 1))


def _read_table(path) -> tuple[list[float], list[float]]:
    xs, ys = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            if row:
                xs.append(float(row[0]))
                ys.append(float(row[1]))
    return xs, ys


class OcpCurves:
    """Open-circuit potential of each electrode versus its stoichiometry.

    ``U_p`` must be strictly decreasing, ``U_n`` weakly decreasing.
    """

    def __init__(self, positive, negative):
        self.U_p = _MonotoneCurve(*positive)
        self.U_n = _MonotoneCurve(*negative)
        if np.any(np.diff(self.U_p.y) >= 0):
            raise ConfigurationError("U_p must be strictly decreasing")
        if np.any(np.diff(self.U_n.y) > 0):
            raise ConfigurationError("U_n must be non-increasing")

    @classmethod
    def from_files(cls, positive_path, negative_path) -> "OcpCurves":
        return cls(_read_table(positive_path), _read_table(negative_path))

    @classmethod
    def default(cls) -> "OcpCurves":
        data = resources.files("iespsoc") / "data"
        with resources.as_file(data / "ocp_positive.csv") as pos, \
                resources.as_file(data / "ocp_negative.csv") as neg:
            return cls.from_files(pos, neg)

    def e_ocv(self, x_sp_surf: float, x_sn_surf: float) -> float:
        return self.U_p(x_sp_surf) - self.U_n(x_sn_surf)


_DEFAULT_CURVES = None


def default_curves() -> OcpCurves:
    global _DEFAULT_CURVES
    if _DEFAULT_CURVES is None:
        _DEFAULT_CURVES = OcpCurves.default()
    return _DEFAULT_CURVES


@dataclass(frozen=True)
class ModelState:
    s: float = 0.0
    dx_sp: float = 0.0
    dx_sn: float = 0.0
    dc1: float = 0.0
    dc2: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.dx_sp, self.dx_sn, self.dc1, self.dc2])

    @classmethod
    def from_array(cls, values) -> "ModelState":
        s, dx_sp, dx_sn, dc1, dc2 = (float(v) for v in values)
        return cls(s, dx_sp, dx_sn, dc1, dc2)

    def stoichiometries(self, params: ModelParams) -> dict:
        x_sp_avg = params.x_sp0 + params.D_p * self.s
        x_sn_avg = params.x_sn0 - params.D_n * self.s
        return {
            "x_sp_avg": x_sp_avg,
            "x_sn_avg": x_sn_avg,
            "x_sp_surf": x_sp_avg + self.dx_sp,
            "x_sn_surf": x_sn_avg + self.dx_sn,
        }


@dataclass(frozen=True)
class VoltageBreakdown:
    e_ocv: float
    eta_con: float
    eta_act: float
    eta_ohm: float
    u_terminal: float
    out_of_band: bool = False


def effective_capacity(params: ModelParams, c_rate_now: float) -> float:
    """Peukert-corrected capacity in A·s (reference rate 1C)."""
    if c_rate_now <= 0:
        raise DomainError(f"C-rate must be positive, got {c_rate_now!r}")
    rate = max(c_rate_now, RATE_FLOOR)
    return params.Q_all * rate ** (1.0 - params.peukert_n)


def select_tau_sn(params: ModelParams, c_rate_now: float) -> float:
    if c_rate_now < TAU_SN_BREAKS[0]:
        return params.tau_sn_1
    if c_rate_now < TAU_SN_BREAKS[1]:
        return params.tau_sn_2
    return params.tau_sn_3


def capacity_for_current(params: ModelParams, current: float) -> float:
    """Effective capacity for an applied current; rest uses the rate floor."""
    return effective_capacity(params, max(params.c_rate(current), RATE_FLOOR))


def step(state: ModelState, params: ModelParams, current: float, dt: float) -> ModelState:
    """Advance the plant one forward-Euler step of length ``dt``."""
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    rate = params.c_rate(current)
    q_eff = capacity_for_current(params, current)
    tau_sn = select_tau_sn(params, rate)
    new = ModelState(
        s=state.s + dt * current / q_eff,
        dx_sp=state.dx_sp + dt / params.tau_sp * (12.0 / 7.0 * params.D_p / q_eff * current - state.dx_sp),
        dx_sn=state.dx_sn + dt / tau_sn * (12.0 / 7.0 * params.D_n / q_eff * current - state.dx_sn),
        dc1=state.dc1 + dt / params.tau_e * (params.P_con_a * current - state.dc1),
        dc2=state.dc2 + dt / params.tau_e * (params.P_con_b * current - state.dc2),
    )
    check_state(new, params)
    return new


def check_state(state: ModelState, params: ModelParams) -> None:
    """Raise :class:`SaturationError` if a stoichiometry leaves (0, 1)."""
    for name, value in state.stoichiometries(params).items():
        if not 0.0 < value < 1.0:
            raise SaturationError(name, value)


def eta_ohm(params: ModelParams, current: float) -> float:
    return params.R_ohm * current


def eta_con(params: ModelParams, state: ModelState) -> float:
    pos = params.c0 + state.dc1
    neg = params.c0 - state.dc2
    if pos <= 0:
        raise DomainError(f"electrolyte deviation dc1={state.dc1!r} drives concentration non-positive")
    if neg <= 0:
        raise DomainError(f"electrolyte deviation dc2={state.dc2!r} drives concentration non-positive")
    return params.thermal_voltage2 * (1.0 - params.t_plus) * math.log(pos / neg)


def _kinetic_m(d_i: float, q_eff: float, c0: float, x_surf: float, p_act: float, current: float) -> float:
    if not 0.0 < x_surf < 1.0:
        raise DomainError(f"surface stoichiometry {x_surf!r} outside (0, 1)")
    return d_i / (6.0 * q_eff * math.sqrt(c0)) * math.sqrt((1.0 - x_surf) * x_surf) * p_act * current


def eta_act(params: ModelParams, state: ModelState, current: float, q_eff: float | None = None) -> float:
    """Butler-Volmer reaction over-potential; ``q_eff`` defaults to the Peukert capacity."""
    if q_eff is None:
        q_eff = capacity_for_current(params, current)
    x = state.stoichiometries(params)
    m_p = _kinetic_m(params.D_p, q_eff, params.c0, x["x_sp_surf"], params.P_act, current)
    m_n = _kinetic_m(params.D_n, q_eff, params.c0, x["x_sn_surf"], params.P_act, current)
    return params.thermal_voltage2 * (math.asinh(m_n) + math.asinh(m_p))


def terminal_voltage(state: ModelState, params: ModelParams, curves: OcpCurves, current: float) -> VoltageBreakdown:
    x = state.stoichiometries(params)
    e_ocv = curves.e_ocv(x["x_sp_surf"], x["x_sn_surf"])
    con = eta_con(params, state)
    act = eta_act(params, state, current)
    ohm = eta_ohm(params, current)
    u = e_ocv - con - act - ohm
    lo, hi = VOLTAGE_SANITY_BAND
    out_of_band = not lo <= u <= hi
    if out_of_band:
        warnings.warn(f"terminal voltage {u:.3f} V outside sanity band", RuntimeWarning, stacklevel=2)
    return VoltageBreakdown(e_ocv, con, act, ohm, u, out_of_band)


def soc_of_state(state: ModelState, params: ModelParams, soc0: float = 1.0) -> float:
    """SOC from the throughput state, clamped to [0, 1].

    The normalized throughput ``s`` is one full capacity per unit, so SOC is
    ``soc0 - s``; :func:`soc_of_state_flagged` also reports clamping.
    """
    return soc_of_state_flagged(state, params, soc0)[0]


def soc_of_state_flagged(state: ModelState, params: ModelParams, soc0: float = 1.0) -> tuple[float, bool]:
    soc = soc0 - state.s
    if soc < 0.0:
        return 0.0, True
    if soc > 1.0:
        return 1.0, True
    return soc, False


def state_for_soc(soc: float, soc0: float = 1.0) -> ModelState:
    """Rested state (all deviations zero) at the given SOC."""
    return ModelState(s=soc0 - soc)


def with_params(params: ModelParams, **changes) -> ModelParams:
    return replace(params, **changes)


def param_names() -> list[str]:
    return [f.name for f in fields(ModelParams)]


def params_dict(params: ModelParams) -> dict:
    return asdict(params)
