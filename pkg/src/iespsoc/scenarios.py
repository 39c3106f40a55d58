"""Closed-loop experiments: synthetic plant, noisy sensors, one observer variant.

Ground truth comes from running the model with (possibly aged) parameters;
the observer always starts from the nominal parameter set.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model
from .errors import ConfigurationError, DomainError, SaturationError
from .model import ModelParams, OcpCurves
from .observer import (EPS_INTEGRATOR, FIXED_DEAD_ZONE, JointEstimator, ObserverGains,
                       Variant, theta_of_params)
from .profiles import CurrentProfile, NoiseSpec, add_noise, constant_current, ingest_csv, synthetic_dynamic

CONVERGENCE_THRESHOLD = 0.01

LOG_COLUMNS = (
    "t_s", "current_a", "y_meas_v", "y_hat_v", "e_y_v", "bound_v", "gate_open",
    "soc_true", "soc_est", "D_p", "D_n", "Q_all_mAh", "x_sp0", "x_sn0",
)


@dataclass(frozen=True)
class AgingSpec:
    cycles: float = 0.0
    capacity_fade_per_100: float = 0.02
    resistance_growth_per_100: float = 0.05
    stoich_shift_per_100: float = 0.002

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigurationError(f"aging field {name} must be non-negative")


def age_params(base: ModelParams, spec: AgingSpec) -> ModelParams:
    """Linear drift per hundred cycles: capacity fade, ohmic growth, x_sn0 loss."""
    hundreds = spec.cycles / 100.0
    fade = 1.0 - spec.capacity_fade_per_100 * hundreds
    if fade <= 0:
        raise ConfigurationError("capacity fade consumes the whole capacity")
    try:
        return replace(
            base,
            Q_all=base.Q_all * fade,
            R_ohm=base.R_ohm * (1.0 + spec.resistance_growth_per_100 * hundreds),
            x_sn0=base.x_sn0 - spec.stoich_shift_per_100 * hundreds,
        )
    except ConfigurationError as exc:
        raise ConfigurationError(f"aged parameters invalid: {exc}") from exc


@dataclass(frozen=True)
class ProfileSpec:
    """How to obtain the current trace: ``constant``, ``dynamic`` or ``csv``."""

    kind: str = "constant"
    c_rate: float = 1.0
    seed: int = 0
    envelope: tuple[float, float] = (-2.0, 2.0)
    path: str | None = None
    cutoff_v: float = 2.5

    def __post_init__(self):
        if self.kind not in ("constant", "dynamic", "csv"):
            raise ConfigurationError(f"unknown profile kind {self.kind!r}")
        if self.kind == "csv" and not self.path:
            raise ConfigurationError("csv profile needs a path")
        object.__setattr__(self, "envelope", tuple(float(v) for v in self.envelope))

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "ProfileSpec":
        """``1c``, ``0.5C``, ``dynamic``/``udds`` or a CSV path."""
        low = text.strip().lower()
        if low in ("dynamic", "udds", "udds-like"):
            return cls(kind="dynamic", seed=seed)
        if low.endswith("c"):
            try:
                return cls(kind="constant", c_rate=float(low[:-1]))
            except ValueError:
                pass
        if low.endswith(".csv"):
            return cls(kind="csv", path=text)
        raise ConfigurationError(f"unrecognised profile {text!r}")

    def build(self, params: ModelParams, duration: float, dt: float) -> CurrentProfile:
        if self.kind == "constant":
            return constant_current(self.c_rate, params.Q_all, duration, dt)
        if self.kind == "dynamic":
            return synthetic_dynamic(duration, dt, self.seed, params.Q_all, self.envelope)
        prof = ingest_csv(self.path)
        if not prof.uniform:
            raise ConfigurationError("closed-loop runs need a uniformly sampled profile")
        return prof

    def label(self) -> str:
        if self.kind == "constant":
            return f"{self.c_rate:g}C"
        if self.kind == "dynamic":
            return "dynamic"
        return Path(self.path).stem


@dataclass(frozen=True)
class ScenarioConfig:
    profile: ProfileSpec = field(default_factory=ProfileSpec)
    variant: Variant = Variant.ADAPTIVE_DZ
    gains: ObserverGains = field(default_factory=ObserverGains.default)
    init_soc_error: float = 0.0
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(sigma_v=0.005, seed=1))
    aging: AgingSpec | None = None
    dt: float = 1.0
    duration: float = 1400.0
    soc_start: float = 1.0
    eps_int: float = EPS_INTEGRATOR
    fixed_dead_zone: tuple[float, float] = FIXED_DEAD_ZONE
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if not -0.5 <= self.init_soc_error <= 0.5:
            raise ConfigurationError("init_soc_error must lie in [-0.5, 0.5]")
        if not 0.0 < self.soc_start <= 1.0:
            raise ConfigurationError("soc_start must lie in (0, 1]")
        if self.dt <= 0 or self.duration <= 0:
            raise ConfigurationError("dt and duration must be positive")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "profile": {**asdict(self.profile), "envelope": list(self.profile.envelope)},
            "variant": self.variant.value,
            "gains": self.gains.to_dict(),
            "init_soc_error": self.init_soc_error,
            "noise": asdict(self.noise),
            "aging": None if self.aging is None else asdict(self.aging),
            "dt": self.dt,
            "duration": self.duration,
            "soc_start": self.soc_start,
            "eps_int": self.eps_int,
            "fixed_dead_zone": list(self.fixed_dead_zone),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {"name", "profile", "variant", "gains", "init_soc_error", "noise", "aging",
                 "dt", "duration", "soc_start", "eps_int", "fixed_dead_zone"}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown scenario keys: {sorted(unknown)}")
        kw = dict(data)
        try:
            if "profile" in kw:
                prof = kw["profile"]
                kw["profile"] = ProfileSpec.parse(prof) if isinstance(prof, str) else ProfileSpec(**prof)
            if "gains" in kw:
                kw["gains"] = ObserverGains.from_dict(kw["gains"])
            if "noise" in kw:
                kw["noise"] = NoiseSpec(**kw["noise"])
            if kw.get("aging") is not None:
                kw["aging"] = AgingSpec(**kw["aging"])
            if "fixed_dead_zone" in kw:
                kw["fixed_dead_zone"] = tuple(float(v) for v in kw["fixed_dead_zone"])
            return cls(**kw)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
        return cls.from_dict(data)


@dataclass
class PlantTrace:
    """Ground truth sampled at the start of each input interval."""

    profile: CurrentProfile
    states: np.ndarray
    voltage: np.ndarray
    soc: np.ndarray
    truncated: bool = False
    reason: str = ""

    def __len__(self) -> int:
        return self.voltage.size


def simulate_plant(params: ModelParams, curves: OcpCurves, profile: CurrentProfile,
                   soc_start: float = 1.0, cutoff_v: float | None = None) -> PlantTrace:
    """Run the model open loop. Sample k holds the state before input k and
    the terminal voltage under input k.

    Stops before the first sample below ``cutoff_v`` or on saturation.
    """
    state = model.state_for_soc(soc_start)
    dt = profile.dt_nominal
    currents = profile.current.tolist()
    states, volts = [], []
    truncated, reason = False, ""
    for k, current in enumerate(currents):
        try:
            v = model.terminal_voltage(state, params, curves, current).u_terminal
        except DomainError as exc:
            truncated, reason = True, f"step {k}: {exc}"
            break
        if cutoff_v is not None and v < cutoff_v:
            truncated, reason = True, f"cut-off {cutoff_v} V reached at step {k}"
            break
        states.append(state.as_array())
        volts.append(v)
        try:
            state = model.step(state, params, current, dt)
        except SaturationError as exc:
            exc.step = k
            truncated, reason = True, str(exc)
            break
    n = len(volts)
    states_arr = np.array(states).reshape(n, 5)
    return PlantTrace(profile.truncated(n), states_arr, np.array(volts),
                      soc_start - states_arr[:, 0], truncated, reason)


def soc_rmse(true_seq, est_seq) -> float:
    """RMS difference of two SOC sequences (fractions), in percent."""
    a = np.asarray(true_seq, dtype=float)
    b = np.asarray(est_seq, dtype=float)
    if a.shape != b.shape:
        raise ConfigurationError("sequences differ in length")
    if a.size == 0:
        raise ConfigurationError("empty sequence")
    return float(np.sqrt(np.mean((a - b) ** 2)) * 100.0)


def convergence_time(err_seq, dt: float, threshold: float = CONVERGENCE_THRESHOLD) -> float | None:
    """Start of the final run of samples with ``|err| < threshold``; None if the last sample fails."""
    err = np.abs(np.asarray(err_seq, dtype=float))
    if err.size == 0:
        return 0.0
    bad = np.flatnonzero(~(err < threshold))
    if bad.size == 0:
        return 0.0
    if bad[-1] == err.size - 1:
        return None
    return float((bad[-1] + 1) * dt)


@dataclass
class ScenarioLog:
    columns: tuple
    data: np.ndarray

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.columns.index(name)]

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        gate = self.columns.index("gate_open")
        for row in self.data.tolist():
            cells = [repr(v) for v in row]
            cells[gate] = str(int(row[gate]))
            writer.writerow(cells)
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv_text(), encoding="utf-8")


@dataclass
class RunResult:
    name: str
    variant: str
    condition: str
    soc_rmse: float
    max_abs_err: float
    convergence_time_s: float | None
    final_rmse: float
    wall_clock_ms: float
    gate_duty: float
    steps: int
    truncated: bool
    note: str
    projection_events: int
    log: ScenarioLog
    theta_final: list

    @property
    def converged(self) -> bool:
        return self.convergence_time_s is not None

    def summary(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "log"}
        return out

    def write(self, out_dir, stem: str | None = None) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.name or f"{self.condition}_{self.variant}".replace("/", "_")
        log_path = out / f"{stem}_log.csv"
        sum_path = out / f"{stem}_summary.json"
        self.log.write_csv(log_path)
        sum_path.write_text(json.dumps(self.summary(), indent=2) + "\n", encoding="utf-8")
        return log_path, sum_path


def run_estimator(estimator: JointEstimator, est, currents, voltages, t0: float = 0.0) -> list:
    """Feed measurements through ``estimator``; rows hold the pre-update SOC estimate.

    Each row: ``(y_hat, e_y, bound, gate, soc_est, *theta_after)``.
    """
    rows = []
    append = rows.append
    step = estimator.joint_step
    soc0 = estimator.soc0
    for k, (current, y) in enumerate(zip(currents, voltages)):
        soc_est = soc0 - est.x_hat[0]
        try:
            est = step(est, current, y)
        except DomainError as exc:
            raise DomainError(f"observer step {k}: {exc}") from exc
        th = est.theta_hat
        append((est.y_hat, est.e_y, est.bound, est.gate_open, soc_est, th[0], th[1], th[2], th[3], th[4]))
    return rows


def prepare_measurements(cfg: ScenarioConfig, params: ModelParams | None = None,
                         curves: OcpCurves | None = None):
    """Truth trace plus the noisy current/voltage the observer sees."""
    base = params or model.DEFAULT_PARAMS
    curves = curves or model.default_curves()
    truth = base if cfg.aging is None else age_params(base, cfg.aging)
    profile = cfg.profile.build(base, cfg.duration, cfg.dt)
    plant = simulate_plant(truth, curves, profile, cfg.soc_start, cfg.profile.cutoff_v)
    v_meas = add_noise(plant.voltage, cfg.noise, "v")
    i_meas = add_noise(plant.profile, cfg.noise, "i").current
    return plant, i_meas, v_meas


def run_scenario(cfg: ScenarioConfig, params: ModelParams | None = None,
                 curves: OcpCurves | None = None) -> RunResult:
    base = params or model.DEFAULT_PARAMS
    curves = curves or model.default_curves()
    plant, i_meas, v_meas = prepare_measurements(cfg, base, curves)
    n = len(plant)
    if n == 0:
        raise ConfigurationError(f"plant produced no samples ({plant.reason})")
    estimator = JointEstimator(base, curves, cfg.gains, cfg.variant, plant.profile.dt_nominal,
                               cfg.fixed_dead_zone, cfg.eps_int)
    est0 = estimator.initial_state(cfg.soc_start + cfg.init_soc_error, theta_of_params(base))
    currents = i_meas.tolist()
    voltages = v_meas.tolist()
    start = time.perf_counter()
    rows = run_estimator(estimator, est0, currents, voltages)
    wall_ms = (time.perf_counter() - start) * 1e3
    est = np.array(rows, dtype=float).reshape(n, 10)
    soc_true = plant.soc
    soc_est = est[:, 4]
    err = soc_est - soc_true
    gate = est[:, 3]
    data = np.column_stack([plant.profile.t, i_meas, v_meas, est[:, 0], est[:, 1], est[:, 2], gate,
                            soc_true, soc_est, est[:, 5:]])
    conv = convergence_time(err, plant.profile.dt_nominal)
    half = n // 2
    return RunResult(
        name=cfg.name,
        variant=cfg.variant.value,
        condition=cfg.profile.label() + ("" if cfg.aging is None else f"/{cfg.aging.cycles:g}cyc"),
        soc_rmse=soc_rmse(soc_true, soc_est),
        max_abs_err=float(np.max(np.abs(err)) * 100.0),
        convergence_time_s=conv,
        final_rmse=soc_rmse(soc_true[half:], soc_est[half:]),
        wall_clock_ms=wall_ms,
        gate_duty=float(np.mean(gate)),
        steps=n,
        truncated=plant.truncated,
        note=plant.reason,
        projection_events=estimator.projection_events,
        log=ScenarioLog(LOG_COLUMNS, data),
        theta_final=est[-1, 5:].tolist(),
    )


def study_configs(study: str, seed: int = 1) -> list[ScenarioConfig]:
    """Built-in scenario sets: ``correct-init``, ``init-error``, ``aging``."""
    dyn = ProfileSpec(kind="dynamic", seed=seed)
    one_c = ProfileSpec(kind="constant", c_rate=1.0)
    noise = NoiseSpec(sigma_v=0.005, seed=seed)
    if study in ("correct-init", "table3"):
        return [ScenarioConfig(profile=p, variant=v, noise=noise, name=f"{p.label()}_{v.value}")
                for p in (dyn, one_c) for v in (Variant.ADAPTIVE_DZ, Variant.PLAIN_DUAL)]
    if study in ("init-error", "table4"):
        return [ScenarioConfig(profile=p, variant=v, noise=noise, init_soc_error=-0.3,
                               name=f"{p.label()}_{v.value}_init30")
                for p in (dyn, one_c)
                for v in (Variant.STATE_ONLY, Variant.PLAIN_DUAL, Variant.ADAPTIVE_DZ)]
    if study in ("aging", "table6"):
        return [ScenarioConfig(profile=dyn, variant=v, noise=noise, aging=AgingSpec(cycles=c),
                               name=f"aged{c}_{v.value}")
                for c in (100, 400)
                for v in (Variant.PLAIN_DUAL, Variant.FIXED_DZ, Variant.ADAPTIVE_DZ)]
    raise ConfigurationError(f"unknown study {study!r}")
