"""Dual sliding-mode observer with a Lyapunov-derived adaptive dead zone.

A state SMO tracks the five model states from the terminal-voltage residual;
a parameter SMO adapts ``theta = [D_p, D_n, Q_all(mAh), x_sp0, x_sn0]``.
The adaptive variant only lets the parameter SMO run while the residual is
inside a bound computed from a discrete Lyapunov function of the observer.

Switching directions: the plant state is not measured, so the switching
signal is built from the voltage residual. Each state (or parameter) is
pushed along the sign of its voltage sensitivity, which is fixed by the
model structure (``U_p`` decreasing, ``U_n`` non-increasing, I > 0 is
discharge). Gains are therefore magnitudes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from . import model
from .errors import ConfigurationError, DomainError
from .model import ModelParams, ModelState, OcpCurves

# sign of d(terminal voltage)/d(state) for s, dx_sp, dx_sn, dc1, dc2
STATE_OUTPUT_SIGNS = np.array([-1.0, -1.0, 1.0, -1.0, -1.0])
# sign of d(terminal voltage)/d(theta) for D_p, D_n, Q_all, x_sp0, x_sn0
THETA_OUTPUT_SIGNS = np.array([-1.0, -1.0, 1.0, -1.0, 1.0])
THETA_NAMES = ("D_p", "D_n", "Q_all", "x_sp0", "x_sn0")

EPS_INTEGRATOR = 1.3e-11
FIXED_DEAD_ZONE = (0.0, 0.001)
STOICH_MARGIN = 1e-4
# residuals this small are floating-point round-off, not model mismatch
SIGN_ZERO_TOL = 1e-12


class Variant(str, Enum):
    STATE_ONLY = "state-only"
    PLAIN_DUAL = "plain-dual"
    FIXED_DZ = "fixed-dz"
    ADAPTIVE_DZ = "adaptive-dz"

    @classmethod
    def parse(cls, name) -> "Variant":
        if isinstance(name, cls):
            return name
        aliases = {"adaptive": cls.ADAPTIVE_DZ, "fixed": cls.FIXED_DZ,
                   "plain": cls.PLAIN_DUAL, "dual": cls.PLAIN_DUAL, "smo": cls.STATE_ONLY}
        try:
            return aliases.get(name) or cls(name)
        except ValueError:
            raise ConfigurationError(f"unknown observer variant {name!r}") from None


@dataclass(frozen=True)
class StateSpace:
    A: np.ndarray
    B: np.ndarray
    dt: float
    tau_sn: float
    q_eff: float

    def propagate(self, x: np.ndarray, current: float) -> np.ndarray:
        return self.A @ x + self.B * current


def build_state_space(params: ModelParams, dt: float, c_rate_now: float) -> StateSpace:
    """Diagonal A and input column B matching :func:`model.step` exactly."""
    tau_sn = model.select_tau_sn(params, c_rate_now)
    if dt <= 0 or dt >= min(params.tau_sp, tau_sn, params.tau_e):
        raise ConfigurationError(
            f"dt={dt} must be positive and below the smallest active time constant "
            f"({min(params.tau_sp, tau_sn, params.tau_e)} s)"
        )
    q_eff = model.effective_capacity(params, max(c_rate_now, model.RATE_FLOOR))
    A = np.diag([1.0, 1.0 - dt / params.tau_sp, 1.0 - dt / tau_sn,
                 1.0 - dt / params.tau_e, 1.0 - dt / params.tau_e])
    B = np.array([
        dt / q_eff,
        12.0 * params.D_p * dt / (7.0 * q_eff * params.tau_sp),
        12.0 * params.D_n * dt / (7.0 * q_eff * tau_sn),
        dt * params.P_con_a / params.tau_e,
        dt * params.P_con_b / params.tau_e,
    ])
    return StateSpace(A, B, dt, tau_sn, q_eff)


@dataclass(frozen=True)
class ObserverGains:
    K: np.ndarray
    L: np.ndarray
    K_theta: np.ndarray
    L_theta: np.ndarray

    def __post_init__(self):
        for name in ("K", "L", "K_theta", "L_theta"):
            value = np.asarray(getattr(self, name), dtype=float)
            if value.shape != (5,):
                raise ConfigurationError(f"gain {name} must have 5 entries")
            object.__setattr__(self, name, value)
        if np.any(self.K <= 0):
            raise ConfigurationError("sliding gain K must be strictly positive")
        if np.any(self.K_theta < 0):
            raise ConfigurationError("parameter sliding gain K_theta must be non-negative")

    @classmethod
    def default(cls) -> "ObserverGains":
        return cls(
            K=np.array([0.005, 2.5e-6, 2.5e-6, 0.25, 0.25]),
            L=np.array([0.002, 1e-6, 1e-6, 0.2, 0.2]),
            K_theta=np.array([0.0025, 0.0025, 2.5, 0.0025, 0.0025]) * 1e-3,
            # magnitudes only: direction comes from THETA_OUTPUT_SIGNS
            L_theta=np.array([0.0005, 0.0005, 0.5, 0.0005, 0.0005]),
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("K", "L", "K_theta", "L_theta")}

    @classmethod
    def from_dict(cls, data: dict) -> "ObserverGains":
        base = cls.default().to_dict()
        base.update(data)
        return cls(**{k: np.asarray(v, dtype=float) for k, v in base.items()})


@dataclass(frozen=True)
class GainCheck:
    ok: np.ndarray
    fail_lower: np.ndarray
    fail_upper: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(np.all(self.ok))


def check_gain_window(K, A, x_err_bound, dw: float) -> GainCheck:
    """Componentwise check of ``|(A + I) x_err| - dw >= K > dw``."""
    if dw < 0:
        raise ConfigurationError("disturbance bound must be non-negative")
    K = np.asarray(K, dtype=float)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    x_err = np.broadcast_to(np.asarray(x_err_bound, dtype=float), K.shape)
    upper = np.abs((A + np.eye(A.shape[0])) @ x_err) - dw
    fail_lower = K <= dw
    fail_upper = K > upper
    return GainCheck(~(fail_lower | fail_upper), fail_lower, fail_upper)


@dataclass(frozen=True)
class ThetaBox:
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def around(cls, params: ModelParams, rel: float = 0.2, q_range=(0.5, 1.1)) -> "ThetaBox":
        nominal = theta_of_params(params)
        lower = nominal * (1.0 - rel)
        upper = nominal * (1.0 + rel)
        lower[2] = nominal[2] * q_range[0]
        upper[2] = nominal[2] * q_range[1]
        upper[0] = min(upper[0], 1.0)
        upper[1] = min(upper[1], 1.0)
        upper[3] = min(upper[3], 1.0 - STOICH_MARGIN)
        upper[4] = min(upper[4], 1.0 - STOICH_MARGIN)
        return cls(lower, upper)

    def project(self, theta: np.ndarray) -> tuple[np.ndarray, bool]:
        clipped = np.minimum(np.maximum(theta, self.lower), self.upper)
        return clipped, bool(np.any(clipped != theta))


def theta_of_params(params: ModelParams) -> np.ndarray:
    return np.array([params.D_p, params.D_n, params.Q_all_mAh, params.x_sp0, params.x_sn0])


def params_with_theta(params: ModelParams, theta) -> ModelParams:
    d_p, d_n, q_mah, x_sp0, x_sn0 = (float(v) for v in theta)
    return replace(params, D_p=d_p, D_n=d_n, Q_all=q_mah * model.AS_PER_MAH, x_sp0=x_sp0, x_sn0=x_sn0)


@dataclass(frozen=True)
class LyapunovCache:
    P: np.ndarray
    lambda_m: float
    norm_IP: float
    norm_L: float
    A_s: np.ndarray


def lyapunov_prepare(A, L, eps_int: float = EPS_INTEGRATOR, rhs=None) -> LyapunovCache:
    """Solve ``A_s^T P A_s - P = -Q`` with the integrator pulled inside the unit circle.

    ``A`` may be a :class:`StateSpace`. ``Q`` defaults to the identity.
    """
    if isinstance(A, StateSpace):
        A = A.A
    A_s = np.array(np.atleast_2d(A), dtype=float)
    if A_s.shape[0] > 1 and A_s[0, 0] == 1.0:
        A_s[0, 0] = 1.0 - eps_int
    if np.max(np.abs(np.linalg.eigvals(A_s))) >= 1.0:
        raise ConfigurationError("stabilized A is not Schur-stable")
    n = A_s.shape[0]
    Q = np.eye(n) if rhs is None else np.asarray(rhs, dtype=float)
    P = solve_discrete_lyapunov(A_s.T, Q)
    P = 0.5 * (P + P.T)
    lambda_m = float(np.linalg.eigvalsh(P - A_s.T @ P @ A_s).min())
    if lambda_m <= 0:
        raise ConfigurationError("Lyapunov decrease matrix is not positive definite")
    norm_IP = float(np.linalg.norm(np.eye(n) + P, 2))
    norm_L = float(np.linalg.norm(np.asarray(L, dtype=float)))
    return LyapunovCache(P, lambda_m, norm_IP, norm_L, A_s)


def dead_zone_bound_from_norms(state_term: float, gain_term: float, norm_L: float,
                               lambda_m: float, norm_IP: float) -> float:
    """``(||x + A^-1 B i|| + ||A^-1 K||) / ||L|| * sqrt(lambda_m / ||I + P||)``."""
    if norm_L == 0:
        raise ConfigurationError("output-injection gain L must be non-zero")
    return (state_term + gain_term) / norm_L * math.sqrt(lambda_m / norm_IP)


def dead_zone_bound(x_hat, ss: StateSpace, gains: ObserverGains, cache: LyapunovCache,
                    current: float) -> float:
    a_diag = np.diag(ss.A)
    if np.any(a_diag == 0):
        raise ConfigurationError("A is singular; dead-zone bound undefined")
    x_hat = x_hat.as_array() if isinstance(x_hat, ModelState) else np.asarray(x_hat, dtype=float)
    state_term = float(np.linalg.norm(x_hat + ss.B * current / a_diag))
    gain_term = float(np.linalg.norm(gains.K / a_diag))
    return dead_zone_bound_from_norms(state_term, gain_term, cache.norm_L, cache.lambda_m, cache.norm_IP)


@dataclass
class EstimatorState:
    x_hat: np.ndarray
    theta_hat: np.ndarray
    bound: float = math.nan
    gate_open: bool = False
    e_y: float = 0.0
    y_hat: float = math.nan
    projected: bool = False

    def model_state(self) -> ModelState:
        return ModelState.from_array(self.x_hat)


def _sign(value: float) -> float:
    if value > SIGN_ZERO_TOL:
        return 1.0
    if value < -SIGN_ZERO_TOL:
        return -1.0
    return 0.0


@dataclass
class JointEstimator:
    """Static configuration and per-run caches for one estimator instance.

    The per-step value lives in :class:`EstimatorState`; this object keeps
    the nominal parameters, gains, variant and memoized matrices.
    """

    params: ModelParams
    curves: OcpCurves
    gains: ObserverGains = field(default_factory=ObserverGains.default)
    variant: Variant = Variant.ADAPTIVE_DZ
    dt: float = 1.0
    fixed_dead_zone: tuple[float, float] = FIXED_DEAD_ZONE
    eps_int: float = EPS_INTEGRATOR
    box: ThetaBox | None = None
    soc0: float = 1.0

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        if self.box is None:
            self.box = ThetaBox.around(self.params)
        self.projection_events = 0
        self._predictor_theta = None
        self._predictor = self.params
        self._predictor_version = 0
        self._prop_key = None
        self._prop = None
        self._a_cache = {}
        self._lyap_cache = {}
        self._k_signed = STATE_OUTPUT_SIGNS * self.gains.K
        self._l_signed = STATE_OUTPUT_SIGNS * self.gains.L
        self._kt_signed = THETA_OUTPUT_SIGNS * self.gains.K_theta
        self._lt_signed = THETA_OUTPUT_SIGNS * self.gains.L_theta

    def initial_state(self, soc: float, theta=None) -> EstimatorState:
        theta = theta_of_params(self.params) if theta is None else np.asarray(theta, dtype=float)
        x = model.state_for_soc(soc, self.soc0).as_array()
        projected = self._project_state(x, self.predictor_params(theta))
        return EstimatorState(x_hat=x, theta_hat=theta.copy(), projected=projected)

    def predictor_params(self, theta: np.ndarray) -> ModelParams:
        key = theta.tobytes()
        if key != self._predictor_theta:
            self._predictor = params_with_theta(self.params, theta)
            self._predictor_theta = key
            self._predictor_version += 1
        return self._predictor

    def state_space(self, params: ModelParams, current: float) -> StateSpace:
        return build_state_space(params, self.dt, params.c_rate(current))

    def _propagation(self, params: ModelParams, current: float):
        """Diagonal of A and the column B, reused while params and current repeat."""
        if params is not self._predictor:
            return self._build_propagation(params, current)
        key = (self._predictor_version, current)
        if key != self._prop_key:
            self._prop = self._build_propagation(params, current)
            self._prop_key = key
        return self._prop

    def _build_propagation(self, params: ModelParams, current: float):
        rate = params.c_rate(current)
        tau_sn = model.select_tau_sn(params, rate)
        dt = self.dt
        if dt >= min(params.tau_sp, tau_sn, params.tau_e):
            raise ConfigurationError(f"dt={dt} too large for active time constant {tau_sn} s")
        q_eff = model.effective_capacity(params, max(rate, model.RATE_FLOOR))
        key = (tau_sn, params.tau_sp, params.tau_e)
        a_diag = self._a_cache.get(key)
        if a_diag is None:
            a_diag = np.array([1.0, 1.0 - dt / params.tau_sp, 1.0 - dt / tau_sn,
                               1.0 - dt / params.tau_e, 1.0 - dt / params.tau_e])
            self._a_cache[key] = a_diag
        b = np.array([
            dt / q_eff,
            12.0 * params.D_p * dt / (7.0 * q_eff * params.tau_sp),
            12.0 * params.D_n * dt / (7.0 * q_eff * tau_sn),
            dt * params.P_con_a / params.tau_e,
            dt * params.P_con_b / params.tau_e,
        ])
        return a_diag, b, tau_sn

    def lyapunov(self, tau_sn: float, a_diag: np.ndarray) -> tuple[LyapunovCache, float, float]:
        """Cached Lyapunov data plus ``||A^-1 K||`` and the bound scale factor."""
        hit = self._lyap_cache.get(tau_sn)
        if hit is None:
            cache = lyapunov_prepare(np.diag(a_diag), self.gains.L, self.eps_int)
            if cache.norm_L == 0:
                raise ConfigurationError("output-injection gain L must be non-zero")
            gain_term = float(np.linalg.norm(self.gains.K / a_diag))
            scale = math.sqrt(cache.lambda_m / cache.norm_IP) / cache.norm_L
            hit = (cache, gain_term, scale)
            self._lyap_cache[tau_sn] = hit
        return hit

    def predict_voltage(self, x: np.ndarray, params: ModelParams, current: float) -> float:
        return _fast_voltage(x, params, self.curves, current)

    def _project_state(self, x: np.ndarray, params: ModelParams) -> bool:
        lo_p = self.curves.U_p.lo + STOICH_MARGIN
        hi_p = min(self.curves.U_p.hi, 1.0) - STOICH_MARGIN
        lo_n = self.curves.U_n.lo + STOICH_MARGIN
        hi_n = min(self.curves.U_n.hi, 1.0) - STOICH_MARGIN
        s = x[0]
        s_max = min((hi_p - params.x_sp0 - x[1]) / params.D_p, (params.x_sn0 + x[2] - lo_n) / params.D_n)
        s_min = max((lo_p - params.x_sp0 - x[1]) / params.D_p, (params.x_sn0 + x[2] - hi_n) / params.D_n)
        changed = False
        if s > s_max:
            x[0] = s_max
            changed = True
        elif s < s_min:
            x[0] = s_min
            changed = True
        c0 = params.c0
        if x[3] <= -c0 * 0.99:
            x[3] = -c0 * 0.99
            changed = True
        if x[4] >= c0 * 0.99:
            x[4] = c0 * 0.99
            changed = True
        return changed

    def state_smo_step(self, est: EstimatorState, current: float, y_meas: float,
                       params: ModelParams | None = None, propagation=None) -> EstimatorState:
        """One output-injection SMO update of the state estimate."""
        if params is None:
            params = self.predictor_params(est.theta_hat)
        if propagation is None:
            propagation = self._propagation(params, current)
        elif isinstance(propagation, StateSpace):
            propagation = (np.diag(propagation.A).copy(), propagation.B, propagation.tau_sn)
        a_diag, b, _ = propagation
        y_hat = self.predict_voltage(est.x_hat, params, current)
        e_y = float(y_meas) - y_hat
        x = a_diag * est.x_hat + b * current + self._k_signed * _sign(e_y) + self._l_signed * e_y
        projected = self._project_state(x, params)
        return EstimatorState(x, est.theta_hat, est.bound, est.gate_open, e_y, y_hat, projected)

    def param_smo_step(self, est: EstimatorState, e_y: float) -> EstimatorState:
        """Parameter SMO update followed by projection onto the box."""
        theta = est.theta_hat + self._kt_signed * _sign(e_y) + self._lt_signed * e_y
        theta, clipped = self.box.project(theta)
        if clipped:
            self.projection_events += 1
        return replace(est, theta_hat=theta)

    def dead_zone_bound(self, x_hat: np.ndarray, current: float, propagation) -> float:
        a_diag, b, tau_sn = propagation
        _, gain_term, scale = self.lyapunov(tau_sn, a_diag)
        z = x_hat + b * current / a_diag
        return (math.sqrt(float(np.dot(z, z))) + gain_term) * scale

    def joint_step(self, est: EstimatorState, current: float, y_meas: float) -> EstimatorState:
        """State SMO first, then (variant permitting) the parameter SMO."""
        params = self.predictor_params(est.theta_hat)
        propagation = self._propagation(params, current)
        new = self.state_smo_step(est, current, y_meas, params, propagation)
        variant = self.variant
        if variant is Variant.STATE_ONLY:
            new.gate_open = False
            return new
        e_post = float(y_meas) - self.predict_voltage(new.x_hat, params, current)
        new.e_y = e_post
        if variant is Variant.PLAIN_DUAL:
            gate = True
        elif variant is Variant.FIXED_DZ:
            lo, hi = self.fixed_dead_zone
            gate = lo < abs(e_post) < hi
        else:
            new.bound = self.dead_zone_bound(new.x_hat, current, propagation)
            gate = abs(e_post) < new.bound
        new.gate_open = gate
        if gate:
            new = self.param_smo_step(new, e_post)
        return new

    def soc(self, est: EstimatorState) -> float:
        return self.soc0 - float(est.x_hat[0])


def joint_step(est: EstimatorState, estimator: JointEstimator, current: float, y_meas: float) -> EstimatorState:
    return estimator.joint_step(est, current, y_meas)


def _fast_voltage(x: np.ndarray, params: ModelParams, curves: OcpCurves, current: float) -> float:
    """Terminal voltage from a raw state vector (same formulas as :mod:`model`)."""
    s, dx_sp, dx_sn, dc1, dc2 = x.tolist()
    x_sp = params.x_sp0 + params.D_p * s + dx_sp
    x_sn = params.x_sn0 - params.D_n * s + dx_sn
    if not (0.0 < x_sp < 1.0 and 0.0 < x_sn < 1.0):
        raise DomainError(f"surface stoichiometry outside (0, 1): x_sp={x_sp!r}, x_sn={x_sn!r}")
    pos = params.c0 + dc1
    neg = params.c0 - dc2
    if pos <= 0 or neg <= 0:
        raise DomainError("electrolyte concentration non-positive")
    q_eff = model.capacity_for_current(params, current)
    vt2 = params.thermal_voltage2
    scale = params.P_act * current / (6.0 * q_eff * math.sqrt(params.c0))
    m_p = params.D_p * scale * math.sqrt((1.0 - x_sp) * x_sp)
    m_n = params.D_n * scale * math.sqrt((1.0 - x_sn) * x_sn)
    return (curves.U_p(x_sp) - curves.U_n(x_sn)
            - vt2 * (1.0 - params.t_plus) * math.log(pos / neg)
            - vt2 * (math.asinh(m_n) + math.asinh(m_p))
            - params.R_ohm * current)
