"""Batches, timing, parameter identification and the command-line front end."""

from __future__ import annotations

import argparse
import json
import math
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import model
from .errors import ConfigurationError, DomainError, IngestionError
from .model import ModelParams, OcpCurves
from .observer import JointEstimator, ObserverGains, ThetaBox, Variant
from .profiles import CurrentProfile, export_csv, ingest_csv
from .scenarios import ProfileSpec, ScenarioConfig, prepare_measurements, run_scenario

# ---------------------------------------------------------------- batches


@dataclass
class BatchResult:
    name: str
    results: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def table_rows(self) -> list[dict]:
        return [{"name": r.name, "condition": r.condition, "variant": r.variant,
                 "rmse_pct": r.soc_rmse, "max_err_pct": r.max_abs_err,
                 "convergence_s": r.convergence_time_s, "gate_duty": r.gate_duty}
                for r in self.results]

    def summary_text(self) -> str:
        header = f"{'condition':<16}{'algorithm':<14}{'RMSE/%':>9}{'max/%':>9}{'conv/s':>9}{'gate':>7}"
        lines = [f"# {self.name}", header]
        for row in self.table_rows():
            conv = "-" if row["convergence_s"] is None else f"{row['convergence_s']:.0f}"
            lines.append(f"{row['condition']:<16}{row['variant']:<14}{row['rmse_pct']:>9.3f}"
                         f"{row['max_err_pct']:>9.3f}{conv:>9}{row['gate_duty']:>7.2f}")
        for name, err in self.failures:
            lines.append(f"FAILED {name}: {err}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{self.name}_summary.txt").write_text(self.summary_text(), encoding="utf-8")
        payload = {"name": self.name, "rows": self.table_rows(),
                   "failures": [{"name": n, "error": e} for n, e in self.failures]}
        (out / f"{self.name}_summary.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        for r in self.results:
            r.write(out, f"{self.name}_{r.name}")


def _run_job(cfg: ScenarioConfig):
    try:
        return run_scenario(cfg), None
    except (ConfigurationError, DomainError, OSError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def load_batch(source) -> tuple[str, list[ScenarioConfig]]:
    """A batch file is ``{"name": ..., "scenarios": [scenario, ...]}``.

    ``source`` may also name a bundled preset (``table3``, ``table4``, ``table6``).
    """
    path = Path(source)
    if path.is_file():
        text = path.read_text(encoding="utf-8")
    else:
        preset = resources.files("iespsoc") / "data" / "batches" / f"{path.stem}.json"
        if not preset.is_file():
            raise ConfigurationError(f"no batch file or preset named {source!r}")
        text = preset.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{source}: {exc}") from exc
    defaults = data.get("defaults", {})
    configs = [ScenarioConfig.from_dict({**defaults, **item}) for item in data.get("scenarios", [])]
    return data.get("name", path.stem), configs


def run_batch(configs, name: str = "batch", workers: int = 1) -> BatchResult:
    """Run independent scenarios; a failing scenario is recorded and the batch continues."""
    configs = list(configs)
    if workers > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_job, configs))
    else:
        outcomes = [_run_job(c) for c in configs]
    batch = BatchResult(name)
    for cfg, (result, error) in zip(configs, outcomes):
        if error is None:
            batch.results.append(result)
        else:
            batch.failures.append((cfg.name, error))
    return batch


# ---------------------------------------------------------------- timing


@dataclass
class BenchReport:
    median_ms: dict
    all_ms: dict
    steps: int
    repetitions: int

    @property
    def steps_per_s(self) -> dict:
        return {v: self.steps / (ms / 1e3) for v, ms in self.median_ms.items()}

    @property
    def per_step_us(self) -> dict:
        return {v: ms * 1e3 / self.steps for v, ms in self.median_ms.items()}

    def ordering(self) -> list[str]:
        return sorted(self.median_ms, key=self.median_ms.get)

    def text(self) -> str:
        lines = [f"{'variant':<14}{'median ms':>11}{'us/step':>10}{'steps/s':>11}"]
        for v in self.ordering():
            lines.append(f"{v:<14}{self.median_ms[v]:>11.2f}{self.per_step_us[v]:>10.2f}"
                         f"{self.steps_per_s[v]:>11.0f}")
        lines.append(f"steps={self.steps} repetitions={self.repetitions}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"median_ms": self.median_ms, "all_ms": self.all_ms, "steps": self.steps,
                "repetitions": self.repetitions, "per_step_us": self.per_step_us}


def bench_variants(cfg: ScenarioConfig, variants=("state-only", "plain-dual", "adaptive-dz"),
                   repetitions: int = 5, params: ModelParams | None = None,
                   curves: OcpCurves | None = None) -> BenchReport:
    """Median estimator wall-clock per variant on one shared measurement trace.

    The plant run and noise draws happen once, outside the timed section.
    Within a repetition the variants advance in lock-step, one sample each in
    turn, and only the estimator update is timed, so every variant sees the
    same machine conditions.
    """
    if repetitions < 5:
        raise ConfigurationError("timing needs at least 5 repetitions")
    base = params or model.DEFAULT_PARAMS
    curves = curves or model.default_curves()
    plant, i_meas, v_meas = prepare_measurements(cfg, base, curves)
    samples = list(zip(i_meas.tolist(), v_meas.tolist()))
    variants = [Variant.parse(v) for v in variants]
    times = {v.value: [] for v in variants}
    clock = time.perf_counter
    for _ in range(repetitions):
        steppers, states = [], []
        for v in variants:
            estimator = JointEstimator(base, curves, cfg.gains, v, plant.profile.dt_nominal,
                                       cfg.fixed_dead_zone, cfg.eps_int)
            steppers.append(estimator.joint_step)
            states.append(estimator.initial_state(cfg.soc_start + cfg.init_soc_error))
        totals = [0.0] * len(variants)
        for current, y in samples:
            for j, step in enumerate(steppers):
                start = clock()
                states[j] = step(states[j], current, y)
                totals[j] += clock() - start
        for v, total in zip(variants, totals):
            times[v.value].append(total * 1e3)
    medians = {v: statistics.median(t) for v, t in times.items()}
    return BenchReport(medians, times, len(plant), repetitions)


# ---------------------------------------------------------------- identification


@dataclass
class FitReport:
    values: dict
    residual_rms: float
    iterations: int
    converged: bool
    params: ModelParams
    message: str = ""

    def to_dict(self) -> dict:
        return {"values": self.values, "residual_rms_v": self.residual_rms,
                "iterations": self.iterations, "converged": self.converged, "message": self.message}


_THETA_ATTRS = {"D_p": 0, "D_n": 1, "Q_all": 2, "x_sp0": 3, "x_sn0": 4}


def _file_key_to_attr(name: str) -> str:
    table = model._FILE_KEYS
    if name in table:
        return table[name]
    if name in table.values():
        return name
    raise ConfigurationError(f"unknown parameter {name!r}")


def fit_bounds(base: ModelParams, names) -> tuple[np.ndarray, np.ndarray]:
    """Theta-box bounds for adapted parameters, +/-50 % for the rest.

    Theta boxes are the hull of the boxes around ``base`` and around the
    nominal parameter set, so a guess off the nominal cell can still reach it.
    """
    boxes = (ThetaBox.around(base), ThetaBox.around(model.DEFAULT_PARAMS))
    lo, hi = [], []
    for name in names:
        if name in _THETA_ATTRS:
            i = _THETA_ATTRS[name]
            scale = model.AS_PER_MAH if name == "Q_all" else 1.0
            lo.append(min(b.lower[i] for b in boxes) * scale)
            hi.append(max(b.upper[i] for b in boxes) * scale)
        else:
            value = getattr(base, name)
            lo.append(value * 0.5)
            hi.append(value * 1.5)
    return np.array(lo), np.array(hi)


def simulate_voltage(params: ModelParams, curves: OcpCurves, currents, dt: float,
                     soc_start: float = 1.0) -> np.ndarray | None:
    """Open-loop terminal voltage; None if the run leaves the model domain."""
    state = model.state_for_soc(soc_start)
    out = np.empty(len(currents))
    last = len(currents) - 1
    try:
        for k, current in enumerate(currents):
            out[k] = model.terminal_voltage(state, params, curves, current).u_terminal
            if k < last:
                state = model.step(state, params, current, dt)
    except DomainError:
        return None
    return out


def levenberg_marquardt(residual, x0, lower, upper, max_iter: int = 50, tol: float = 1e-12,
                        rel_step: float = 1e-6):
    """Bounded damped Gauss-Newton with forward-difference Jacobian.

    ``residual(x)`` returns a vector or None (infeasible). Returns
    ``(x, r, iterations, converged, message)``.
    """
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    r = residual(x)
    if r is None:
        raise ConfigurationError("initial guess is outside the model domain")
    cost = float(r @ r)
    lam = 1e-3
    n = x.size
    for it in range(max_iter):
        rms = math.sqrt(cost / r.size)
        if rms < tol:
            return x, r, it, True, "residual below tolerance"
        J = np.empty((r.size, n))
        for j in range(n):
            h = rel_step * max(abs(x[j]), 1e-8)
            xp = x.copy()
            xp[j] = x[j] + h if x[j] + h <= upper[j] else x[j] - h
            rp = residual(xp)
            if rp is None:
                return x, r, it, False, "jacobian probe left the model domain"
            J[:, j] = (rp - r) / (xp[j] - x[j])
        g = J.T @ r
        H = J.T @ J
        diag = np.maximum(np.diag(H), 1e-30)
        accepted = False
        while lam < 1e16:
            try:
                delta = np.linalg.solve(H + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = np.clip(x + delta, lower, upper)
            r_new = residual(x_new)
            if r_new is not None:
                cost_new = float(r_new @ r_new)
                if cost_new < cost:
                    step_size = np.max(np.abs(x_new - x) / np.maximum(np.abs(x), 1e-30))
                    gain = cost - cost_new
                    x, r, cost = x_new, r_new, cost_new
                    lam = max(lam / 10.0, 1e-12)
                    accepted = True
                    if step_size < 1e-13 or gain <= 1e-15 * cost:
                        return x, r, it + 1, True, "step below tolerance"
                    break
            lam *= 10.0
        if not accepted:
            rms = math.sqrt(cost / r.size)
            return x, r, it + 1, rms < 1e-9, "no further decrease possible"
    return x, r, max_iter, False, "iteration limit reached"


def identify_params(profile: CurrentProfile, subset, guess: ModelParams | dict | None = None,
                    curves: OcpCurves | None = None, soc_start: float = 1.0,
                    max_iter: int = 50) -> FitReport:
    """Fit ``subset`` (parameter-file keys or attribute names) to the profile's voltage."""
    if profile.voltage is None:
        raise ConfigurationError("identification needs a measured voltage column")
    names = [_file_key_to_attr(n) for n in subset]
    if not names:
        raise ConfigurationError("parameter subset is empty")
    if isinstance(guess, dict):
        guess = ModelParams.from_table({**model.DEFAULT_PARAMS.to_table(), **guess})
    guess = guess or model.DEFAULT_PARAMS
    curves = curves or model.default_curves()
    scale = np.array([abs(getattr(guess, n)) or 1.0 for n in names])
    lower, upper = fit_bounds(guess, names)
    currents = profile.current.tolist()
    measured = profile.voltage

    def build(u):
        return replace(guess, **{n: float(v) for n, v in zip(names, u * scale)})

    def residual(u):
        try:
            params = build(u)
        except ConfigurationError:
            return None
        sim = simulate_voltage(params, curves, currents, profile.dt_nominal, soc_start)
        return None if sim is None else sim - measured

    u, r, iters, ok, msg = levenberg_marquardt(residual, np.ones(len(names)), lower / scale, upper / scale,
                                               max_iter=max_iter)
    fitted = build(u)
    values = {n: getattr(fitted, n) for n in names}
    if "Q_all" in values:
        values["Q_all"] = fitted.Q_all_mAh
    return FitReport(values, float(math.sqrt(np.mean(r * r))), iters, ok, fitted, msg)


# ---------------------------------------------------------------- CLI


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iespsoc", description="Electrochemical-model SOC estimation experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON scenario, batch or fit file")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, help="override the random seed")
    common.add_argument("--variant", help="state-only | plain-dual | fixed-dz | adaptive-dz")
    common.add_argument("--profile", help="1c, 0.5c, ..., dynamic, or a CSV path")
    common.add_argument("--params", help="parameter file (JSON, keys as written by export-defaults)")
    for name, text in (("simulate", "run the plant and write a t_s,current_a,voltage_v trace"),
                       ("estimate", "run one closed-loop scenario"),
                       ("batch", "run a batch of scenarios and write summary tables"),
                       ("bench", "time observer variants on one trace"),
                       ("fit", "identify parameters from a voltage trace"),
                       ("export-defaults", "write the default parameter file")):
        sub.add_parser(name, parents=[common], help=text)
    return parser


def _scenario_from_args(args) -> ScenarioConfig:
    cfg = ScenarioConfig.load(args.config) if args.config else ScenarioConfig()
    if args.profile:
        cfg = replace(cfg, profile=ProfileSpec.parse(args.profile, cfg.profile.seed))
    if args.variant:
        cfg = replace(cfg, variant=Variant.parse(args.variant))
    if args.seed is not None:
        cfg = replace(cfg, noise=replace(cfg.noise, seed=args.seed),
                      profile=replace(cfg.profile, seed=args.seed))
    return cfg


def _params_from_args(args) -> ModelParams:
    return ModelParams.load(args.params) if args.params else model.DEFAULT_PARAMS


def _cmd_simulate(args, out: Path) -> int:
    cfg = _scenario_from_args(args)
    plant, _, v_meas = prepare_measurements(cfg, _params_from_args(args))
    path = out / "simulated.csv"
    export_csv(plant.profile.with_voltage(v_meas), path)
    note = f" ({plant.reason})" if plant.truncated else ""
    print(f"wrote {len(plant)} samples to {path}{note}")
    return 0


def _cmd_estimate(args, out: Path) -> int:
    cfg = _scenario_from_args(args)
    result = run_scenario(cfg, _params_from_args(args))
    log_path, sum_path = result.write(out, cfg.name or None)
    print(json.dumps(result.summary(), indent=2))
    print(f"log: {log_path}\nsummary: {sum_path}")
    return 0


def _cmd_batch(args, out: Path) -> int:
    if not args.config:
        raise ConfigurationError("batch needs --config (file or preset: table3, table4, table6)")
    name, configs = load_batch(args.config)
    if args.seed is not None:
        configs = [replace(c, noise=replace(c.noise, seed=args.seed),
                           profile=replace(c.profile, seed=args.seed)) for c in configs]
    batch = run_batch(configs, name)
    batch.write(out)
    print(batch.summary_text(), end="")
    return 2 if batch.failures else 0


def _cmd_bench(args, out: Path) -> int:
    cfg = _scenario_from_args(args)
    variants = [args.variant] if args.variant else ["state-only", "plain-dual", "adaptive-dz"]
    report = bench_variants(cfg, variants, 5, _params_from_args(args))
    (out / "bench.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(report.text(), end="")
    return 0


def _cmd_fit(args, out: Path) -> int:
    spec = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    subset = spec.get("subset", ["R_ohm"])
    guess = spec.get("guess")
    soc_start = float(spec.get("soc_start", 1.0))
    if args.profile and args.profile.lower().endswith(".csv"):
        profile = ingest_csv(args.profile)
        if not profile.uniform:
            raise ConfigurationError("fit needs a uniformly sampled trace")
    else:
        cfg = _scenario_from_args(args)
        plant, _, v_meas = prepare_measurements(cfg, _params_from_args(args))
        profile = plant.profile.with_voltage(v_meas)
    report = identify_params(profile, subset, guess, soc_start=soc_start)
    (out / "fit.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(json.dumps(report.to_dict(), indent=2))
    return 0 if report.converged else 2


def _cmd_export_defaults(args, out: Path) -> int:
    path = out / "params.json"
    model.DEFAULT_PARAMS.save(path)
    (out / "gains.json").write_text(json.dumps(ObserverGains.default().to_dict(), indent=2) + "\n",
                                    encoding="utf-8")
    print(f"wrote {path}")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "estimate": _cmd_estimate,
    "batch": _cmd_batch,
    "bench": _cmd_bench,
    "fit": _cmd_fit,
    "export-defaults": _cmd_export_defaults,
}


def cli(argv=None) -> int:
    """Exit status: 0 success, 1 invalid input or configuration, 2 runtime failure."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](args, out)
    except (ConfigurationError, IngestionError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DomainError, OSError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())
