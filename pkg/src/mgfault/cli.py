"""Command-line front end: synthesize filters, run scenarios, Monte Carlo.

Configuration is a flat-key YAML file (every key a dotted path, every value
a scalar or list), so configs stay diff-friendly and trivially parseable
from any language.  Outputs are plain CSV.  Exit codes: 0 success,
2 config error, 3 infeasible synthesis, 4 runtime or numerical failure.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from .dae import (InfeasibleError, NumericalError, build_dae, dump_stacked_csv,
                  feasibility_check, stack_matrices)
from .model import InfeasibleSplitError, MicrogridParams, StateVector, split_disturbance
from .simulate import (DisturbanceSpec, Scenario, UncertaintySpec,
                       appendix_fluctuation, build_discrete_pair,
                       generate_disturbance_instances,
                       generate_uncertainty_instances, perfect_setting_models,
                       simulate_scenario)
from .synthesis import (DEFAULT_DELTA, Denominator, SignatureMatrix, Threshold,
                        average_signature, calibration_threshold,
                        compute_threshold, detectability_check,
                        load_filter_artifact, save_filter_artifact, solve_analytic,
                        solve_qp)
from .detect import Detector, batch_residual, run_detection


class ConfigError(ValueError):
    """Bad or inconsistent configuration input."""


DEFAULT_CONFIG = {
    # plant and controller constants
    "params.omega": 314.1,
    "params.L_f": 3.5e-3,
    "params.R_f": 0.01,
    "params.C_f": 21.9e-6,
    "params.L_c": 1.3e-3,
    "params.R_c": 0.02,
    "params.R_L": 12.0,
    "params.K_P_c": 0.3,
    "params.K_I_c": 20.0,
    "params.K_P_v": 2.0,
    "params.K_I_v": 14.0,
    "params.F": 0.75,
    "params.v_o_ref": [381.0, 0.0],
    "params.tau_dq": [35.0, 0.7],
    "params.Ts": 1e-4,
    # benchmark scenario: load step after 15000 samples, fault at 40000
    "scenario.total_steps": 60000,
    "scenario.fault_step": 40000,
    "scenario.seed": 7,
    "scenario.warm_start": False,
    # published benchmark initial state; the i_lq entry is extreme on
    # purpose and can be overridden (or bypassed via warm_start)
    "scenario.initial_state": [0.13, 0.0, 0.0115, 0.0, 11.4, -5.5e3,
                               380.8, 0.0, 11.4, 0.4],
    "scenario.disturbance.kind": "step",
    "scenario.disturbance.step_value": [-15.0, 0.1],
    "scenario.disturbance.step_onset": 15001,
    "scenario.disturbance.bounds_low": [-20.0, 0.05],
    "scenario.disturbance.bounds_high": [-10.0, 0.15],
    "scenario.uncertainty.enabled": True,
    "scenario.uncertainty.param_perturbation": 0.05,
    "scenario.uncertainty.noise_std": 0.02,
    # filter synthesis
    "synthesis.d_N": 10,
    "synthesis.denominator_pole": 0.0,
    "synthesis.ridge": 1e-6,
    "synthesis.delta": DEFAULT_DELTA,
    "synthesis.lambda": 5.0,
    "synthesis.m": 100,
    "synthesis.T": 200,
    "synthesis.decoupled_col": 0,
    "synthesis.eval_window": 1,
    "synthesis.seed": 123,
    # fully decoupled benchmark variant
    "perfect.total_steps": 4000,
    "perfect.fault_step": 3001,
    "perfect.onset": 1001,
    "perfect.alpha0": 0.8,
    "perfect.amplitudes": [0.02, 0.01, 0.01],
    "perfect.calibration_margin": 2.0,
    # Monte Carlo defaults
    "mc.total_steps": 3000,
    "mc.disturbance_onset": 500,
    "mc.burn_in": 1500,
    "mc.seed": 2024,
    # output
    "io.out_dir": "out",
    "io.pu_current_base": None,
}


def parse_config(path=None) -> dict:
    """Merge a flat-key YAML file over the defaults."""
    cfg = dict(DEFAULT_CONFIG)
    if path is None:
        return cfg
    try:
        loaded = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if loaded is None:
        return cfg
    if not isinstance(loaded, dict):
        raise ConfigError(f"{path}: expected a mapping of flat keys")
    unknown = set(loaded) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    cfg.update(loaded)
    return cfg


def serialize_config(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        lines.append(yaml.safe_dump({key: cfg[key]}, default_flow_style=True,
                                    width=10 ** 6).strip())
    return "\n".join(lines) + "\n"


def config_params(cfg: dict) -> MicrogridParams:
    try:
        return MicrogridParams.from_dict(
            {k.split(".", 1)[1]: v for k, v in cfg.items()
             if k.startswith("params.")})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_uncertainty(cfg: dict) -> UncertaintySpec | None:
    if not cfg["scenario.uncertainty.enabled"]:
        return None
    return UncertaintySpec(
        param_perturbation=float(cfg["scenario.uncertainty.param_perturbation"]),
        noise_std=float(cfg["scenario.uncertainty.noise_std"]))


def config_disturbance(cfg: dict) -> DisturbanceSpec:
    kind = cfg["scenario.disturbance.kind"]
    if kind not in ("none", "step", "sinusoid"):
        raise ConfigError(f"unknown disturbance kind {kind!r}")
    return DisturbanceSpec(
        kind=kind,
        step_value=tuple(cfg["scenario.disturbance.step_value"]),
        step_onset=int(cfg["scenario.disturbance.step_onset"]),
        bounds=(tuple(cfg["scenario.disturbance.bounds_low"]),
                tuple(cfg["scenario.disturbance.bounds_high"])))


def config_scenario(cfg: dict, no_fault: bool = False, perfect: bool = False,
                    seed: int | None = None) -> Scenario:
    if perfect:
        disturbance = appendix_fluctuation(
            alpha0=float(cfg["perfect.alpha0"]),
            amplitudes=tuple(cfg["perfect.amplitudes"]),
            onset=int(cfg["perfect.onset"]))
        return Scenario(
            total_steps=int(cfg["perfect.total_steps"]),
            fault_step=None if no_fault else int(cfg["perfect.fault_step"]),
            disturbance=disturbance, uncertainty=None,
            warm_start=True,
            seed=int(cfg["scenario.seed"] if seed is None else seed))
    init = cfg["scenario.initial_state"]
    try:
        return Scenario(
            total_steps=int(cfg["scenario.total_steps"]),
            fault_step=None if no_fault else int(cfg["scenario.fault_step"]),
            disturbance=config_disturbance(cfg),
            uncertainty=config_uncertainty(cfg),
            initial_state=None if init is None else StateVector.from_array(init),
            warm_start=bool(cfg["scenario.warm_start"]),
            seed=int(cfg["scenario.seed"] if seed is None else seed))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_denominator(cfg: dict) -> Denominator:
    d_N = int(cfg["synthesis.d_N"])
    pole = float(cfg["synthesis.denominator_pole"])
    return Denominator.single_pole(d_N + 1, pole)


def _check_bounds(cfg: dict):
    lows = np.asarray(cfg["scenario.disturbance.bounds_low"], dtype=float)
    highs = np.asarray(cfg["scenario.disturbance.bounds_high"], dtype=float)
    if lows.shape != highs.shape or np.any(highs < lows):
        raise ConfigError("disturbance bounds must satisfy lows <= highs")
    return lows, highs


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except (InfeasibleError, InfeasibleSplitError) as exc:
            click.echo(f"infeasible synthesis: {exc}", err=True)
            sys.exit(3)
        except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(4)
    return wrapper


@click.group()
def main():
    """Ground-fault detection toolkit for an inverter-based microgrid."""


def _build_problem(cfg, perfect):
    """Models, split and stacks for the chosen mode (no training data)."""
    params = config_params(cfg)
    d_N = int(cfg["synthesis.d_N"])
    if perfect:
        disc0, split = perfect_setting_models(params)
        B_d_cont = np.zeros((10, 1))
        B_d_cont[8, 0] = B_d_cont[9, 0] = 1.0
        _, disc1 = build_discrete_pair(params, B_d=B_d_cont)
    else:
        B_d_cont = None
        disc0, disc1 = build_discrete_pair(params)
        try:
            split = split_disturbance(
                disc0.B_d, decoupled_cols=(int(cfg["synthesis.decoupled_col"]),))
        except ValueError as exc:
            if isinstance(exc, InfeasibleSplitError):
                raise
            raise ConfigError(str(exc)) from exc
    system = build_dae(disc0, disc1, split)
    stacked = stack_matrices(system, d_N)
    return params, system, stacked, disc1, B_d_cont


def _synthesis_inputs(cfg, perfect):
    """Problem matrices plus trained signature matrices."""
    params, system, stacked, disc1, B_d_cont = _build_problem(cfg, perfect)
    denom = config_denominator(cfg)
    T = int(cfg["synthesis.T"])
    if perfect:
        sig = SignatureMatrix.zeros(stacked.n_rows, T, denom)
        return params, system, stacked, sig, disc1, B_d_cont

    lows, highs = _check_bounds(cfg)
    check_cols = [j for j in range(2)
                  if j != int(cfg["synthesis.decoupled_col"])]
    seed_xi, seed_d = (int(s) for s in np.random.SeedSequence(
        int(cfg["synthesis.seed"])).generate_state(2, np.uint64))
    uspec = config_uncertainty(cfg) or UncertaintySpec()
    m = int(cfg["synthesis.m"])
    excitation = DisturbanceSpec(kind="step", step_onset=0,
                                 bounds=(tuple(lows), tuple(highs)))
    instances_xi = generate_uncertainty_instances(
        params, uspec, m, T, excitation=excitation, seed=seed_xi)
    instances_d = generate_disturbance_instances(
        m, T, (lows[check_cols], highs[check_cols]), seed=seed_d)
    sig = average_signature(stacked, denom, instances_xi, instances_d)
    return params, system, stacked, sig, disc1, B_d_cont


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="Flat-key YAML config; defaults reproduce "
                                 "the benchmark scenario.")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Output directory (default from config io.out_dir).")
@click.option("--seed", type=int, default=None, help="Override synthesis.seed.")
@click.option("--perfect", is_flag=True,
              help="Fully decoupled variant: single unit-gain disturbance "
                   "column, zero signature matrices, threshold calibrated "
                   "from a fault-free rehearsal run.")
@click.option("--analytic", "analytic_delta", is_flag=False,
              flag_value=str(DEFAULT_DELTA), default=None,
              help="Use the closed-form solution, optionally with DELTA.")
@click.option("--lambda", "lam", type=float, default=None,
              help="Override synthesis.lambda for the threshold.")
@_guarded
def synthesize(config_path, out_dir, seed, perfect, analytic_delta, lam):
    """Design a detection filter and write the filter artifact plus report."""
    cfg = parse_config(config_path)
    if seed is not None:
        cfg["synthesis.seed"] = seed
    if lam is not None:
        cfg["synthesis.lambda"] = lam
    out = Path(out_dir or cfg["io.out_dir"])
    out.mkdir(parents=True, exist_ok=True)

    params, system, stacked, sig, disc1, B_d_cont = _synthesis_inputs(cfg, perfect)
    report = feasibility_check(stacked)
    if not (report.equality_feasible and report.sensitivity_possible):
        click.echo(str(report), err=True)
        raise InfeasibleError(str(report))

    ridge = float(cfg["synthesis.ridge"])
    if analytic_delta is not None:
        delta = float(analytic_delta)
        coeffs = solve_analytic(stacked, sig, delta=delta, ridge=ridge / delta)
    else:
        coeffs = solve_qp(stacked, sig, epsilon=ridge)

    T = int(cfg["synthesis.T"])
    lam_value = float(cfg["synthesis.lambda"])
    sig_quad = float(coeffs.N_bar @ sig.total() @ coeffs.N_bar)
    if perfect:
        scenario = config_scenario(cfg, no_fault=True, perfect=True)
        rehearsal = simulate_scenario(params, scenario, B_d=B_d_cont)
        J = batch_residual(coeffs.rows() @ system.L0, coeffs.denominator,
                           rehearsal.detector_input()) ** 2
        margin = float(cfg["perfect.calibration_margin"])
        j_th = calibration_threshold(J[int(cfg["perfect.onset"]):], margin)
        threshold = Threshold(J_th=j_th, lam=margin, T=T)
        threshold_how = f"calibrated: {margin} * max fault-free J"
    else:
        threshold = compute_threshold(coeffs, sig, lam_value, T)
        threshold_how = f"markov: (lambda/T) * signature quadratic, lambda={lam_value}"

    u_fault = params.reference_input(fault=True)
    verdict = detectability_check(coeffs, system, disc1, u_fault, threshold.J_th)

    artifact = out / "filter.json"
    save_filter_artifact(
        artifact, coeffs, system.L0, threshold,
        meta={"mode": "perfect" if perfect else "partial",
              "signature_quadratic": sig_quad,
              "eval_window": int(cfg["synthesis.eval_window"]),
              "threshold_rule": threshold_how,
              "instances": sig.m,
              "seed": int(cfg["synthesis.seed"]),
              "perfect_B_d": None if B_d_cont is None else B_d_cont.tolist()})

    lines = [
        f"mode: {'perfect' if perfect else 'partial'}",
        f"solver: {'analytic delta=%g' % coeffs.delta if coeffs.delta else 'qp'}",
        f"ridge: {coeffs.ridge:g}",
        str(report),
        f"objective: {coeffs.objective_value:.9g}",
        f"constraint_residual: {coeffs.constraint_residual:.3e}",
        f"active_direction: index {coeffs.active_direction[0]}, "
        f"sign {coeffs.active_direction[1]}",
        f"threshold: J_th = {threshold.J_th:.9g} ({threshold_how})",
        f"detectability: steady residual {verdict.steady_residual:.6g}, "
        f"margin {verdict.margin:.6g}, "
        f"{'detectable' if verdict.detectable else 'NOT detectable'}"
        f"{' (marginal)' if verdict.marginal else ''}",
        f"artifact: {artifact}",
    ]
    (out / "synthesis_report.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        click.echo(line)


def _write_trace_csv(path, trace, pu_base=None):
    scale = 1.0 if not pu_base else float(pu_base)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "t", "i_od", "i_oq", "i_od_tilde", "i_oq_tilde",
                         "d1", "d2", "f", "r", "J", "J_th", "alarm"])
        n_d = trace.d.shape[1]
        for i in range(len(trace)):
            writer.writerow([
                int(trace.k[i]), repr(float(trace.t[i])),
                repr(float(trace.y[i, 0] / scale)), repr(float(trace.y[i, 1] / scale)),
                repr(float(trace.y_tilde[i, 0] / scale)),
                repr(float(trace.y_tilde[i, 1] / scale)),
                repr(float(trace.d[i, 0])),
                repr(float(trace.d[i, 1])) if n_d > 1 else repr(0.0),
                int(trace.f[i]),
                repr(float(trace.r[i])), repr(float(trace.J[i])),
                repr(float(trace.J_th)), int(trace.alarm[i])])


def _write_events_csv(path, events):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "kind", "J"])
        for event in events:
            writer.writerow([event.k, event.kind, repr(float(event.J_value))])


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--filter", "filter_path", type=click.Path(exists=True),
              required=True, help="Filter artifact from 'synthesize'.")
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None, help="Override scenario.seed.")
@click.option("--no-fault", is_flag=True, help="Run the scenario without the fault.")
@_guarded
def run(config_path, filter_path, out_dir, seed, no_fault):
    """Simulate the configured scenario and stream it through the detector."""
    cfg = parse_config(config_path)
    out = Path(out_dir or cfg["io.out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    coeffs, L0, threshold, meta = load_filter_artifact(filter_path)
    perfect = meta.get("mode") == "perfect"
    B_d = None if meta.get("perfect_B_d") is None \
        else np.asarray(meta["perfect_B_d"], dtype=float)

    params = config_params(cfg)
    scenario = config_scenario(cfg, no_fault=no_fault, perfect=perfect, seed=seed)
    trace = simulate_scenario(params, scenario, B_d=B_d)
    det = Detector.from_filter(coeffs, L0, threshold,
                               eval_window=int(meta.get("eval_window", 1)))
    annotated, events = run_detection(trace, det)

    _write_trace_csv(out / "trace.csv", annotated,
                     pu_base=cfg["io.pu_current_base"])
    _write_events_csv(out / "events.csv", events)
    delay = annotated.meta.get("detection_delay")
    click.echo(f"samples: {len(annotated)}, alarms raised: "
               f"{sum(1 for e in events if e.kind == 'raised')}")
    if scenario.fault_step is not None:
        click.echo(f"fault at k={scenario.fault_step}, detection delay: "
                   f"{'none' if delay is None else delay} samples")
    click.echo(f"wrote {out / 'trace.csv'} and {out / 'events.csv'}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--filter", "filter_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--trials", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=None, help="Override mc.seed.")
@click.option("--lambda", "lam", type=float, default=None,
              help="Sweep only this lambda instead of {2, 5, 10}.")
@_guarded
def montecarlo(config_path, filter_path, out_dir, trials, seed, lam):
    """Fault-free Monte Carlo study of the steady false-alarm rate."""
    if trials < 1:
        raise ConfigError("trials must be at least 1")
    cfg = parse_config(config_path)
    out = Path(out_dir or cfg["io.out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    coeffs, L0, _, meta = load_filter_artifact(filter_path)
    sig_quad = meta.get("signature_quadratic")
    if sig_quad is None:
        raise ConfigError("artifact lacks the signature quadratic needed "
                          "for a lambda sweep")
    params = config_params(cfg)
    uspec = config_uncertainty(cfg) or UncertaintySpec()
    lows, highs = _check_bounds(cfg)
    burn_in = int(cfg["mc.burn_in"])
    total = int(cfg["mc.total_steps"])
    onset = int(cfg["mc.disturbance_onset"])
    if burn_in >= total:
        raise ConfigError("mc.burn_in must be smaller than mc.total_steps")

    master = int(cfg["mc.seed"] if seed is None else seed)
    children = np.random.SeedSequence(master).spawn(trials)
    taps = coeffs.rows() @ L0
    pooled = []
    for i in range(trials):
        rng = np.random.default_rng(children[i])
        value = tuple(rng.uniform(lows, highs))
        scenario = Scenario(
            total_steps=total, fault_step=None,
            disturbance=DisturbanceSpec(kind="step", step_value=value,
                                        step_onset=onset),
            uncertainty=dataclasses.replace(uspec, seed=int(rng.integers(2 ** 32))),
            warm_start=True, seed=int(rng.integers(2 ** 32)))
        trace = simulate_scenario(params, scenario)
        J = batch_residual(taps, coeffs.denominator, trace.detector_input()) ** 2
        pooled.append(J[burn_in:])
    pooled = np.concatenate(pooled)

    T = int(cfg["synthesis.T"])
    sweep = (lam,) if lam is not None else (2.0, 5.0, 10.0)
    rows = []
    for l_value in sweep:
        j_th = (l_value / T) * float(sig_quad)
        rate = float((pooled > j_th).mean())
        bound = 1.0 / l_value
        slack = 3.0 * np.sqrt(bound * (1.0 - bound) / pooled.size)
        rows.append([l_value, j_th, pooled.size, int((pooled > j_th).sum()),
                     rate, bound, slack, int(rate <= bound + slack)])
    path = out / "montecarlo.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "J_th", "samples", "exceedances", "rate",
                         "markov_bound", "slack_3sigma", "within_bound"])
        for row in rows:
            writer.writerow([repr(float(row[0])), repr(float(row[1])), row[2],
                             row[3], repr(float(row[4])), repr(float(row[5])),
                             repr(float(row[6])), row[7]])
    for row in rows:
        click.echo(f"lambda={row[0]:g}: rate={row[4]:.4f} vs bound {row[5]:.3f} "
                   f"(+{row[6]:.4f} slack) -> "
                   f"{'OK' if row[7] else 'EXCEEDED'}")
    click.echo(f"wrote {path}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--perfect", is_flag=True)
@_guarded
def inspect(config_path, out_dir, perfect):
    """Dump the stacked synthesis matrices and the feasibility report."""
    cfg = parse_config(config_path)
    out = Path(out_dir or cfg["io.out_dir"]) / "stacked"
    _, _, stacked, _, _ = _build_problem(cfg, perfect)
    report = feasibility_check(stacked)
    files = dump_stacked_csv(stacked, out)
    click.echo(str(report))
    out.mkdir(parents=True, exist_ok=True)
    (out / "feasibility.txt").write_text(str(report) + "\n")
    click.echo(f"wrote {len(files)} matrices to {out}")


if __name__ == "__main__":
    main()
