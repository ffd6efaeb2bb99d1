"""Closed-loop scenario simulation and training-data generation.

Scenarios run the sampled microgrid model step by step with fault
injection, exogenous load-change disturbances and, optionally, a surrogate
"actual plant": a second model with randomly perturbed LCL parameters and
measurement noise running in lockstep under identical inputs.  The gap
between the plant output and the nominal model output stands in for the
modeling uncertainty seen by the detector in the field, and the same
mechanism generates the recorded uncertainty instances the synthesis
trains on.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .dae import NumericalError
from .model import (DEFAULT_INITIAL_STATE, DiscreteModel, DisturbanceSplit,
                    MicrogridParams, N_STATES, StateVector, discretize,
                    split_disturbance, steady_state, unified_model)

PERTURBED_FIELDS = ("R_f", "L_f", "C_f", "L_c", "R_c")


@dataclass(frozen=True)
class DisturbanceSpec:
    """Exogenous disturbance shape.

    kind "step": zero before step_onset, then the constant step_value
    (bounds give the uniform draw range when values are randomized).
    kind "sinusoid": zero before onset, then
    alpha0 + sum_i amp_i * sin(omega_i * k + phase_i); single channel only.
    """

    kind: str = "none"
    step_value: tuple = (0.0, 0.0)
    step_onset: int = 0
    bounds: tuple | None = None          # (lows, highs) per channel
    alpha0: float = 0.0
    terms: tuple = ()                    # (amplitude, omega, phase) triples
    onset: int = 0

    def sequence(self, n_steps: int, n_d: int) -> np.ndarray:
        d = np.zeros((n_steps, n_d))
        if self.kind == "none":
            return d
        if self.kind == "step":
            value = np.asarray(self.step_value, dtype=float)[:n_d]
            d[self.step_onset:, :] = value
            return d
        if self.kind == "sinusoid":
            if n_d != 1:
                raise ValueError(
                    "sinusoidal disturbances are defined for the single "
                    "fully decoupled channel only")
            k = np.arange(self.onset, n_steps)
            wave = np.full(k.shape, float(self.alpha0))
            for amp, om, phase in self.terms:
                wave += amp * np.sin(om * k + phase)
            d[self.onset:, 0] = wave
            return d
        raise ValueError(f"unknown disturbance kind {self.kind!r}")

    @staticmethod
    def none() -> "DisturbanceSpec":
        return DisturbanceSpec()


@dataclass(frozen=True)
class UncertaintySpec:
    """Surrogate plant: relative LCL parameter perturbation plus output noise."""

    param_perturbation: float = 0.05
    perturbed_fields: tuple = PERTURBED_FIELDS
    noise_std: float = 0.02
    seed: int | None = None


@dataclass(frozen=True)
class Scenario:
    total_steps: int
    fault_step: int | None = None
    disturbance: DisturbanceSpec = field(default_factory=DisturbanceSpec.none)
    uncertainty: UncertaintySpec | None = None
    initial_state: StateVector | None = None
    warm_start: bool = False        # start each model at its own fixed point
    seed: int = 0

    def __post_init__(self):
        if self.fault_step is not None and not (0 <= self.fault_step < self.total_steps):
            raise ValueError("fault_step must lie inside the simulated range")


@dataclass
class Trace:
    """Time-indexed record of one scenario run (detector columns optional)."""

    k: np.ndarray
    t: np.ndarray
    x: np.ndarray          # nominal model state, (K, 10)
    u: np.ndarray          # (K, 4)
    y: np.ndarray          # nominal output, (K, 2)
    y_tilde: np.ndarray    # plant output (equals y without uncertainty)
    d: np.ndarray          # (K, n_d)
    f: np.ndarray          # fault flag per step
    meta: dict = field(default_factory=dict)
    r: np.ndarray | None = None
    J: np.ndarray | None = None
    alarm: np.ndarray | None = None
    J_th: float | None = None

    def __len__(self):
        return self.k.size

    def detector_input(self) -> np.ndarray:
        """Streams fed to the detector: z = [y_tilde, u], shape (K, 6)."""
        return np.hstack([self.y_tilde, self.u])

    def xi(self) -> np.ndarray:
        """Output discrepancy between plant and nominal model."""
        return self.y_tilde - self.y


def build_discrete_pair(params: MicrogridParams, B_d=None, method: str = "zoh"
                        ) -> tuple[DiscreteModel, DiscreteModel]:
    """Sampled normal/faulty models; B_d optionally overridden (the faulty
    disturbance map is zero with the same number of channels)."""
    normal = unified_model(params, 0)
    faulty = unified_model(params, 1)
    if B_d is not None:
        B_d = np.asarray(B_d, dtype=float)
        normal = dataclasses.replace(normal, B_d=B_d)
        faulty = dataclasses.replace(faulty, B_d=np.zeros_like(B_d))
    return (discretize(normal, params.Ts, method),
            discretize(faulty, params.Ts, method))


def perturbed_params(params: MicrogridParams, uspec: UncertaintySpec,
                     rng: np.random.Generator) -> MicrogridParams:
    """Independent uniform relative perturbation of the selected fields.

    Draws keeping every parameter strictly positive; a draw that would not
    is retried with the magnitude capped just below 100%.
    """
    changes = {}
    for name in uspec.perturbed_fields:
        base = getattr(params, name)
        mag = uspec.param_perturbation
        value = base * (1.0 + mag * rng.uniform(-1.0, 1.0))
        while value <= 0.0:
            mag = min(mag, 0.99)
            value = base * (1.0 + mag * rng.uniform(-1.0, 1.0))
        changes[name] = value
    return params.replace(**changes)


def simulate_scenario(params: MicrogridParams, scenario: Scenario,
                      B_d=None) -> Trace:
    """Run one scenario.

    Dynamics per step k: x+ = A(f) x + B_u(f) u + B_d(f) d with
    u = [v_o_ref, tau_dq * f]; the fault flag switches at fault_step and the
    disturbance path vanishes while the fault is active.  When an
    uncertainty spec is present a perturbed-parameter plant runs in
    lockstep and supplies y_tilde (with measurement noise); otherwise
    y_tilde = y.
    """
    disc0, disc1 = build_discrete_pair(params, B_d=B_d)
    n_d = disc0.n_d
    K = scenario.total_steps
    d_seq = scenario.disturbance.sequence(K, n_d)

    rng = np.random.default_rng(
        scenario.seed if scenario.uncertainty is None or scenario.uncertainty.seed is None
        else scenario.uncertainty.seed)
    plant0 = plant1 = None
    noise_std = 0.0
    if scenario.uncertainty is not None:
        p_params = perturbed_params(params, scenario.uncertainty, rng)
        plant0, plant1 = build_discrete_pair(p_params, B_d=B_d)
        noise_std = scenario.uncertainty.noise_std

    u_pre = params.reference_input(fault=False)
    if scenario.warm_start:
        x = steady_state(disc0, u_pre, d_seq[0])
        xp = steady_state(plant0, u_pre, d_seq[0]) if plant0 is not None else None
    else:
        init = scenario.initial_state or DEFAULT_INITIAL_STATE
        x = init.to_array() if isinstance(init, StateVector) else np.asarray(init, float)
        xp = x.copy() if plant0 is not None else None

    xs = np.empty((K, N_STATES))
    us = np.empty((K, 4))
    ys = np.empty((K, 2))
    yts = np.empty((K, 2))
    fs = np.zeros(K, dtype=int)

    for k in range(K):
        fault = scenario.fault_step is not None and k >= scenario.fault_step
        fs[k] = int(fault)
        u = params.reference_input(fault=fault)
        xs[k] = x
        us[k] = u
        ys[k] = disc0.C @ x
        if plant0 is not None:
            yts[k] = plant0.C @ xp + noise_std * rng.standard_normal(2)
        else:
            yts[k] = ys[k]
        model = disc1 if fault else disc0
        x = model.A @ x + model.B_u @ u
        if not fault:
            x = x + model.B_d @ d_seq[k]
        if plant0 is not None:
            pm = plant1 if fault else plant0
            xp = pm.A @ xp + pm.B_u @ u
            if not fault:
                xp = xp + pm.B_d @ d_seq[k]
            if not np.all(np.isfinite(xp)):
                raise NumericalError(f"plant state diverged at step {k}")
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"state diverged at step {k}")

    return Trace(k=np.arange(K), t=np.arange(K) * params.Ts, x=xs, u=us,
                 y=ys, y_tilde=yts, d=d_seq, f=fs,
                 meta={"seed": scenario.seed,
                       "fault_step": scenario.fault_step,
                       "warm_start": scenario.warm_start,
                       "Ts": params.Ts})


def generate_disturbance_instances(m: int, T: int, bounds, seed: int = 0
                                   ) -> list[np.ndarray]:
    """i.i.d. constant-step instances of the non-decoupled disturbance.

    Each instance is a (T+1, n_check) array holding one uniform draw from
    [lows, highs], constant over the record.
    """
    if m < 1:
        raise ValueError("need at least one instance")
    if bounds is None:
        raise ValueError("bounds are required for random step instances")
    lows = np.atleast_1d(np.asarray(bounds[0], dtype=float))
    highs = np.atleast_1d(np.asarray(bounds[1], dtype=float))
    if lows.shape != highs.shape or np.any(highs < lows):
        raise ValueError("invalid bounds: need lows <= highs of equal shape")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(m):
        value = rng.uniform(lows, highs)
        out.append(np.tile(value, (T + 1, 1)))
    return out


def generate_uncertainty_instances(params: MicrogridParams,
                                   uspec: UncertaintySpec, m: int, T: int,
                                   excitation: DisturbanceSpec | None = None,
                                   B_d=None, seed: int = 0) -> list[np.ndarray]:
    """Recorded output discrepancies between perturbed plants and the model.

    One fresh plant per instance; plant and nominal model run in lockstep
    for T+1 steps under the nominal reference, each warm-started at its own
    operating point so the records represent steady operation (the regime
    the false-alarm guarantee speaks about).  The excitation defaults to no
    disturbance; a "step" excitation with bounds draws one disturbance
    level per instance.
    """
    if m < 1:
        raise ValueError("need at least one instance")
    children = np.random.SeedSequence(seed).spawn(m)
    out = []
    for i in range(m):
        child = np.random.default_rng(children[i])
        exc = excitation or DisturbanceSpec.none()
        if exc.kind == "step" and exc.bounds is not None:
            lows = np.atleast_1d(np.asarray(exc.bounds[0], dtype=float))
            highs = np.atleast_1d(np.asarray(exc.bounds[1], dtype=float))
            exc = dataclasses.replace(
                exc, step_value=tuple(child.uniform(lows, highs)), bounds=None)
        scenario = Scenario(
            total_steps=T + 1, fault_step=None, disturbance=exc,
            uncertainty=dataclasses.replace(
                uspec, seed=int(child.integers(2 ** 32))),
            warm_start=True, seed=int(child.integers(2 ** 32)))
        trace = simulate_scenario(params, scenario, B_d=B_d)
        out.append(trace.xi())
    return out


def perfect_setting_models(params: MicrogridParams
                           ) -> tuple[DiscreteModel, DisturbanceSplit]:
    """Fully decoupled variant: one disturbance channel entering both
    output-current equations with unit gain, so the split has an empty
    non-decoupled part."""
    B_d = np.zeros((N_STATES, 1))
    B_d[8, 0] = B_d[9, 0] = 1.0
    disc0, _ = build_discrete_pair(params, B_d=B_d)
    split = split_disturbance(disc0.B_d, decoupled_cols=(0,))
    return disc0, split


def appendix_fluctuation(alpha0: float = 0.8,
                         amplitudes=(0.02, 0.01, 0.01),
                         onset: int = 1001) -> DisturbanceSpec:
    """Benchmark decoupled-load fluctuation: a step plus three slow
    sinusoids at 1/30, 1/40 and 1/60 rad/sample."""
    a1, a2, a3 = amplitudes
    return DisturbanceSpec(kind="sinusoid", alpha0=alpha0,
                           terms=((a1, 1 / 30, 0.0), (a2, 1 / 40, 0.0),
                                  (a3, 1 / 60, 0.0)),
                           onset=onset)
