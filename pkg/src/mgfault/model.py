"""State-space models of an inverter-based microgrid in the rotating dq frame.

The plant is a single inverter feeding a resistive load through an LCL
filter, regulated by an outer voltage PI loop and an inner current PI loop.
The augmented state is

    x = [phi_dq, gamma_dq, i_ldq, v_odq, i_odq]          (n_x = 10)

where phi/gamma are the controller integrators, i_l the inverter-side
current, v_o the grid-side voltage and i_o the output current.  Only i_odq
is measured (n_y = 2).  The known input is u = [v_o_ref, tau_dq] (n_u = 4):
the voltage reference, plus the constant value the current reference is
pinned to by the fault current limiter while a ground fault is active.

Two operating modes are modelled:

* normal mode: the load resistance R_L closes the loop and unknown load
  changes enter as a disturbance d through B_d;
* ground-fault mode: the bus is short-circuited (no load feedback, the
  disturbance path vanishes) and the current reference saturates to tau_dq.

``unified_model`` blends the two with a binary fault flag f.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

N_STATES = 10
N_OUTPUTS = 2
N_INPUTS = 4

STATE_NAMES = (
    "phi_d", "phi_q", "gamma_d", "gamma_q",
    "i_ld", "i_lq", "v_od", "v_oq", "i_od", "i_oq",
)

_STRICTLY_POSITIVE = ("omega", "L_f", "L_c", "C_f", "R_L", "Ts")

PARAM_FIELDS = (
    "omega", "L_f", "R_f", "C_f", "L_c", "R_c", "R_L",
    "K_P_c", "K_I_c", "K_P_v", "K_I_v", "F", "v_o_ref", "tau_dq", "Ts",
)


@dataclass(frozen=True)
class MicrogridParams:
    """Physical and controller constants plus reference inputs.

    Defaults are the benchmark single-inverter microgrid this package is
    calibrated against (50 Hz grid, 12 ohm load, 0.1 ms sampling).
    """

    omega: float = 314.1          # grid angular frequency [rad/s]
    L_f: float = 3.5e-3           # inverter-side inductance [H]
    R_f: float = 0.01             # inverter-side resistance [ohm]
    C_f: float = 21.9e-6          # filter capacitance [F]
    L_c: float = 1.3e-3           # grid-side inductance [H]
    R_c: float = 0.02             # grid-side resistance [ohm]
    R_L: float = 12.0             # load resistance [ohm]
    K_P_c: float = 0.3            # current-loop proportional gain
    K_I_c: float = 20.0           # current-loop integral gain
    K_P_v: float = 2.0            # voltage-loop proportional gain
    K_I_v: float = 14.0           # voltage-loop integral gain
    F: float = 0.75               # output-current feedforward coefficient
    v_o_ref: tuple[float, float] = (381.0, 0.0)   # voltage reference [V]
    tau_dq: tuple[float, float] = (35.0, 0.7)     # FCL saturation value [A]
    Ts: float = 1e-4              # sampling period [s]

    def __post_init__(self):
        for name in _STRICTLY_POSITIVE:
            if not getattr(self, name) > 0.0:
                raise ValueError(f"parameter {name} must be strictly positive, "
                                 f"got {getattr(self, name)!r}")
        for name in ("v_o_ref", "tau_dq"):
            vec = np.asarray(getattr(self, name), dtype=float)
            if vec.shape != (2,):
                raise ValueError(f"parameter {name} must be a 2-vector")
            object.__setattr__(self, name, tuple(vec))

    def replace(self, **changes) -> "MicrogridParams":
        return dataclasses.replace(self, **changes)

    def reference_input(self, fault: bool = False) -> np.ndarray:
        """Known input u = [v_o_ref, tau_dq * fault]."""
        tau = np.asarray(self.tau_dq) if fault else np.zeros(2)
        return np.concatenate([np.asarray(self.v_o_ref), tau])

    @classmethod
    def from_dict(cls, data: dict) -> "MicrogridParams":
        unknown = set(data) - set(PARAM_FIELDS)
        if unknown:
            raise ValueError(f"unknown parameter keys: {sorted(unknown)}")
        kwargs = dict(data)
        for name in ("v_o_ref", "tau_dq"):
            if name in kwargs:
                kwargs[name] = tuple(float(v) for v in kwargs[name])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = {}
        for name in PARAM_FIELDS:
            value = getattr(self, name)
            out[name] = list(value) if isinstance(value, tuple) else value
        return out


@dataclass(frozen=True)
class StateVector:
    """Named view of the 10-dimensional augmented state."""

    phi_dq: tuple[float, float] = (0.0, 0.0)
    gamma_dq: tuple[float, float] = (0.0, 0.0)
    i_ldq: tuple[float, float] = (0.0, 0.0)
    v_odq: tuple[float, float] = (0.0, 0.0)
    i_odq: tuple[float, float] = (0.0, 0.0)

    def to_array(self) -> np.ndarray:
        x = np.concatenate([self.phi_dq, self.gamma_dq, self.i_ldq,
                            self.v_odq, self.i_odq]).astype(float)
        assert x.shape == (N_STATES,)
        return x

    @classmethod
    def from_array(cls, x) -> "StateVector":
        x = np.asarray(x, dtype=float)
        if x.shape != (N_STATES,):
            raise ValueError(f"state vector must have length {N_STATES}")
        return cls(tuple(x[0:2]), tuple(x[2:4]), tuple(x[4:6]),
                   tuple(x[6:8]), tuple(x[8:10]))


# Benchmark initial conditions.  NOTE: the published i_lq entry (-5.5e3 A)
# is orders of magnitude larger than the other currents; it is kept verbatim
# as the default and is fully configurable per scenario.
DEFAULT_INITIAL_STATE = StateVector(
    phi_dq=(0.13, 0.0),
    gamma_dq=(0.0115, 0.0),
    i_ldq=(11.4, -5.5e3),
    v_odq=(380.8, 0.0),
    i_odq=(11.4, 0.4),
)


@dataclass(frozen=True)
class ContinuousModel:
    A: np.ndarray          # (n_x, n_x)
    B_u: np.ndarray        # (n_x, n_u)
    B_d: np.ndarray        # (n_x, n_d)
    C: np.ndarray          # (n_y, n_x)
    fault_flag: int

    @property
    def n_d(self) -> int:
        return self.B_d.shape[1]


@dataclass(frozen=True)
class DiscreteModel:
    A: np.ndarray
    B_u: np.ndarray
    B_d: np.ndarray
    C: np.ndarray
    fault_flag: int
    Ts: float
    method: str

    @property
    def n_d(self) -> int:
        return self.B_d.shape[1]


@dataclass(frozen=True)
class DisturbanceSplit:
    """Column partition of B_d into decoupled / non-decoupled channels."""

    B_hat: np.ndarray      # (n_x, 1) decoupled channel
    B_check: np.ndarray    # (n_x, n_d-1) non-decoupled channels
    decoupled_cols: tuple[int, ...] = (0,)


class _Blocks:
    """Controller and LCL-filter sub-matrices shared by both modes."""

    def __init__(self, p: MicrogridParams):
        I2 = np.eye(2)
        om = p.omega
        self.B_v1 = I2.copy()
        self.B_v2 = np.array([[0, 0, -1, 0, 0, 0],
                              [0, 0, 0, -1, 0, 0]], dtype=float)
        self.C_v = p.K_I_v * I2
        self.D_v1 = p.K_P_v * I2
        self.D_v2 = np.array([[0, 0, -p.K_P_v, -om * p.C_f, p.F, 0],
                              [0, 0, om * p.C_f, -p.K_P_v, 0, p.F]])
        self.B_c1 = I2.copy()
        self.B_c2 = np.array([[-1, 0, 0, 0, 0, 0],
                              [0, -1, 0, 0, 0, 0]], dtype=float)
        self.C_c = p.K_I_c * I2
        self.D_c1 = p.K_P_c * I2
        self.D_c2 = np.array([[-p.K_P_c, -om * p.L_f, 0, 0, 0, 0],
                              [om * p.L_f, -p.K_P_c, 0, 0, 0, 0]])
        self.A_l = np.array([
            [-p.R_f / p.L_f, om, -1 / p.L_f, 0, 0, 0],
            [-om, -p.R_f / p.L_f, 0, -1 / p.L_f, 0, 0],
            [1 / p.C_f, 0, 0, om, -1 / p.C_f, 0],
            [0, 1 / p.C_f, -om, 0, 0, -1 / p.C_f],
            [0, 0, 1 / p.L_c, 0, -p.R_c / p.L_c, om],
            [0, 0, 0, 1 / p.L_c, -om, -p.R_c / p.L_c]])
        self.B_l1 = np.zeros((6, 2))
        self.B_l1[0, 0] = self.B_l1[1, 1] = 1 / p.L_f
        self.B_l2 = np.zeros((6, 2))
        self.B_l2[4, 0] = self.B_l2[5, 1] = -1 / p.L_c


def output_matrix() -> np.ndarray:
    """C = [0 I] selecting i_odq (the last two states)."""
    return np.hstack([np.zeros((N_OUTPUTS, 8)), np.eye(N_OUTPUTS)])


def build_normal_model(params: MicrogridParams) -> ContinuousModel:
    """Closed-loop model in normal operation.

    B_u carries zero columns for the tau_dq inputs (the FCL value does not
    act on the plant until a fault pins the current reference to it), so
    B_u has the full (n_x, 4) shape in both modes.  B_d injects the load
    change onto the output-current equations with gain -1/L_c per axis.
    """
    b = _Blocks(params)
    I2 = np.eye(2)
    load_feedback = b.B_l2 @ (params.R_L * I2) @ np.hstack([np.zeros((2, 4)), I2])
    A_h33 = b.A_l + b.B_l1 @ (b.D_c1 @ b.D_v2 + b.D_c2) + load_feedback
    A = np.block([
        [np.zeros((2, 2)), np.zeros((2, 2)), b.B_v2],
        [b.B_c1 @ b.C_v, np.zeros((2, 2)), b.B_c1 @ b.D_v2 + b.B_c2],
        [b.B_l1 @ b.D_c1 @ b.C_v, b.B_l1 @ b.C_c, A_h33]])
    B_h = np.vstack([b.B_v1, b.B_c1 @ b.D_v1, b.B_l1 @ b.D_c1 @ b.D_v1])
    B_u = np.hstack([B_h, np.zeros((N_STATES, 2))])
    B_d = np.zeros((N_STATES, 2))
    B_d[8, 0] = B_d[9, 1] = -1 / params.L_c
    return ContinuousModel(A=A, B_u=B_u, B_d=B_d, C=output_matrix(), fault_flag=0)


def build_faulty_model(params: MicrogridParams) -> ContinuousModel:
    """Closed-loop model under a three-phase ground fault.

    The bus short circuit removes the load feedback and the disturbance
    path (B_d = 0); the saturated current reference tau_dq drives the
    current loop through the second input block.
    """
    b = _Blocks(params)
    A = np.block([
        [np.zeros((2, 2)), np.zeros((2, 2)), b.B_v2],
        [np.zeros((2, 2)), np.zeros((2, 2)), b.B_c2],
        [np.zeros((6, 2)), b.B_l1 @ b.C_c, b.A_l + b.B_l1 @ b.D_c2]])
    B_uh1 = np.vstack([b.B_v1, np.zeros((2, 2)), np.zeros((6, 2))])
    B_uh2 = np.vstack([np.zeros((2, 2)), b.B_c1, b.B_l1 @ b.D_c1])
    B_u = np.hstack([B_uh1, B_uh2])
    B_d = np.zeros((N_STATES, 2))
    return ContinuousModel(A=A, B_u=B_u, B_d=B_d, C=output_matrix(), fault_flag=1)


def unified_model(params: MicrogridParams, f: int) -> ContinuousModel:
    """Fault-parameterized model: affine in the binary fault flag f."""
    if f not in (0, 1):
        raise ValueError(f"fault flag must be 0 or 1, got {f!r}")
    normal = build_normal_model(params)
    faulty = build_faulty_model(params)
    A = normal.A + f * (faulty.A - normal.A)
    B_u = np.hstack([
        normal.B_u[:, :2] + f * (faulty.B_u[:, :2] - normal.B_u[:, :2]),
        f * faulty.B_u[:, 2:]])
    B_d = (1 - f) * normal.B_d
    return ContinuousModel(A=A, B_u=B_u, B_d=B_d, C=output_matrix(), fault_flag=f)


def dq_projection(theta: float) -> np.ndarray:
    """2x3 projection from the abc frame onto the rotating dq axes."""
    shifts = np.array([0.0, -2 * np.pi / 3, 2 * np.pi / 3])
    return (2.0 / 3.0) * np.vstack([np.cos(theta + shifts),
                                    np.sin(theta + shifts)])


def dq_transform(abc, theta: float) -> np.ndarray:
    return dq_projection(theta) @ np.asarray(abc, dtype=float)


def inverse_dq_transform(dq, theta: float) -> np.ndarray:
    """Right inverse of the dq projection; its image is the zero-sum
    (balanced) subspace of three-phase quantities."""
    return 1.5 * dq_projection(theta).T @ np.asarray(dq, dtype=float)


def discretize(model: ContinuousModel, Ts: float, method: str = "zoh") -> DiscreteModel:
    """Sample the continuous model with period Ts.

    "zoh" holds both u and d constant over each sampling interval and is
    exact for piecewise-constant inputs (joint augmented matrix
    exponential over [A, B_u, B_d]).  "euler" is the first-order forward
    difference, kept as an independent cross-check.
    """
    if not Ts > 0:
        raise ValueError("Ts must be strictly positive")
    n = model.A.shape[0]
    B = np.hstack([model.B_u, model.B_d])
    if method == "zoh":
        aug = np.zeros((n + B.shape[1], n + B.shape[1]))
        aug[:n, :n] = model.A
        aug[:n, n:] = B
        phi = expm(aug * Ts)
        A_d, B_all = phi[:n, :n], phi[:n, n:]
    elif method == "euler":
        A_d = np.eye(n) + Ts * model.A
        B_all = Ts * B
    else:
        raise ValueError(f"unknown discretization method {method!r}")
    if not np.all(np.isfinite(A_d)) or not np.all(np.isfinite(B_all)):
        raise ArithmeticError("discretization produced non-finite entries")
    n_u = model.B_u.shape[1]
    return DiscreteModel(A=A_d, B_u=B_all[:, :n_u], B_d=B_all[:, n_u:],
                         C=model.C.copy(), fault_flag=model.fault_flag,
                         Ts=Ts, method=method)


def split_disturbance(B_d: np.ndarray, decoupled_cols=(0,)) -> DisturbanceSplit:
    """Partition B_d columns into the decoupled channel and the rest.

    With n_y sensors at most n_y - 1 disturbance channels can be rejected
    exactly, so only a single decoupled column is accepted here.
    """
    B_d = np.asarray(B_d, dtype=float)
    cols = tuple(int(c) for c in decoupled_cols)
    n_d = B_d.shape[1]
    if len(cols) >= N_OUTPUTS:
        raise InfeasibleSplitError(
            f"cannot decouple {len(cols)} disturbance channels with "
            f"{N_OUTPUTS} sensors; exact rejection needs strictly fewer "
            f"unknown inputs than measurements")
    if any(c < 0 or c >= n_d for c in cols):
        raise ValueError(f"decoupled column index out of range for n_d={n_d}")
    rest = [j for j in range(n_d) if j not in cols]
    return DisturbanceSplit(B_hat=B_d[:, list(cols)], B_check=B_d[:, rest],
                            decoupled_cols=cols)


class InfeasibleSplitError(ValueError):
    """Requested disturbance decoupling exceeds the sensor budget."""


def steady_state(model: DiscreteModel, u, d=None) -> np.ndarray:
    """Fixed point of the discrete recursion for constant u and d."""
    u = np.asarray(u, dtype=float)
    rhs = model.B_u @ u
    if d is not None:
        rhs = rhs + model.B_d @ np.asarray(d, dtype=float)
    return np.linalg.solve(np.eye(model.A.shape[0]) - model.A, rhs)
