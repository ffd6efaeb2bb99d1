"""Residual-filter synthesis: signature matrices, QP design, thresholding.

The detector is a scalar-output filter  r = N(q) L0 / a(q) [y, u]  with a
fixed stable denominator a(q) and a polynomial numerator row N(q) of degree
d_N.  Writing Nbar = [N_0 ... N_dN] for the stacked coefficient row, the
design requirements become algebra on the stacked matrices:

* exact steady rejection of the state and the decoupled disturbance:
  Nbar Hbar(0) Ibar = 0;
* nonzero steady fault gain: maximize the largest entry of
  Nbar Lbar Hbar(1) Ibar;
* suppression of recorded uncertainty/disturbance patterns: minimize
  Nbar (Phi + Psi) Nbar^T, where each signature matrix is the Gram matrix
  of the residual response to one recorded instance.

That is an equality-constrained QP, solved here with a null-space method
(one small symmetric solve per candidate sign/direction).  A closed-form
approximation, exact in the limit of a large penalty weight, is provided
for cheap re-tuning as new data arrives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .dae import DaeSystem, InfeasibleError, NumericalError, StackedDae, feasibility_check
from .model import DiscreteModel

DEFAULT_RIDGE = 1e-6
DEFAULT_DELTA = 1e6
ARTIFACT_FORMAT = "mgfault-filter"
ARTIFACT_VERSION = 1


@dataclass(frozen=True)
class Denominator:
    """Monic stable polynomial a(q), coefficients in ascending powers."""

    coeffs: tuple

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim != 1 or c.size < 2:
            raise ValueError("denominator needs degree >= 1")
        if abs(c[-1] - 1.0) > 1e-12:
            raise ValueError("denominator must be monic")
        object.__setattr__(self, "coeffs", tuple(c))

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def roots(self) -> np.ndarray:
        return np.roots(self.coeffs[::-1])

    def check_stable(self):
        mags = np.abs(self.roots())
        if mags.size and mags.max() >= 1.0:
            raise ValueError(
                f"denominator has a root of modulus {mags.max():.6f} "
                f"on or outside the unit circle")

    def at_one(self) -> float:
        return float(np.sum(self.coeffs))

    @classmethod
    def deadbeat(cls, degree: int) -> "Denominator":
        """a(q) = q^degree: pure delay, all roots at the origin."""
        return cls(tuple([0.0] * degree + [1.0]))

    @classmethod
    def single_pole(cls, degree: int, pole: float) -> "Denominator":
        """a(q) = (q - pole)^degree with 0 <= pole < 1."""
        if not 0.0 <= pole < 1.0:
            raise ValueError("pole must lie in [0, 1)")
        if pole == 0.0:
            return cls.deadbeat(degree)
        poly = np.array([1.0])
        for _ in range(degree):
            poly = np.convolve(poly, [1.0, -pole])
        return cls(tuple(poly[::-1]))


@dataclass(frozen=True)
class SignatureMatrix:
    """Averaged Gram matrices of recorded residual responses."""

    Phi_bar: np.ndarray    # uncertainty average
    Psi_bar: np.ndarray    # non-decoupled disturbance average
    m: int                 # instance count
    T: int                 # instance length
    denominator: Denominator  # a(q) the responses were filtered through

    def total(self) -> np.ndarray:
        return self.Phi_bar + self.Psi_bar

    @classmethod
    def zeros(cls, n: int, T: int, denominator: Denominator) -> "SignatureMatrix":
        return cls(np.zeros((n, n)), np.zeros((n, n)), m=0, T=T,
                   denominator=denominator)


@dataclass(frozen=True)
class FilterCoefficients:
    N_bar: np.ndarray               # ((d_N+1)*(n_x+n_y),)
    denominator: Denominator
    block_size: int                 # n_x + n_y
    objective_value: float          # Nbar S Nbar^T - ||Nbar Lbar Hbar(1) Ibar||_inf
    active_direction: tuple         # (index, sign) of the winning subproblem
    constraint_residual: float      # ||Nbar Hbar(0) Ibar||_inf
    ridge: float
    delta: float | None = None      # set on the analytic path

    @property
    def d_N(self) -> int:
        return self.N_bar.size // self.block_size - 1

    def rows(self) -> np.ndarray:
        """Coefficient rows N_0 ... N_dN, one per power of q."""
        return self.N_bar.reshape(self.d_N + 1, self.block_size)

    def at_one(self) -> np.ndarray:
        """N(1): the coefficient-row sum."""
        return self.rows().sum(axis=0)


@dataclass(frozen=True)
class Threshold:
    J_th: float
    lam: float
    T: int


def impulse_response(denom: Denominator, T: int) -> np.ndarray:
    """Unit impulse response of 1/a(q), samples 0..T.

    Solves a(q) ell = impulse: with d_a = deg a, the first d_a samples are
    zero and ell(k) = delta(k - d_a) - sum_j a_j ell(k - d_a + j).
    """
    denom.check_stable()
    d_a = denom.degree
    a = np.asarray(denom.coeffs)
    ell = np.zeros(T + 1)
    for k in range(d_a, T + 1):
        acc = 1.0 if k == d_a else 0.0
        acc -= np.dot(a[:d_a], ell[k - d_a:k])
        ell[k] = acc
    return ell


def build_gamma(ell: np.ndarray, T: int, d_N: int) -> np.ndarray:
    """Convolution rows: row j is ell shifted right by j, truncated to T+1.

    Rows run j = 0..T-d_N, so the matrix is (T-d_N+1, T+1).
    """
    if T <= d_N + 1:
        raise ValueError(f"instance length T={T} must exceed d_N+1={d_N + 1}")
    ell = np.asarray(ell, dtype=float)
    if ell.size < T + 1:
        raise ValueError("impulse response shorter than T+1")
    gamma = np.zeros((T - d_N + 1, T + 1))
    for j in range(T - d_N + 1):
        gamma[j, j:] = ell[:T + 1 - j]
    return gamma


def _as_time_major(instance) -> np.ndarray:
    """Instances are time-major: (T+1, p) arrays, or (T+1,) for one channel."""
    inst = np.asarray(instance, dtype=float)
    if inst.ndim == 1:
        inst = inst[:, None]
    if inst.ndim != 2:
        raise ValueError("instance must be a 1-D or time-major 2-D array")
    return inst


def block_hankel(instance: np.ndarray, d_N: int) -> np.ndarray:
    """Block-Hankel arrangement of a (T+1, p) sample sequence.

    Block row s holds samples s .. T-d_N+s as columns, producing a
    ((d_N+1)p, T-d_N+1) matrix.
    """
    inst = _as_time_major(instance)
    T = inst.shape[0] - 1
    p = inst.shape[1]
    if T <= d_N:
        raise ValueError("instance too short for the requested degree")
    width = T - d_N + 1
    out = np.zeros(((d_N + 1) * p, width))
    for s in range(d_N + 1):
        out[s * p:(s + 1) * p, :] = inst[s:s + width].T
    return out


def signature_instance(instance: np.ndarray, block_diag: np.ndarray,
                       gamma: np.ndarray, d_N: int) -> np.ndarray:
    """Gram matrix of one instance: (B Xi Gamma)(B Xi Gamma)^T.

    For any coefficient row Nbar, the quadratic form Nbar Phi Nbar^T equals
    the summed squared residual response to the instance.
    """
    inst = _as_time_major(instance)
    if inst.shape[0] != gamma.shape[1]:
        raise ValueError(
            f"instance length {inst.shape[0]} does not match gamma "
            f"columns {gamma.shape[1]}")
    p = inst.shape[1]
    if block_diag.shape[1] != (d_N + 1) * p:
        raise ValueError("instance width does not match the block-diagonal map")
    G = block_diag @ block_hankel(inst, d_N) @ gamma
    return G @ G.T


def _pad_uncertainty(xi: np.ndarray, n_u: int) -> np.ndarray:
    xi = _as_time_major(xi)
    return np.hstack([xi, np.zeros((xi.shape[0], n_u))])


def average_signature(stacked: StackedDae, denom: Denominator,
                      instances_xi=(), instances_d=(), T: int | None = None
                      ) -> SignatureMatrix:
    """Mean signature matrices over recorded instances.

    Empty instance lists yield zero matrices (the fully decoupled setting);
    all instances must share one length.
    """
    n = stacked.n_rows
    instances_xi, instances_d = list(instances_xi), list(instances_d)
    lengths = {_as_time_major(i).shape[0] for i in instances_xi + instances_d}
    if len(lengths) > 1:
        raise ValueError(f"instances have inconsistent lengths: {sorted(lengths)}")
    if not lengths:
        if T is None:
            raise ValueError("T is required when no instances are given")
        return SignatureMatrix.zeros(n, T, denom)
    T_inst = lengths.pop() - 1
    if T is not None and T != T_inst:
        raise ValueError(f"declared T={T} does not match instances (T={T_inst})")
    gamma = build_gamma(impulse_response(denom, T_inst), T_inst, stacked.d_N)

    Phi = np.zeros((n, n))
    for xi in instances_xi:
        padded = _pad_uncertainty(xi, stacked.dae.n_u)
        Phi += signature_instance(padded, stacked.Lbar0, gamma, stacked.d_N)
    Psi = np.zeros((n, n))
    for dk in instances_d:
        Psi += signature_instance(dk, stacked.Ebar0, gamma, stacked.d_N)
    if instances_xi:
        Phi /= len(instances_xi)
    if instances_d:
        Psi /= len(instances_d)
    return SignatureMatrix(Phi_bar=Phi, Psi_bar=Psi,
                           m=max(len(instances_xi), len(instances_d)),
                           T=T_inst, denominator=denom)


def qp_objective(N_bar: np.ndarray, stacked: StackedDae, sig: SignatureMatrix,
                 ridge: float = 0.0) -> float:
    """Design objective at a given coefficient row (ridge optional)."""
    S = sig.total()
    quad = float(N_bar @ S @ N_bar) + ridge * float(N_bar @ N_bar)
    sens = float(np.abs(N_bar @ stacked.sensitivity_matrix()).max())
    return quad - sens


def _null_space(K: np.ndarray):
    U, s, _ = np.linalg.svd(K)
    tol = max(K.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int((s > tol).sum())
    return U[:, rank:], rank


def solve_qp(stacked: StackedDae, sig: SignatureMatrix,
             epsilon: float = DEFAULT_RIDGE) -> FilterCoefficients:
    """Equality-constrained QP via a null-space reduction.

    The infinity norm in the objective is handled by enumerating all
    2*(n_x+1) signed coordinate directions; each subproblem is a strictly
    convex quadratic (the ridge epsilon guarantees this even with zero
    signature matrices) over the constraint null space.  The returned
    filter is the enumerated solution with the lowest full objective, with
    its sign flipped if needed so the active fault-gain entry is positive.
    """
    if epsilon <= 0:
        raise ValueError("ridge epsilon must be positive")
    report = feasibility_check(stacked)
    if not report.equality_feasible:
        raise InfeasibleError(f"equality constraint has no solution: {report}")
    if not report.sensitivity_possible:
        raise InfeasibleError(f"no feasible direction sees the fault: {report}")

    K = stacked.decoupling_matrix()
    sens = stacked.sensitivity_matrix()
    Z, _ = _null_space(K)
    S = sig.total()
    # Z is orthonormal, so the ridge passes through the reduction unchanged
    M = Z.T @ S @ Z + epsilon * np.eye(Z.shape[1])
    try:
        cho = scipy.linalg.cho_factor(M)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(f"reduced Hessian not positive definite: {exc}") from exc

    best = None
    for i in range(sens.shape[1]):
        for sign in (1.0, -1.0):
            g = Z.T @ (sign * sens[:, i])
            w = scipy.linalg.cho_solve(cho, g / 2.0)
            N = Z @ w
            obj = float(N @ S @ N) + epsilon * float(N @ N) \
                - float(np.abs(N @ sens).max())
            if best is None or obj < best[0]:
                best = (obj, i, sign, N)
    obj, i_star, sign, N = best
    if obj >= 0.0:
        raise InfeasibleError(
            "all quadratic subproblems are degenerate: no coefficient row "
            "attains a negative objective (zero fault sensitivity)")
    if N @ sens[:, i_star] < 0:
        N = -N
    return FilterCoefficients(
        N_bar=N,
        denominator=sig.denominator,
        block_size=stacked.dae.n_x + stacked.dae.n_y,
        objective_value=qp_objective(N, stacked, sig),
        active_direction=(i_star, int(sign)),
        constraint_residual=float(np.abs(N @ K).max()),
        ridge=epsilon)


def solve_analytic(stacked: StackedDae, sig: SignatureMatrix,
                   delta: float = DEFAULT_DELTA, ridge: float | None = None
                   ) -> FilterCoefficients:
    """Closed-form approximate design.

    For each candidate direction i,

        N_i = (Lbar Hbar(1) Ibar e_i)^T / (2 delta)
              (S/delta + Hbar(0) Ibar Ibar^T Hbar(0)^T + ridge I)^{-1}

    and the direction with the largest own-gain magnitude wins.  The
    equality constraint is only met in the limit delta -> inf, so the
    residual is reported rather than enforced.  A ridge of epsilon/delta
    makes the limit match the ridge-epsilon QP solution.  The inverse is
    applied through an eigendecomposition of S plus a low-rank update,
    which stays accurate for the large delta / tiny ridge regime.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if ridge is not None and ridge < 0:
        raise ValueError("ridge must be non-negative")
    K = stacked.decoupling_matrix()
    sens = stacked.sensitivity_matrix()
    S = sig.total()
    evals, evecs = np.linalg.eigh(S)
    evals = np.clip(evals, 0.0, None)

    used_ridge = 0.0 if ridge is None else float(ridge)
    if used_ridge == 0.0 and evals.min() <= 0.0:
        # the quadratic term alone leaves null directions: documented fallback
        used_ridge = DEFAULT_RIDGE / delta
    diag = evals / delta + used_ridge
    if diag.min() <= 0.0:
        raise NumericalError("inner matrix is singular even with the ridge")

    d_inv = 1.0 / diag

    def apply_dinv(X):
        col = X if X.ndim == 2 else X[:, None]
        out = evecs @ (d_inv[:, None] * (evecs.T @ col))
        return out if X.ndim == 2 else out[:, 0]

    DK = apply_dinv(K)
    inner = np.eye(K.shape[1]) + K.T @ DK
    inner_cho = scipy.linalg.cho_factor(inner)

    best = None
    for i in range(sens.shape[1]):
        c = sens[:, i]
        sol = apply_dinv(c) - DK @ scipy.linalg.cho_solve(inner_cho, DK.T @ c)
        N = sol / (2.0 * delta)
        gain = float(N @ c)
        if best is None or abs(gain) > best[0]:
            best = (abs(gain), i, N, gain)
    _, i_star, N, gain = best
    sign = 1
    if gain < 0:
        N, sign = -N, -1
    return FilterCoefficients(
        N_bar=N,
        denominator=sig.denominator,
        block_size=stacked.dae.n_x + stacked.dae.n_y,
        objective_value=qp_objective(N, stacked, sig),
        active_direction=(i_star, sign),
        constraint_residual=float(np.abs(N @ K).max()),
        ridge=float(used_ridge),
        delta=float(delta))


def compute_threshold(coeffs: FilterCoefficients, sig: SignatureMatrix,
                      lam: float, T: int) -> Threshold:
    """Markov threshold J_th = (lam/T) Nbar (Phi + Psi) Nbar^T.

    With instance patterns drawn i.i.d. from the operating distribution,
    the steady false-alarm rate of J > J_th is at most 1/lam.
    """
    if lam < 1.0:
        raise ValueError("lam must be at least 1")
    if T <= 0:
        raise ValueError("T must be positive")
    value = float(coeffs.N_bar @ sig.total() @ coeffs.N_bar)
    return Threshold(J_th=(lam / T) * value, lam=float(lam), T=int(T))


def calibration_threshold(J_values: np.ndarray, margin: float = 2.0) -> float:
    """Threshold from a fault-free rehearsal run: margin * max observed J.

    Used when the trained signature matrices are identically zero (fully
    decoupled setting), where the Markov formula degenerates to zero.
    """
    J = np.asarray(J_values, dtype=float)
    if J.size == 0:
        raise ValueError("calibration window is empty")
    if margin < 1.0:
        raise ValueError("margin must be at least 1")
    return float(margin * J.max())


@dataclass(frozen=True)
class DetectabilityResult:
    steady_residual: float
    margin: float
    detectable: bool
    marginal: bool = False


def observable_subsystem(A: np.ndarray, C: np.ndarray):
    """Orthonormal basis V of the observable subspace and the projected
    (A_o, C_o) pair; the unobservable part never reaches the output."""
    n = A.shape[0]
    obs = np.vstack([C @ np.linalg.matrix_power(A, k) for k in range(n)])
    _, s, vt = np.linalg.svd(obs)
    tol = max(obs.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int((s > tol).sum())
    V = vt[:rank].T
    return V.T @ A @ V, V


def detectability_check(coeffs: FilterCoefficients, dae: DaeSystem,
                        disc_faulty: DiscreteModel, u_ss: np.ndarray,
                        J_th: float) -> DetectabilityResult:
    """Steady faulted residual against the threshold.

    The faulted closed loop keeps integrator states that never settle, so
    the steady output is evaluated on the observable subsystem only; the
    filter then maps [y_ss, u_ss] through N(1) L0 / a(1).
    """
    u_ss = np.asarray(u_ss, dtype=float)
    A_o, V = observable_subsystem(disc_faulty.A, disc_faulty.C)
    B_o = V.T @ disc_faulty.B_u
    C_o = disc_faulty.C @ V
    eye_min_a = np.eye(A_o.shape[0]) - A_o
    sv = np.linalg.svd(eye_min_a, compute_uv=False)
    if sv.size == 0 or sv[-1] <= max(eye_min_a.shape) * np.finfo(float).eps * sv[0]:
        return DetectabilityResult(steady_residual=float("nan"),
                                   margin=float("nan"),
                                   detectable=False, marginal=True)
    y_ss = C_o @ np.linalg.solve(eye_min_a, B_o @ u_ss)
    z_ss = np.concatenate([y_ss, u_ss])
    r_ss = float(coeffs.at_one() @ dae.L0 @ z_ss) / coeffs.denominator.at_one()
    margin = r_ss ** 2 - J_th
    return DetectabilityResult(steady_residual=r_ss, margin=margin,
                               detectable=margin > 0.0)


def filter_taps(coeffs: FilterCoefficients, L0: np.ndarray) -> np.ndarray:
    """Numerator taps N_s L0, one row per power of q: shape (d_N+1, n_y+n_u)."""
    return coeffs.rows() @ L0


def save_filter_artifact(path, coeffs: FilterCoefficients, L0: np.ndarray,
                         threshold: Threshold, meta: dict | None = None) -> Path:
    """Serialize everything detection needs into a versioned JSON file."""
    path = Path(path)
    payload = {
        "format": ARTIFACT_FORMAT,
        "version": ARTIFACT_VERSION,
        "d_N": coeffs.d_N,
        "block_size": coeffs.block_size,
        "denominator": list(coeffs.denominator.coeffs),
        "N_rows": coeffs.rows().tolist(),
        "ridge": coeffs.ridge,
        "delta": coeffs.delta,
        "active_direction": {"index": coeffs.active_direction[0],
                             "sign": coeffs.active_direction[1]},
        "objective": coeffs.objective_value,
        "constraint_residual": coeffs.constraint_residual,
        "L0": np.asarray(L0).tolist(),
        "threshold": {"J_th": threshold.J_th, "lambda": threshold.lam,
                      "T": threshold.T},
        "meta": meta or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1))
    return path


def load_filter_artifact(path):
    """Load a filter artifact; returns (coeffs, L0, threshold, meta)."""
    data = json.loads(Path(path).read_text())
    if data.get("format") != ARTIFACT_FORMAT:
        raise ValueError(f"{path}: not a filter artifact")
    if data.get("version") != ARTIFACT_VERSION:
        raise ValueError(f"{path}: unsupported artifact version "
                         f"{data.get('version')!r}")
    rows = np.asarray(data["N_rows"], dtype=float)
    coeffs = FilterCoefficients(
        N_bar=rows.reshape(-1),
        denominator=Denominator(tuple(data["denominator"])),
        block_size=int(data["block_size"]),
        objective_value=float(data["objective"]),
        active_direction=(int(data["active_direction"]["index"]),
                          int(data["active_direction"]["sign"])),
        constraint_residual=float(data["constraint_residual"]),
        ridge=float(data["ridge"]),
        delta=None if data["delta"] is None else float(data["delta"]))
    threshold = Threshold(J_th=float(data["threshold"]["J_th"]),
                          lam=float(data["threshold"]["lambda"]),
                          T=int(data["threshold"]["T"]))
    return coeffs, np.asarray(data["L0"], dtype=float), threshold, data["meta"]
