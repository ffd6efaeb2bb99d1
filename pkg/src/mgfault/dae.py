"""Behavioral (polynomial-matrix) form of the sampled microgrid model.

The discrete model in both modes is rewritten as

    H(q, f)[X] + L(f)[Y] + E(f)[d_check] = 0,      H(q, f) = q*H1 + H0(f)

with q the one-step forward shift, X = [x, d_hat] the unknown signals
(state plus the decoupled disturbance channel), Y = [y, u] the known ones
and d_check the non-decoupled disturbance.  Residual generators are row
polynomial vectors acting on this identity, so the synthesis works on
block-banded stacks of (H0, H1) up to the chosen numerator degree.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .model import DiscreteModel, DisturbanceSplit


class InfeasibleError(RuntimeError):
    """Synthesis cannot proceed: rank conditions are violated."""


class NumericalError(RuntimeError):
    """A numerical operation failed or produced non-finite values."""


@dataclass(frozen=True)
class DaeSystem:
    H1: np.ndarray        # (n_x+n_y, n_x+1)
    H0_normal: np.ndarray
    H0_faulty: np.ndarray
    L0: np.ndarray        # (n_x+n_y, n_y+n_u)
    L1: np.ndarray
    E0: np.ndarray        # (n_x+n_y, n_d-1)
    n_x: int
    n_y: int
    n_u: int

    def H0(self, f: int) -> np.ndarray:
        return self.H0_faulty if f else self.H0_normal

    def L(self, f: int) -> np.ndarray:
        return self.L1 if f else self.L0

    def H(self, q: float, f: int) -> np.ndarray:
        return q * self.H1 + self.H0(f)


@dataclass(frozen=True)
class StackedDae:
    """Block stacks used by the synthesis problem at numerator degree d_N.

    Hbar0/Hbar1 carry H0(f) on the block diagonal and H1 on the first
    block superdiagonal; Ibar sums powers of q at q = 1; Lbar applies
    L0 L1^+ blockwise; Lbar0/Ebar0 are the block-diagonal input maps used
    when turning recorded uncertainty/disturbance data into signature
    matrices.
    """

    Hbar0: np.ndarray      # ((d_N+1)(n_x+n_y), (d_N+2)(n_x+1))
    Hbar1: np.ndarray
    Lbar: np.ndarray       # block diag of d_N+1 copies of L0 L1^+
    Ibar: np.ndarray       # ((d_N+2)(n_x+1), n_x+1) stacked identities
    Lbar0: np.ndarray      # block diag of d_N+1 copies of L0
    Ebar0: np.ndarray      # block diag of d_N+1 copies of E0
    d_N: int
    dae: DaeSystem

    @property
    def n_rows(self) -> int:
        return self.Hbar0.shape[0]

    def decoupling_matrix(self) -> np.ndarray:
        """Hbar(0) Ibar: the equality-constraint matrix of the synthesis."""
        return self.Hbar0 @ self.Ibar

    def sensitivity_matrix(self) -> np.ndarray:
        """Lbar Hbar(1) Ibar: steady fault gain per unknown direction."""
        return self.Lbar @ self.Hbar1 @ self.Ibar


@dataclass(frozen=True)
class FeasibilityReport:
    rank_H0I: int
    null_dim: int
    rank_augmented: int
    equality_feasible: bool
    sensitivity_possible: bool

    def __str__(self):
        return (f"rank(Hbar(0)Ibar) = {self.rank_H0I}, left-null dim = "
                f"{self.null_dim}, rank augmented = {self.rank_augmented}; "
                f"equality_feasible = {self.equality_feasible}, "
                f"sensitivity_possible = {self.sensitivity_possible}")


def numerical_rank(mat: np.ndarray) -> int:
    if mat.size == 0:
        return 0
    s = np.linalg.svd(mat, compute_uv=False)
    tol = max(mat.shape) * np.finfo(float).eps * s[0] if s[0] > 0 else 0.0
    return int((s > tol).sum())


def build_dae(disc_normal: DiscreteModel, disc_faulty: DiscreteModel,
              split: DisturbanceSplit) -> DaeSystem:
    """Assemble H1, H0(f), L(f) and E0 from the sampled models."""
    n_x = disc_normal.A.shape[0]
    n_y, n_u = disc_normal.C.shape[0], disc_normal.B_u.shape[1]
    if disc_faulty.A.shape != disc_normal.A.shape or disc_faulty.Ts != disc_normal.Ts:
        raise ValueError("normal and faulty models must share dimensions and Ts")
    if split.B_hat.shape[0] != n_x:
        raise ValueError("disturbance split rows do not match the state dimension")
    n_hat = split.B_hat.shape[1]
    cols = list(split.decoupled_cols)

    def h0(model, b_hat):
        top = np.hstack([model.A, b_hat])
        bot = np.hstack([model.C, np.zeros((n_y, n_hat))])
        return np.vstack([top, bot])

    # the faulty-mode disturbance map is identically zero, so its hat/check
    # columns vanish no matter which columns were selected
    b_hat_faulty = disc_faulty.B_d[:, cols] if disc_faulty.n_d else np.zeros((n_x, n_hat))
    H1 = np.zeros((n_x + n_y, n_x + n_hat))
    H1[:n_x, :n_x] = -np.eye(n_x)

    def l_of(model):
        top = np.hstack([np.zeros((n_x, n_y)), model.B_u])
        bot = np.hstack([-np.eye(n_y), np.zeros((n_y, n_u))])
        return np.vstack([top, bot])

    E0 = np.vstack([split.B_check, np.zeros((n_y, split.B_check.shape[1]))])
    return DaeSystem(H1=H1,
                     H0_normal=h0(disc_normal, split.B_hat),
                     H0_faulty=h0(disc_faulty, b_hat_faulty),
                     L0=l_of(disc_normal), L1=l_of(disc_faulty), E0=E0,
                     n_x=n_x, n_y=n_y, n_u=n_u)


def left_pseudo_inverse(L1: np.ndarray) -> np.ndarray:
    """(L1^T L1)^{-1} L1^T for a full-column-rank L1."""
    L1 = np.asarray(L1, dtype=float)
    s = np.linalg.svd(L1, compute_uv=False)
    if s[-1] <= max(L1.shape) * np.finfo(float).eps * s[0]:
        raise NumericalError("L1 is column-rank deficient; no left inverse exists")
    gram = L1.T @ L1
    return scipy.linalg.solve(gram, L1.T, assume_a="pos")


def stack_matrices(dae: DaeSystem, d_N: int) -> StackedDae:
    """Build the degree-d_N block stacks."""
    if d_N < 0:
        raise ValueError("numerator degree d_N must be non-negative")
    rows, cols = dae.H0_normal.shape
    blocks = d_N + 1

    def banded(H0):
        out = np.zeros((blocks * rows, (blocks + 1) * cols))
        for i in range(blocks):
            out[i * rows:(i + 1) * rows, i * cols:(i + 1) * cols] = H0
            out[i * rows:(i + 1) * rows, (i + 1) * cols:(i + 2) * cols] = dae.H1
        return out

    LL = dae.L0 @ left_pseudo_inverse(dae.L1)
    eye_blocks = np.eye(blocks)
    return StackedDae(
        Hbar0=banded(dae.H0_normal),
        Hbar1=banded(dae.H0_faulty),
        Lbar=np.kron(eye_blocks, LL),
        Ibar=np.vstack([np.eye(cols)] * (blocks + 1)),
        Lbar0=np.kron(eye_blocks, dae.L0),
        Ebar0=np.kron(eye_blocks, dae.E0),
        d_N=d_N, dae=dae)


def feasibility_check(stacked: StackedDae) -> FeasibilityReport:
    """Rank screening of the synthesis problem.

    The equality constraint has solutions iff the constraint matrix leaves
    a nonzero left null space (rank plus nullity over its row count), and a
    nonzero fault gain is reachable iff the sensitivity matrix adds rank on
    top of the constraint matrix.
    """
    K = stacked.decoupling_matrix()
    rank_k = numerical_rank(K)
    null_dim = stacked.n_rows - rank_k
    rank_aug = numerical_rank(np.hstack([K, stacked.sensitivity_matrix()]))
    return FeasibilityReport(
        rank_H0I=rank_k,
        null_dim=null_dim,
        rank_augmented=rank_aug,
        equality_feasible=null_dim > 0,
        sensitivity_possible=rank_aug > rank_k)


def dump_stacked_csv(stacked: StackedDae, directory) -> list[Path]:
    """Write every stacked matrix to CSV for offline inspection."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    matrices = {
        "Hbar0": stacked.Hbar0, "Hbar1": stacked.Hbar1,
        "Lbar": stacked.Lbar, "Ibar": stacked.Ibar,
        "Lbar0": stacked.Lbar0, "Ebar0": stacked.Ebar0,
        "H0I": stacked.decoupling_matrix(),
        "LH1I": stacked.sensitivity_matrix(),
    }
    for name, mat in matrices.items():
        path = directory / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in np.atleast_2d(mat):
                writer.writerow([repr(float(v)) for v in row])
        written.append(path)
    return written
