"""Online residual generation, alarm logic and false-alarm estimation.

The detector realizes r = N(q) L0 / a(q) [y_tilde, u] as a direct
difference equation: with d_a = deg a(q) > d_N and monic a,

    r(k) = sum_s (N_s L0) z(k - d_a + s) - sum_j a_j r(k - d_a + j)

so each new sample costs one short dot product.  The evaluation J = r^2 is
compared against a fixed threshold; an alarm is raised after eval_window
consecutive exceedances and cleared as soon as J falls back under the
threshold.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .dae import NumericalError
from .simulate import Trace
from .synthesis import Denominator, FilterCoefficients, Threshold, filter_taps


@dataclass(frozen=True)
class AlarmEvent:
    k: int
    J_value: float
    kind: str               # "raised" | "cleared"


class Detector:
    """Stateful streaming realization of a synthesized detection filter.

    One instance serves one stream; it is a sequential recursion and not
    safe to share across threads (independent instances are).
    """

    def __init__(self, taps: np.ndarray, denominator: Denominator,
                 threshold, eval_window: int = 1):
        taps = np.asarray(taps, dtype=float)
        if taps.ndim != 2:
            raise ValueError("taps must be a (d_N+1, n_z) array")
        d_N = taps.shape[0] - 1
        if denominator.degree <= d_N:
            raise ValueError("denominator degree must exceed the numerator "
                             "degree (strictly proper filter)")
        if eval_window < 1:
            raise ValueError("eval_window must be at least 1")
        self.taps = taps
        self.denominator = denominator
        self.threshold = threshold
        self.eval_window = int(eval_window)
        self._a = np.asarray(denominator.coeffs[:-1], dtype=float)
        self.reset()

    @classmethod
    def from_filter(cls, coeffs: FilterCoefficients, L0: np.ndarray,
                    threshold, eval_window: int = 1) -> "Detector":
        return cls(filter_taps(coeffs, L0), coeffs.denominator,
                   threshold, eval_window)

    @property
    def J_th(self) -> float:
        if isinstance(self.threshold, Threshold):
            return self.threshold.J_th
        return float(self.threshold)

    def reset(self):
        d_a, n_z = self.denominator.degree, self.taps.shape[1]
        self._zbuf = np.zeros((d_a, n_z))   # z(k-d_a) .. z(k-1)
        self._rbuf = np.zeros(d_a)          # r(k-d_a) .. r(k-1)
        self._k = 0
        self._streak = 0
        self._active = False
        self._faulted = False
        self.events: list[AlarmEvent] = []

    def push(self, y_tilde, u):
        """Advance one step; returns (r, J, alarm)."""
        if self._faulted:
            raise NumericalError(
                "detector received a non-finite sample; call reset()")
        z = np.concatenate([np.asarray(y_tilde, float).ravel(),
                            np.asarray(u, float).ravel()])
        if not np.all(np.isfinite(z)):
            self._faulted = True
            raise NumericalError(f"non-finite detector input at step {self._k}")
        d_N = self.taps.shape[0] - 1
        r = float(np.sum(self.taps * self._zbuf[:d_N + 1])
                  - np.dot(self._a, self._rbuf))
        self._zbuf[:-1] = self._zbuf[1:]
        self._zbuf[-1] = z
        self._rbuf[:-1] = self._rbuf[1:]
        self._rbuf[-1] = r
        J = r * r
        if J > self.J_th:
            self._streak += 1
            if not self._active and self._streak >= self.eval_window:
                self._active = True
                self.events.append(AlarmEvent(self._k, J, "raised"))
        else:
            self._streak = 0
            if self._active:
                self._active = False
                self.events.append(AlarmEvent(self._k, J, "cleared"))
        self._k += 1
        return r, J, self._active


def batch_residual(taps: np.ndarray, denominator: Denominator,
                   z: np.ndarray) -> np.ndarray:
    """Whole-stream residual through scipy.signal.lfilter.

    Independent of the streaming recursion; the two agree to roundoff and
    cross-validate each other.
    """
    taps = np.asarray(taps, dtype=float)
    z = np.asarray(z, dtype=float)
    d_a = denominator.degree
    d_N = taps.shape[0] - 1
    a_desc = np.asarray(denominator.coeffs[::-1], dtype=float)
    r = np.zeros(z.shape[0])
    for ch in range(z.shape[1]):
        b = np.zeros(d_a + 1)
        b[[d_a - s for s in range(d_N + 1)]] = taps[:, ch]
        r += lfilter(b, a_desc, z[:, ch])
    return r


def run_detection(trace: Trace, det: Detector):
    """Stream a trace through the detector.

    Returns the annotated trace (r, J, alarm columns and the threshold) and
    the list of alarm events; the detection delay relative to the trace's
    fault step, when any, lands in the annotated trace's meta.
    """
    det.reset()
    K = len(trace)
    r = np.empty(K)
    J = np.empty(K)
    alarm = np.zeros(K, dtype=bool)
    for k in range(K):
        r[k], J[k], alarm[k] = det.push(trace.y_tilde[k], trace.u[k])
    events = list(det.events)
    meta = dict(trace.meta)
    fault_step = meta.get("fault_step")
    if fault_step is not None:
        raised = [e.k for e in events if e.kind == "raised" and e.k >= fault_step]
        meta["detection_delay"] = (raised[0] - fault_step) if raised else None
    annotated = dataclasses.replace(trace, r=r, J=J, alarm=alarm,
                                    J_th=det.J_th, meta=meta)
    return annotated, events


def false_alarm_rate(traces, burn_in: int) -> float:
    """Fraction of post-burn-in samples with J above the threshold, pooled
    across fault-free annotated traces."""
    exceed = 0
    total = 0
    for trace in traces:
        if trace.J is None or trace.J_th is None:
            raise ValueError("traces must be annotated by run_detection")
        tail = trace.J[burn_in:]
        exceed += int((tail > trace.J_th).sum())
        total += tail.size
    if total == 0:
        raise ValueError("no samples remain after burn-in")
    return exceed / total
