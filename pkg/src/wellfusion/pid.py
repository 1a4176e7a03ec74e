"""Discrete PID bank and static state-feedback decoupler."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DecouplingError, DomainError
from .plant import StateSpaceModel


@dataclass(frozen=True)
class PidParams:
    proportional_Kp: float
    integral_time_Ti: float = math.inf
    derivative_time_Td: float = 0.0
    sampling_period_ts: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.proportional_Kp):
            raise DomainError("Kp must be finite")
        if not self.integral_time_Ti > 0:
            raise DomainError("Ti must be positive (use inf to disable integral action)")
        if self.derivative_time_Td < 0 or not self.sampling_period_ts > 0:
            raise DomainError("need Td >= 0 and ts > 0")

    @property
    def integral_gain(self) -> float:
        """Per-sample integral coefficient ``ts / Ti``."""
        return self.sampling_period_ts / self.integral_time_Ti

    @property
    def derivative_gain(self) -> float:
        return self.derivative_time_Td / self.sampling_period_ts


class PidLoop:
    """Velocity-form PID, derivative acting on the error."""

    def __init__(self, params: PidParams):
        self.params = params
        self.reset()

    def reset(self):
        self.e1 = 0.0
        self.e2 = 0.0
        self.u = 0.0

    def step(self, e: float) -> float:
        p = self.params
        du = p.proportional_Kp * ((e - self.e1) + p.integral_gain * e
                                  + p.derivative_gain * (e - 2.0 * self.e1 + self.e2))
        self.e2, self.e1 = self.e1, e
        self.u += du
        return self.u

    def track(self, u_applied: float) -> None:
        """Continue the increments from the value actually applied."""
        self.u = float(u_applied)


class PidBank:
    def __init__(self, params):
        self.loops = [PidLoop(p) for p in params]

    @property
    def params(self):
        return [lp.params for lp in self.loops]

    def __len__(self):
        return len(self.loops)

    def reset(self):
        for lp in self.loops:
            lp.reset()

    def step(self, errors) -> np.ndarray:
        return np.array([lp.step(float(e)) for lp, e in zip(self.loops, errors)])

    def track(self, values) -> None:
        for lp, v in zip(self.loops, values):
            lp.track(v)


def pid_as_state_space(params: PidParams) -> StateSpaceModel:
    """Discrete realisation reproducing :class:`PidLoop` from rest.

    States are the running error sum of past samples and the previous error;
    either is dropped when its action is disabled.
    """
    kp, ki, kd = params.proportional_Kp, params.integral_gain, params.derivative_gain
    use_i, use_d = ki > 0, kd > 0
    n = int(use_i) + int(use_d)
    A = np.zeros((n, n))
    B = np.zeros((n, 1))
    C = np.zeros((1, n))
    idx = 0
    if use_i:
        A[idx, idx] = 1.0
        B[idx, 0] = 1.0
        C[0, idx] = kp * ki
        idx += 1
    if use_d:
        B[idx, 0] = 1.0
        C[0, idx] = -kp * kd
    D = np.array([[kp * (1.0 + ki + kd)]])
    return StateSpaceModel(A, B, C, D, ts=params.sampling_period_ts)


def block_diag_models(models) -> StateSpaceModel:
    models = list(models)
    n = sum(m.n for m in models)
    mi = sum(m.mimo_i for m in models)
    mo = sum(m.mimo_o for m in models)
    A, B, C, D = np.zeros((n, n)), np.zeros((n, mi)), np.zeros((mo, n)), np.zeros((mo, mi))
    r = ci = co = 0
    for m in models:
        A[r:r + m.n, r:r + m.n] = m.A
        B[r:r + m.n, ci:ci + m.mimo_i] = m.B
        C[co:co + m.mimo_o, r:r + m.n] = m.C
        D[co:co + m.mimo_o, ci:ci + m.mimo_i] = m.D
        r += m.n
        ci += m.mimo_i
        co += m.mimo_o
    return StateSpaceModel(A, B, C, D, ts=models[0].ts if models else 0.0)


def pid_bank_state_space(params) -> StateSpaceModel:
    return block_diag_models(pid_as_state_space(p) for p in params)


@dataclass
class DecouplerMatrices:
    input_transform_M: np.ndarray  # inverse decoupling matrix
    state_feedback_K: np.ndarray
    F: np.ndarray
    canonical_T: np.ndarray
    pole_targets: list
    channel_scale: np.ndarray  # v -> decoupled reference scaling
    relative_degree: np.ndarray

    @property
    def input_gain(self) -> np.ndarray:
        """Matrix mapping PID outputs to plant inputs."""
        return self.input_transform_M @ np.diag(self.channel_scale)

    def control(self, v, x) -> np.ndarray:
        return self.input_gain @ np.asarray(v, float) - self.state_feedback_K @ np.asarray(x, float)

    def closed_loop(self, model: StateSpaceModel) -> StateSpaceModel:
        """Decoupled system ``(A - B K, B M, C)``."""
        return StateSpaceModel(model.A - model.B @ self.state_feedback_K,
                               model.B @ self.input_gain, model.C, ts=model.ts)


def _relative_degree(C_row, A, B, n):
    Ak = np.eye(n)
    scale = max(np.abs(C_row).max(), 1e-300) * max(np.abs(B).max(), 1e-300)
    for d in range(1, n + 1):
        row = C_row @ Ak @ B
        if np.abs(row).max() > 1e-12 * scale * max(1.0, np.abs(Ak).max()):
            return d, row
        Ak = Ak @ A
    return None, None


def compute_decoupler(model: StateSpaceModel, pole_targets, dc_gain=1.0) -> DecouplerMatrices:
    """Input transformation and state feedback that decouple a square plant.

    Each output ``i`` of relative degree ``d_i`` is forced to obey
    ``y_i^(d_i) + a_{d-1} y_i^(d-1) + ... + a_0 y_i = a_0 g_i v_i`` whose
    roots are ``pole_targets[i]``.  ``g_i = dc_gain`` gives each decoupled
    channel that steady gain.  Works for continuous models (derivatives) and
    for discrete ones (shifts; targets are then z-plane poles and the static
    gain uses ``sum(a)``).
    """
    A, B, C = model.A, model.B, model.C
    n, p = model.n, model.mimo_o
    if model.mimo_i != p:
        raise DecouplingError("decoupling needs a square plant")
    gains = np.broadcast_to(np.asarray(dc_gain, float), (p,)).copy()
    E = np.zeros((p, model.mimo_i))
    F = np.zeros((p, n))
    T_rows, ktilde_rows = [], []
    degrees = np.zeros(p, int)
    scale = np.zeros(p)
    for i in range(p):
        d, row = _relative_degree(C[i], A, B, n)
        if d is None:
            raise DecouplingError(f"output {i + 1} is not affected by any input")
        degrees[i] = d
        E[i] = row
        F[i] = C[i] @ np.linalg.matrix_power(A, d)
        targets = np.atleast_1d(pole_targets[i])
        if targets.size != d:
            raise DecouplingError(f"output {i + 1} has relative degree {d}; got {targets.size} pole targets")
        coeffs = np.real(np.poly(targets))  # monic, highest power first
        a = coeffs[::-1][:d]  # a_0 .. a_{d-1}
        krow = np.zeros(n)
        for l in range(d):
            krow += a[l] * (C[i] @ np.linalg.matrix_power(A, l))
            T_rows.append(C[i] @ np.linalg.matrix_power(A, l))
        ktilde_rows.append(krow)
        static = a[0] if not model.is_discrete else float(np.sum(coeffs))
        scale[i] = static * gains[i]
    cond = np.linalg.cond(E)
    if not np.isfinite(cond) or cond > 1e12:
        sv = np.linalg.svd(E, compute_uv=False)
        raise DecouplingError(f"decoupling matrix is singular (smallest singular value {sv[-1]:.3g})")
    M = np.linalg.inv(E)
    ktilde_T = np.array(ktilde_rows)
    K = M @ ktilde_T + M @ F
    T = np.array(T_rows)
    return DecouplerMatrices(M, K, F, T, [np.atleast_1d(t) for t in pole_targets], scale, degrees)
