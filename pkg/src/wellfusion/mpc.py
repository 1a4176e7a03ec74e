"""Unconstrained multivariable state-space MPC with shift/correction.

Stacked vectors are output-major: entry ``o * Np + t`` is output ``o`` at
``t + 1`` steps ahead.  Decision vectors are input-major: ``i * Nm + j`` is
the ``j``-th future increment of input ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, RegularizationError
from .plant import StateSpaceModel


@dataclass(frozen=True)
class MpcConfig:
    prediction_horizon_Np: int = 25
    control_horizon_Nm: int = 1
    error_weights_Q: tuple = (1.0,)
    control_weights_R: tuple = (1.0,)
    correction_H: tuple = (1.0,)

    def __post_init__(self):
        for name in ("error_weights_Q", "control_weights_R", "correction_H"):
            object.__setattr__(self, name, tuple(float(v) for v in np.atleast_1d(getattr(self, name))))
        if not 1 <= self.control_horizon_Nm <= self.prediction_horizon_Np:
            raise DomainError("need 1 <= Nm <= Np")
        q = np.array(self.error_weights_Q)
        if np.any(q < 0) or not np.any(q > 0):
            raise DomainError("error weights must be >= 0 with at least one positive")
        if np.any(np.array(self.control_weights_R) < 0):
            raise DomainError("control weights must be >= 0")
        h = np.array(self.correction_H)
        if np.any(h < 0) or np.any(h > 1):
            raise DomainError("correction coefficients must lie in [0, 1]")

    def expand(self, n_out: int, n_in: int):
        """Per-channel weight vectors broadcast to the model size."""
        q = np.broadcast_to(np.array(self.error_weights_Q), (n_out,)).copy()
        r = np.broadcast_to(np.array(self.control_weights_R), (n_in,)).copy()
        h = np.broadcast_to(np.array(self.correction_H), (n_out,)).copy()
        return q, r, h


@dataclass
class PredictionMatrices:
    """Stacked state powers and the block-Toeplitz forced response.

    ``A_stack`` rows block ``k`` is ``A0^(k+1)``; ``phi[k, j] = A0^(k-j) B0``
    for ``j <= k`` (time-major, as blocks).  ``CA`` and ``Theta`` are the
    output-major output maps ``C0 A_stack`` and ``C0 phi + D0``.
    """

    A_stack: np.ndarray
    phi: np.ndarray
    CA: np.ndarray
    Theta: np.ndarray
    Np: int
    Nm: int
    n_out: int
    n_in: int


def incremental_model(model: StateSpaceModel) -> StateSpaceModel:
    """Model driven by input increments; state ``[x; u_prev]``."""
    n, m = model.n, model.mimo_i
    A = np.block([[model.A, model.B], [np.zeros((m, n)), np.eye(m)]])
    B = np.vstack([model.B, np.eye(m)])
    C = np.hstack([model.C, model.D])
    return StateSpaceModel(A, B, C, model.D, ts=model.ts)


def build_prediction_matrices(model: StateSpaceModel, Np: int, Nm: int) -> PredictionMatrices:
    if not 1 <= Nm <= Np:
        raise DomainError("need 1 <= Nm <= Np")
    A, B, C, D = model.A, model.B, model.C, model.D
    n, m, p = model.n, model.mimo_i, model.mimo_o
    powers = [np.eye(n)]
    for _ in range(Np):
        powers.append(A @ powers[-1])
    A_stack = np.vstack(powers[1:])
    phi = np.zeros((Np * n, Nm * m))
    for k in range(Np):
        for j in range(min(k + 1, Nm)):
            phi[k * n:(k + 1) * n, j * m:(j + 1) * m] = powers[k - j] @ B

    CA = np.zeros((p * Np, n))
    Theta = np.zeros((p * Np, m * Nm))
    for k in range(Np):
        CA_k = C @ powers[k + 1]
        for o in range(p):
            CA[o * Np + k] = CA_k[o]
        for j in range(Nm):
            blk = C @ phi[k * n:(k + 1) * n, j * m:(j + 1) * m]
            if j == k + 1:
                blk = blk + D  # increment applied at the predicted instant
            for o in range(p):
                for i in range(m):
                    Theta[o * Np + k, i * Nm + j] = blk[o, i]
    return PredictionMatrices(A_stack, phi, CA, Theta, Np, Nm, p, m)


def first_move_selector(n_in: int, Nm: int) -> np.ndarray:
    """``L`` with ``L.T @ du`` picking each input's first increment."""
    L = np.zeros((n_in * Nm, n_in))
    for i in range(n_in):
        L[i * Nm, i] = 1.0
    return L


def shift_matrix(Np: int, n_out: int) -> np.ndarray:
    """Block-diagonal per-output shift: ones on the superdiagonal and at (N, N)."""
    S1 = np.eye(Np, k=1)
    S1[-1, -1] = 1.0
    return np.kron(np.eye(n_out), S1)


def _weights(pm: PredictionMatrices, cfg: MpcConfig):
    q, r, _ = cfg.expand(pm.n_out, pm.n_in)
    return np.repeat(q, pm.Np), np.repeat(r, pm.Nm)


def optimal_sequence_gain(pm: PredictionMatrices, cfg: MpcConfig) -> np.ndarray:
    """``[Theta' Q Theta + R]^-1 Theta' Q`` for the whole increment sequence."""
    qd, rd = _weights(pm, cfg)
    ThQ = pm.Theta.T * qd
    normal = ThQ @ pm.Theta + np.diag(rd)
    cond = np.linalg.cond(normal)
    if not np.isfinite(cond) or cond > 1e13:
        raise RegularizationError(f"MPC normal matrix is singular (cond={cond:.3g}); raise R")
    return np.linalg.solve(normal, ThQ)


def optimization_coefficient(pm: PredictionMatrices, cfg: MpcConfig) -> np.ndarray:
    """First-move gain ``L' [Theta' Q Theta + R]^-1 Theta' Q``."""
    return first_move_selector(pm.n_in, pm.Nm).T @ optimal_sequence_gain(pm, cfg)


def predict(pm: PredictionMatrices, x0, du) -> np.ndarray:
    """Stacked outputs from state ``x0`` under increments ``du`` (cold prediction)."""
    x0 = np.asarray(x0, float)
    du = np.asarray(du, float)
    if x0.shape != (pm.CA.shape[1],) or du.shape != (pm.Theta.shape[1],):
        raise DomainError("state or increment vector has the wrong size")
    return pm.CA @ x0 + pm.Theta @ du


def mpc_cost(pm: PredictionMatrices, cfg: MpcConfig, Rw, x0, du) -> float:
    qd, rd = _weights(pm, cfg)
    err = np.asarray(Rw, float) - predict(pm, x0, du)
    du = np.asarray(du, float)
    return float(err @ (qd * err) + du @ (rd * du))


def optimal_increment(pm: PredictionMatrices, cfg: MpcConfig, Rw, x0) -> np.ndarray:
    """First increments minimising the tracking-plus-move cost."""
    return optimization_coefficient(pm, cfg) @ (np.asarray(Rw, float) - pm.CA @ np.asarray(x0, float))


@dataclass
class PredictionState:
    predicted: np.ndarray  # stacked (output-major) prediction
    S: np.ndarray
    L: np.ndarray


def shift_and_correct(ps: PredictionState, y_meas, h, Np: int) -> PredictionState:
    """Roll the prediction one step and spread the new error over the horizon."""
    y_meas = np.asarray(y_meas, float)
    first = ps.predicted[::Np]
    corr = np.repeat(np.asarray(h, float) * (y_meas - first), Np)
    return PredictionState(ps.S @ ps.predicted + corr, ps.S, ps.L)


class MpcController:
    """Receding-horizon controller over a discrete model.

    The internal model is run on the controller's own moves; a per-output
    bias ``d`` is corrected each step by ``H`` times the one-step prediction
    error, which is the shift/correct update evaluated on an exact model
    prediction instead of a shifted one.
    """

    def __init__(self, model: StateSpaceModel, cfg: MpcConfig):
        if not model.is_discrete:
            raise DomainError("MPC needs a discrete model")
        self.model = model
        self.cfg = cfg
        self.inc = incremental_model(model)
        self.pm = build_prediction_matrices(self.inc, cfg.prediction_horizon_Np, cfg.control_horizon_Nm)
        self.gain = optimization_coefficient(self.pm, cfg)
        _, _, self.h = cfg.expand(model.mimo_o, model.mimo_i)
        self.reset()

    @property
    def Np(self):
        return self.cfg.prediction_horizon_Np

    def reset(self):
        self.x = np.zeros(self.inc.n)
        self.bias = np.zeros(self.model.mimo_o)
        self.y_next = np.zeros(self.model.mimo_o)
        self.trajectory = np.zeros(self.model.mimo_o * self.Np)
        self.last_increment = np.zeros(self.model.mimo_i)

    @property
    def u(self) -> np.ndarray:
        return self.x[self.model.n:].copy()

    def step(self, y_meas, setpoint) -> np.ndarray:
        y_meas = np.asarray(y_meas, float)
        self.bias = self.bias + self.h * (y_meas - self.y_next)
        free = self.pm.CA @ self.x + np.repeat(self.bias, self.Np)
        Rw = np.repeat(np.asarray(setpoint, float), self.Np)
        du = self.gain @ (Rw - free)
        self.last_increment = du
        dfull = np.zeros(self.pm.Theta.shape[1])
        dfull[::self.cfg.control_horizon_Nm] = du
        self.trajectory = free + self.pm.Theta @ dfull
        self.x = self.inc.A @ self.x + self.inc.B @ du
        self.y_next = self.inc.C @ self.x + self.bias
        return self.u
