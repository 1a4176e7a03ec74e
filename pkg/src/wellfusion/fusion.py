"""Output-weighted MPC/PID fusion and the three baseline controllers.

All controllers share one calling convention::

    u = ctrl.step(y_meas, setpoint, x_core)

where ``x_core`` is the plant's delay-free state (used only by the
decoupler's state feedback).  ``u`` is the unsaturated plant input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .mpc import MpcConfig, MpcController
from .pid import DecouplerMatrices, PidBank, PidParams, pid_bank_state_space
from .plant import StateSpaceModel


@dataclass(frozen=True)
class FusionWeights:
    """Per-loop weight of the cascade branch; the MPC branch gets ``1 - w``."""

    cascade_weights_w: tuple

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.cascade_weights_w, float))
        if np.any(w < 0) or np.any(w > 1) or not np.all(np.isfinite(w)):
            raise DomainError("fusion weights must lie in [0, 1]")
        object.__setattr__(self, "cascade_weights_w", tuple(w.tolist()))

    @property
    def w(self) -> np.ndarray:
        return np.array(self.cascade_weights_w)

    @property
    def complement(self) -> np.ndarray:
        return 1.0 - self.w


def fuse_outputs(u_c, u_m, weights) -> np.ndarray:
    u_c = np.asarray(u_c, float)
    u_m = np.asarray(u_m, float)
    if u_c.shape != u_m.shape:
        raise DomainError("branch outputs differ in length")
    w = weights.w if isinstance(weights, FusionWeights) else np.asarray(weights, float)
    return w * u_c + (1.0 - w) * u_m


@dataclass
class GeneralizedSystem:
    """Plant, PID bank and decoupler composed into one model driven by ``mu``.

    State layout is ``[plant | pid]``; ``plant_states`` and ``pid_states``
    are the index ranges.
    """

    model: StateSpaceModel
    plant_states: slice
    pid_states: slice
    weights: np.ndarray


def _core_selector(plant: StateSpaceModel) -> np.ndarray:
    core = plant.core_states if plant.core_states is not None else np.arange(plant.n)
    S = np.zeros((len(core), plant.n))
    S[np.arange(len(core)), core] = 1.0
    return S


def build_generalized_system(plant: StateSpaceModel, pid_params, decoupler: DecouplerMatrices,
                             weights) -> GeneralizedSystem:
    """Closed inner loop blended with the direct path, as one discrete model.

    The MPC decision ``mu`` is the inner setpoint and, weighted by
    ``1 - w``, also the direct actuator command.  With PID output ``v`` on
    ``e = mu - y``::

        u = w (G v - K x_core) + (1 - w) mu

    ``w = 0`` leaves the bare plant, ``w = 1`` the PID cascade.
    """
    if not plant.is_discrete:
        raise DomainError("generalized system needs a discrete plant")
    if np.any(plant.D):
        raise DomainError("plant feedthrough is not supported in the inner loop")
    p, m = plant.mimo_o, plant.mimo_i
    pid = pid_bank_state_space(pid_params)
    if pid.mimo_i != p or m != p:
        raise DomainError("PID bank, plant outputs and plant inputs must have equal size")
    w = weights.w if isinstance(weights, FusionWeights) else np.asarray(weights, float)
    w = np.broadcast_to(w, (m,)).astype(float)
    W = np.diag(w)
    G = decoupler.input_gain
    K = decoupler.state_feedback_K @ _core_selector(plant)
    n, nz = plant.n, pid.n
    C = plant.C
    # u = Ux x + Uz z + Umu mu
    Ux = -W @ G @ pid.D @ C - W @ K
    Uz = W @ G @ pid.C
    Umu = W @ G @ pid.D + (np.eye(m) - W)
    A = np.block([[plant.A + plant.B @ Ux, plant.B @ Uz],
                  [-pid.B @ C, pid.A]])
    B = np.vstack([plant.B @ Umu, pid.B])
    Cg = np.hstack([C, np.zeros((p, nz))])
    model = StateSpaceModel(A, B, Cg, np.zeros((p, m)), ts=plant.ts,
                            info={"weights": w.copy()})
    return GeneralizedSystem(model, slice(0, n), slice(n, n + nz), w.copy())


class PidController:
    """Decoupled PID bank tracking the setpoint directly."""

    def __init__(self, pid_params, decoupler: DecouplerMatrices, input_gain=None):
        self.bank = PidBank(pid_params)
        self.decoupler = decoupler
        self.G = decoupler.input_gain if input_gain is None else np.asarray(input_gain, float)
        self.K = decoupler.state_feedback_K if input_gain is None else np.zeros_like(decoupler.state_feedback_K)

    def reset(self):
        self.bank.reset()

    def step(self, y_meas, setpoint, x_core):
        v = self.bank.step(np.asarray(setpoint, float) - np.asarray(y_meas, float))
        return self.G @ v - self.K @ np.asarray(x_core, float)

    def track(self, u_applied, x_core):
        """Rebase the PID increments on the saturated input actually applied."""
        v = np.linalg.solve(self.G, np.asarray(u_applied, float) + self.K @ np.asarray(x_core, float))
        self.bank.track(v)


class MpcOnlyController:
    def __init__(self, plant: StateSpaceModel, cfg: MpcConfig):
        self.mpc = MpcController(plant, cfg)

    def reset(self):
        self.mpc.reset()

    def step(self, y_meas, setpoint, x_core=None):
        return self.mpc.step(y_meas, setpoint)

    def track(self, u_applied, x_core=None):
        n = self.mpc.model.n
        self.mpc.x[n:] = np.asarray(u_applied, float)


class FusionController:
    """MPC over the generalized system, fused with the decoupled PID cascade.

    The MPC is stepped first; its decision ``mu`` is the setpoint of the
    PID bank and the MPC branch of the blend.  Weights 1 give the MPC-PID
    cascade.
    """

    def __init__(self, model_plant: StateSpaceModel, cfg: MpcConfig, pid_params,
                 decoupler: DecouplerMatrices, weights):
        self.weights = weights if isinstance(weights, FusionWeights) else FusionWeights(tuple(np.atleast_1d(weights)))
        self.generalized = build_generalized_system(model_plant, pid_params, decoupler, self.weights)
        self.mpc = MpcController(self.generalized.model, cfg)
        self.bank = PidBank(pid_params)
        self.G = decoupler.input_gain
        self.K = decoupler.state_feedback_K
        self.last_mu = np.zeros(model_plant.mimo_i)
        self.last_uc = np.zeros(model_plant.mimo_i)
        self.last_u = np.zeros(model_plant.mimo_i)

    def reset(self):
        self.mpc.reset()
        self.bank.reset()

    def step(self, y_meas, setpoint, x_core):
        y_meas = np.asarray(y_meas, float)
        mu = self.mpc.step(y_meas, setpoint)
        v = self.bank.step(mu - y_meas)
        u_c = self.G @ v - self.K @ np.asarray(x_core, float)
        self.last_mu, self.last_uc = mu, u_c
        self.last_u = fuse_outputs(u_c, mu, self.weights)
        return self.last_u

    def track(self, u_applied, x_core):
        """Shift both branch histories by the clip excess so their blend equals ``u_applied``."""
        excess = np.asarray(u_applied, float) - self.last_u
        n = self.mpc.model.n
        self.mpc.x[n:] = self.mpc.x[n:] + excess
        v = np.linalg.solve(self.G, self.last_uc + excess + self.K @ np.asarray(x_core, float))
        self.bank.track(v)


def cascade_controller(model_plant, cfg, pid_params, decoupler) -> FusionController:
    return FusionController(model_plant, cfg, pid_params, decoupler,
                            FusionWeights(tuple([1.0] * model_plant.mimo_i)))
