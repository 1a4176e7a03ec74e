"""Internal-model analysis of the MPC loop and the per-loop weight solver.

The controller of :mod:`wellfusion.mpc` rearranged as internal model
control has three blocks: the equivalent controller ``G_c`` (setpoint minus
filtered correction to decision), the internal model ``G_int`` (decision to
predicted output) and the feedback filter ``G_f`` (prediction error to
correction).  Closing them around the true system ``G_o`` gives the loop
gain ``K(z)`` analysed here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal
from scipy.optimize import minimize_scalar

from .errors import DomainError
from .mpc import MpcConfig, build_prediction_matrices, incremental_model, optimization_coefficient
from .plant import StateSpaceModel

OVERSHOOT_TOL = 0.005


@dataclass
class RationalTransfer:
    """``(d_1 x^(p-1) + ... + d_p) / (x^p + c_1 x^(p-1) + ... + c_p)``."""

    num: np.ndarray
    den: np.ndarray
    domain: str = "s"
    channel: int = 0

    def __post_init__(self):
        self.num = np.atleast_1d(np.asarray(self.num, float))
        self.den = np.atleast_1d(np.asarray(self.den, float))
        if self.den[0] == 0:
            raise DomainError("leading denominator coefficient is zero")
        lead = self.den[0]
        self.den = self.den / lead
        self.num = self.num / lead
        if len(self.num) > len(self.den):
            raise DomainError("transfer function is improper")

    @property
    def order(self) -> int:
        return len(self.den) - 1

    def __call__(self, x):
        return np.polyval(self.num, x) / np.polyval(self.den, x)

    def poles(self):
        return np.roots(self.den)

    def dc_gain(self) -> float:
        x = 0.0 if self.domain == "s" else 1.0
        return float(np.real(self(x)))


@dataclass
class ReducedModel:
    """Second-order ``(beta1 s + beta2) / (s^2 + alpha1 s + alpha2)``."""

    alpha: np.ndarray
    beta: np.ndarray
    order: int = 2
    iterations: int = 0
    fit_error: float = float("nan")

    @property
    def transfer(self) -> RationalTransfer:
        return RationalTransfer(self.beta, np.concatenate([[1.0], self.alpha]))

    def poles(self):
        return np.roots(np.concatenate([[1.0], self.alpha]))

    def dc_gain(self) -> float:
        return float(self.beta[-1] / self.alpha[-1])

    def step(self, t) -> np.ndarray:
        return _reduced_step(*self.alpha, *self.beta, np.asarray(t, float))


# --------------------------------------------------------------------------- IMC blocks

@dataclass
class ImcComponents:
    """Discrete state-space realisations of the three IMC blocks."""

    controller: StateSpaceModel  # G_c: (r - d) -> decision
    internal_model: StateSpaceModel  # G_int: decision -> model output
    feedback_filter: StateSpaceModel  # G_f: prediction error -> correction
    gain: np.ndarray  # optimisation coefficient


def feedback_filter(h, ts: float) -> StateSpaceModel:
    """``d_k = (1 - h) d_{k-1} + h e_k`` per output, i.e. ``h z / (z - 1 + h)``."""
    h = np.atleast_1d(np.asarray(h, float))
    a = np.diag(1.0 - h)
    return StateSpaceModel(a, np.diag(h), a, np.diag(h), ts=ts)


def internal_model_components(model: StateSpaceModel, cfg: MpcConfig) -> ImcComponents:
    """Blocks of the MPC controller built on ``model``."""
    inc = incremental_model(model)
    pm = build_prediction_matrices(inc, cfg.prediction_horizon_Np, cfg.control_horizon_Nm)
    phi = optimization_coefficient(pm, cfg)
    p, m, n = model.mimo_o, model.mimo_i, model.n
    tile = np.kron(np.eye(p), np.ones((pm.Np, 1)))
    Kr = phi @ tile  # du from (r - d)
    Kx = phi @ pm.CA  # du from model state
    Cu = np.hstack([np.zeros((m, n)), np.eye(m)])
    ctrl = StateSpaceModel(inc.A - inc.B @ Kx, inc.B @ Kr, Cu - Kx, Kr, ts=model.ts)
    internal = StateSpaceModel(model.A, model.B, model.C, np.zeros((p, m)), ts=model.ts)
    _, _, h = cfg.expand(p, m)
    return ImcComponents(ctrl, internal, feedback_filter(h, model.ts), phi)


def closed_loop_model(plant: StateSpaceModel, model: StateSpaceModel, cfg: MpcConfig) -> StateSpaceModel:
    """``r -> y`` of the MPC loop in the time domain of :class:`MpcController`.

    ``plant`` is the true system ``G_o``; ``model`` the controller's internal
    model.  States are ``[x_plant, x_model, u_prev, d_prev]``.
    """
    if np.any(plant.D) or np.any(model.D):
        raise DomainError("closed-loop analysis assumes strictly proper systems")
    inc = incremental_model(model)
    pm = build_prediction_matrices(inc, cfg.prediction_horizon_Np, cfg.control_horizon_Nm)
    phi = optimization_coefficient(pm, cfg)
    p, m = model.mimo_o, model.mimo_i
    no, ni = plant.n, inc.n
    _, _, h = cfg.expand(p, m)
    Hd = np.diag(h)
    tile = np.kron(np.eye(p), np.ones((pm.Np, 1)))
    Kr, Kx = phi @ tile, phi @ pm.CA
    # d = (1-H) d_prev + H (Co xo - Cinc xi)
    Dx = np.hstack([Hd @ plant.C, -Hd @ inc.C, np.diag(1.0 - h)])
    # du = Kr r - Kr d - Kx xi
    DUx = -Kr @ Dx + np.hstack([np.zeros((m, no)), -Kx, np.zeros((m, p))])
    Cu = np.hstack([np.zeros((m, no)), np.zeros((m, model.n)), np.eye(m), np.zeros((m, p))])
    MUx = Cu + DUx  # decision = u_prev + du
    N = no + ni + p
    A = np.zeros((N, N))
    B = np.zeros((N, p))
    A[:no] = plant.B @ MUx
    A[:no, :no] += plant.A
    B[:no] = plant.B @ Kr
    A[no:no + ni] = inc.B @ DUx
    A[no:no + ni, no:no + ni] += inc.A
    B[no:no + ni] = inc.B @ Kr
    A[no + ni:] = Dx
    C = np.hstack([plant.C, np.zeros((p, ni + p))])
    return StateSpaceModel(A, B, C, np.zeros((p, p)), ts=plant.ts)


def _freq(sys: StateSpaceModel, z: complex) -> np.ndarray:
    return sys.C @ np.linalg.solve(z * np.eye(sys.n) - sys.A, sys.B) + sys.D


def closed_loop_gain(G_o: StateSpaceModel, comps: ImcComponents, z: complex) -> np.ndarray:
    """``K(z) = G_o [I + G_c G_f (G_o - G_int)]^-1 G_c`` at one point."""
    go = _freq(G_o, z)
    gi = _freq(comps.internal_model, z)
    gc = _freq(comps.controller, z)
    gf = _freq(comps.feedback_filter, z)
    m = gc.shape[0]
    return go @ np.linalg.solve(np.eye(m) + gc @ gf @ (go - gi), gc)


def steady_state_error(cl: StateSpaceModel) -> np.ndarray:
    """``I - K(1)``: the offset left by a unit step on each setpoint."""
    return np.eye(cl.mimo_o) - cl.dc_gain()


def channel(sys: StateSpaceModel, out: int, inp: int) -> StateSpaceModel:
    return StateSpaceModel(sys.A, sys.B[:, inp:inp + 1], sys.C[out:out + 1], sys.D[out:out + 1, inp:inp + 1],
                           ts=sys.ts)


def directed_channel(sys: StateSpaceModel, out: int, direction) -> StateSpaceModel:
    """Output ``out`` under the joint input move ``direction``, scaled to a unit move on ``out``."""
    d = np.asarray(direction, float).ravel()
    if d.shape != (sys.mimo_i,) or d[out] == 0:
        raise DomainError("direction must have one entry per input and move the observed loop")
    d = d / d[out]
    D = np.zeros((sys.mimo_o, sys.mimo_i)) if sys.D is None else sys.D
    return StateSpaceModel(sys.A, (sys.B @ d)[:, None], sys.C[out:out + 1], (D[out:out + 1] @ d)[:, None],
                           ts=sys.ts)


def step_response(sys: StateSpaceModel, n_steps: int) -> np.ndarray:
    """Discrete unit-step response, samples ``y_1 .. y_n`` for every output/input."""
    x = np.zeros((sys.n, sys.mimo_i))
    out = np.zeros((n_steps, sys.mimo_o, sys.mimo_i))
    for k in range(n_steps):
        x = sys.A @ x + sys.B
        out[k] = sys.C @ x + sys.D
    return out


# --------------------------------------------------------------------------- continuous equivalent

def d2c_bilinear(sys: StateSpaceModel) -> StateSpaceModel:
    """Continuous model whose bilinear image is ``sys``."""
    if not sys.is_discrete:
        raise DomainError("model is already continuous")
    n = sys.n
    M = np.eye(n) + sys.A
    if abs(np.linalg.det(M)) < 1e-300 or np.linalg.cond(M) > 1e14:
        raise DomainError("pole at z = -1 has no bilinear preimage")
    Minv = np.linalg.inv(M)
    a = sys.ts / 2.0
    Ac = Minv @ (sys.A - np.eye(n)) / a
    Bc = Minv @ sys.B
    Cc = 2.0 / a * sys.C @ Minv
    Dc = sys.D - sys.C @ Minv @ sys.B
    return StateSpaceModel(Ac, Bc, Cc, Dc)


def continuous_equivalent(sys: StateSpaceModel, out: int = 0, inp: int = 0) -> RationalTransfer:
    """Monic s-domain transfer of one channel (bilinear map for discrete models)."""
    cont = d2c_bilinear(sys) if sys.is_discrete else sys
    ch = channel(cont, out, inp)
    num, den = signal.ss2tf(ch.A, ch.B, ch.C, ch.D)
    return RationalTransfer(np.trim_zeros(num[0], "f") if np.any(num[0]) else [0.0], den,
                            domain="s", channel=out)


# --------------------------------------------------------------------------- reduction

def _reduced_step(alpha1, alpha2, beta1, beta2, t):
    # closed form of C A^-1 (e^{At} - I) b for the companion matrix; vectorised over t
    t = np.asarray(t, float)
    A = np.array([[0.0, 1.0], [-alpha2, -alpha1]])
    c = np.array([beta2, beta1])
    if abs(alpha2) < 1e-12:
        sys = signal.StateSpace(A, [[0.0], [1.0]], [c], [[0.0]])
        return signal.step(sys, T=t)[1] if t[0] == 0 else signal.lsim(sys, np.ones_like(t), t)[1]
    lam1, lam2 = np.roots([1.0, alpha1, alpha2]).astype(complex)
    eye = np.eye(2)
    e1, e2 = np.exp(lam1 * t), np.exp(lam2 * t)
    if abs(lam1 - lam2) > 1e-7 * max(1.0, abs(lam1)):
        expAt = (e1[:, None, None] * (A - lam2 * eye) - e2[:, None, None] * (A - lam1 * eye)) / (lam1 - lam2)
    else:
        lam = 0.5 * (lam1 + lam2)
        expAt = np.exp(lam * t)[:, None, None] * (eye + t[:, None, None] * (A - lam * eye))
    w = c @ np.linalg.inv(A)  # row vector C A^-1
    b = np.array([0.0, 1.0])
    return np.real(np.einsum("i,kij,j->k", w, expAt - eye, b))


def _pair_candidates(poles: np.ndarray, limit: int = 4):
    """Candidate dominant pairs (as (alpha1, alpha2)) from the slowest stable poles."""
    st = poles[poles.real < -1e-9]
    st = st[np.argsort(np.abs(st.real))]
    out = []
    used = []
    for i, p in enumerate(st[:2 * limit]):
        if abs(p.imag) > 1e-9:
            if any(abs(p.conjugate() - q) < 1e-9 for q in used):
                continue
            used.append(p)
            out.append((-2.0 * p.real, abs(p) ** 2))
        else:
            for q in st[i + 1:2 * limit]:
                if abs(q.imag) <= 1e-9:
                    out.append((-(p.real + q.real), p.real * q.real))
                    break
    return out[:limit]


def step_peak_error(y_full: np.ndarray, y_red: np.ndarray) -> float:
    """Peak mismatch as a fraction of the full response's final value."""
    final = y_full[-1] if abs(y_full[-1]) > 1e-12 else 1.0
    return float(abs(np.max(y_full) - np.max(y_red)) / abs(final))


def reduce_order(full: StateSpaceModel, horizon: float, te: float | None = None, iterations: int = 3,
                 r: int = 2) -> ReducedModel:
    """Second-order approximation of a stable SISO loop.

    Starts from dominant pole pairs of the (continuous equivalent of the)
    full model, fixes ``beta2 = alpha2 * DC gain`` and fits the rest to the
    step response by damped Gauss-Newton, ``iterations`` sweeps.
    """
    if r != 2:
        raise DomainError("only second-order reduction is supported")
    if full.mimo_i != 1 or full.mimo_o != 1:
        raise DomainError("reduction works on one channel")
    te = te if te is not None else (full.ts / 10.0 if full.is_discrete else horizon / 2000.0)
    cont = d2c_bilinear(full) if full.is_discrete else full
    if not cont.is_stable():
        raise DomainError("full model is unstable")
    dc = float(full.dc_gain()[0, 0])
    t = np.arange(0.0, horizon + te / 2, te)
    if full.is_discrete:
        ks = np.arange(1, int(round(horizon / full.ts)) + 1)
        yk = step_response(full, len(ks))[:, 0, 0]
        # the held-sample response of the discrete loop, on the fine grid
        y_full = np.interp(t, np.concatenate([[0.0], ks * full.ts]), np.concatenate([[0.0], yk]))
    else:
        _, y_full = signal.step(signal.StateSpace(cont.A, cont.B, cont.C, cont.D), T=t)

    def resid(theta):
        a1, a2, b1 = theta
        return _reduced_step(a1, a2, b1, a2 * dc, t) - y_full

    best = None
    for a1, a2 in _pair_candidates(np.linalg.eigvals(cont.A)) or [(1.0, 1.0)]:
        # beta1 is linear given the pair
        g = _reduced_step(a1, a2, 1.0, 0.0, t)
        base = _reduced_step(a1, a2, 0.0, a2 * dc, t)
        b1 = float(np.dot(g, y_full - base) / max(np.dot(g, g), 1e-300))
        theta = np.array([a1, a2, b1])
        err = float(np.sum(resid(theta) ** 2))
        for _ in range(iterations):
            J = np.empty((len(t), 3))
            r0 = resid(theta)
            for j in range(3):
                dt = 1e-6 * max(abs(theta[j]), 1e-3)
                tp = theta.copy()
                tp[j] += dt
                J[:, j] = (resid(tp) - r0) / dt
            step = np.linalg.lstsq(J, -r0, rcond=None)[0]
            lam = 1.0
            while lam > 1e-4:
                cand = theta + lam * step
                if cand[0] > 0 and cand[1] > 0:
                    e2 = float(np.sum(resid(cand) ** 2))
                    if e2 < err:
                        theta, err = cand, e2
                        break
                lam /= 2
        if best is None or err < best[1]:
            best = (theta, err)
    (a1, a2, b1), err = best
    return ReducedModel(np.array([a1, a2]), np.array([b1, a2 * dc]), 2, iterations,
                        float(np.sqrt(err / len(t))))


# --------------------------------------------------------------------------- discriminant and peak

@dataclass
class Discriminant:
    value: float
    clamped: bool


def overshoot_discriminant(red: ReducedModel) -> Discriminant:
    """``sqrt(1 - a1 b1 / b2 + a2 (b1 / b2)^2)``; negative radicands clamp to 0."""
    a1, a2 = red.alpha
    b1, b2 = red.beta
    rad = 1.0 - a1 * b1 / b2 + a2 * (b1 / b2) ** 2
    if rad < 0:
        return Discriminant(0.0, True)
    return Discriminant(math.sqrt(rad), False)


def damping_parameter(red: ReducedModel) -> float | None:
    """``sqrt(a2 - a1^2 / 4)``, or None when the pair is real (no oscillation)."""
    a1, a2 = red.alpha
    rad = a2 - a1 ** 2 / 4.0
    if rad < 0:
        return None
    return math.sqrt(rad)


def first_peak_time(red: ReducedModel, horizon: float | None = None, te: float | None = None) -> float | None:
    """Smallest ``t > 0`` where the reduced step response peaks (slope turns negative).

    The slope of the step response is the impulse response
    ``e^(-a1 t/2) (b1 cos(d t) + (b2 - a1 b1 / 2) sin(d t) / d)``.
    """
    a1, a2 = red.alpha
    b1, b2 = red.beta
    d = damping_parameter(red)
    if d is None or d == 0:
        # real or repeated poles: the impulse response changes sign at most once
        p = np.roots([1.0, a1, a2]).real
        if d == 0:
            p = np.array([-a1 / 2.0, -a1 / 2.0])
        roots = _real_impulse_zero(p, b1, b2)
        return roots
    c = b2 - a1 * b1 / 2.0
    # b1 cos(dt) + (c/d) sin(dt) = A cos(dt - phi); zero slope at dt = phi + pi/2 + k pi
    phi = math.atan2(c / d, b1)
    tp = (phi + math.pi / 2.0) / d
    while tp <= 1e-12:
        tp += math.pi / d
    if _slope(red, d, tp + 1e-6 / d) > 0:
        tp += math.pi / d
    return tp


def _slope(red: ReducedModel, d: float, t: float) -> float:
    a1, _ = red.alpha
    b1, b2 = red.beta
    return math.exp(-a1 * t / 2.0) * (b1 * math.cos(d * t) + (b2 - a1 * b1 / 2.0) * math.sin(d * t) / d)


def _real_impulse_zero(p, b1, b2):
    if b1 <= 0:
        return None  # slope starts non-positive: any sign change is a minimum
    p1, p2 = p
    if abs(p1 - p2) < 1e-12:
        # (b1 + (b2 + b1 p) t) e^(p t)
        k = b2 + b1 * p1
        if k == 0 or -b1 / k <= 0:
            return None
        return -b1 / k
    # residues of (b1 s + b2) / ((s - p1)(s - p2))
    r1 = (b1 * p1 + b2) / (p1 - p2)
    r2 = (b1 * p2 + b2) / (p2 - p1)
    if r1 * r2 >= 0:
        return None
    t = math.log(-r2 / r1) / (p1 - p2)
    return t if t > 0 else None


def weight_objective(red: ReducedModel) -> float:
    """Peak-timing residual evaluated from the reduced coefficients.

    ``|pi - arctan(2 b1 d / (2 b2 - a1 b1)) - d t_e|`` with the settling
    estimate ``t_e = (8 + 2 ln sigma) / a1``; ``inf`` off the oscillatory
    branch.
    """
    a1, _ = red.alpha
    b1, b2 = red.beta
    d = damping_parameter(red)
    sig = overshoot_discriminant(red).value
    if d is None or sig <= 0:
        return float("inf")
    ts_est = (8.0 + 2.0 * math.log(sig)) / a1
    return abs(math.pi - math.atan2(2.0 * b1 * d, 2.0 * b2 - a1 * b1) - d * ts_est)


# --------------------------------------------------------------------------- solver

@dataclass
class LoopAnalysis:
    w: float
    overshoot: float  # fraction above the final value (full loop)
    settling: float
    peak_time: float | None
    sigma: float
    objective: float
    reduced: ReducedModel | None = None


@dataclass
class WeightSolution:
    loop: int
    w_star: float
    lower_segment: tuple | None
    upper_segment: tuple | None
    branch: str  # "overshoot" or "no-overshoot"
    sigma_at_cascade: float
    w_objective: float
    peak_time: float | None
    settling_time: float
    sweep: list = field(default_factory=list)
    note: str = ""

    def to_dict(self) -> dict:
        return {"loop": self.loop + 1, "w_star": self.w_star, "lower_segment": self.lower_segment,
                "upper_segment": self.upper_segment, "branch": self.branch,
                "sigma_at_w1": self.sigma_at_cascade, "w_objective_argmin": self.w_objective,
                "t_p": self.peak_time, "t_s": self.settling_time, "note": self.note}


def step_metrics(y: np.ndarray, ts: float, band: float = 0.02, target: float | None = 1.0):
    """Overshoot, 2% settling time and first-peak time of a step response.

    Measured against ``target`` (the unit setpoint by default, since the loop
    has unit DC gain); ``target=None`` uses the last sample instead.
    """
    final = y[-1] if target is None else target
    if abs(final) < 1e-12:
        return 0.0, float("inf"), None
    over = max(float(np.max(y) / final - 1.0), 0.0)
    outside = np.nonzero(np.abs(y - final) > band * abs(final))[0]
    settle = 0.0 if outside.size == 0 else float((outside[-1] + 2) * ts)
    dy = np.diff(y)
    peaks = np.nonzero((dy[:-1] > 0) & (dy[1:] <= 0))[0]
    tp = float((peaks[0] + 2) * ts) if peaks.size else None
    return over, settle, tp


class LoopEvaluator:
    """Closed-loop response of one loop as its fusion weight varies."""

    def __init__(self, build_closed_loop, loop: int, horizon: float, ts: float, direction=None):
        self.build = build_closed_loop  # w -> (discrete r->y closed loop)
        self.loop = loop
        self.direction = None if direction is None else np.asarray(direction, float)
        self.horizon = horizon
        self.ts = ts
        self._cache = {}

    def __call__(self, w: float, reduce: bool = False) -> LoopAnalysis:
        key = (round(w, 12), reduce)
        if key in self._cache:
            return self._cache[key]
        full = self.build(w)
        if self.direction is None:
            cl = channel(full, self.loop, self.loop)
        else:
            cl = directed_channel(full, self.loop, self.direction)
        n = int(round(self.horizon / self.ts))
        y = step_response(cl, n)[:, 0, 0]
        over, settle, tp = step_metrics(y, self.ts)
        red, sig, obj = None, float("nan"), float("nan")
        if reduce:
            red = reduce_order(cl, self.horizon)
            sig = overshoot_discriminant(red).value
            obj = weight_objective(red)
        res = LoopAnalysis(w, over, settle, tp, sig, obj, red)
        self._cache[key] = res
        return res


def _refine_boundary(ev: LoopEvaluator, good: float, bad: float, tol: float = 1e-4) -> float:
    while abs(bad - good) > tol:
        mid = 0.5 * (good + bad)
        if ev(mid).overshoot <= OVERSHOOT_TOL:
            good = mid
        else:
            bad = mid
    return good


def optimal_weight(ev: LoopEvaluator, step: float = 0.005) -> WeightSolution:
    """Per-loop weight from the overshoot-discriminant branch rule.

    Admissible weights give an overshoot-free loop (first peak within 0.5%).
    If the cascade end (w = 1) overshoots, the largest weight of the lower
    admissible segment is taken; otherwise the smallest of the upper one.
    """
    grid = np.round(np.arange(step, 1.0, step), 10)
    rows = [ev(w) for w in grid]
    ok = np.array([r.overshoot <= OVERSHOOT_TOL for r in rows])
    cascade = ev(1.0, reduce=True)
    sigma1 = cascade.sigma
    # the simulated cascade response decides the branch; sigma of the reduced model is reported alongside
    overshooting = cascade.overshoot > OVERSHOOT_TOL
    note = ""
    lower = upper = None
    if not ok[0] and ev(0.0).overshoot <= OVERSHOOT_TOL:
        # admissible segment narrower than one grid cell
        lower = (0.0, float(_refine_boundary(ev, 0.0, grid[0], tol=min(1e-4, step / 50))))
    elif ok[0]:
        end = int(np.argmin(ok)) if not ok.all() else len(ok)
        hi = grid[end - 1]
        if end < len(ok):
            hi = _refine_boundary(ev, hi, grid[end])
        lower = (float(grid[0]), float(hi))
    if ok[-1]:
        start = len(ok) - int(np.argmin(ok[::-1])) if not ok.all() else 0
        lo = grid[start]
        if start > 0:
            lo = _refine_boundary(ev, lo, grid[start - 1])
        upper = (float(lo), float(grid[-1]))
    if overshooting:
        branch = "overshoot"
        if lower is not None:
            w_star = lower[1]
        elif ok.any():
            w_star = float(grid[np.nonzero(ok)[0][-1]])
            note = "no admissible segment starts at 0; took the largest admissible grid weight"
        else:
            w_star = float(grid[int(np.argmin([r.overshoot for r in rows]))])
            note = "no overshoot-free weight on the grid; took the least-overshooting weight"
    else:
        branch = "no-overshoot"
        if upper is not None:
            w_star = upper[0]
        elif ok.any():
            w_star = float(grid[np.nonzero(ok)[0][0]])
            note = "no admissible segment reaches 1; took the smallest admissible grid weight"
        else:
            w_star = float(grid[int(np.argmin([r.overshoot for r in rows]))])
            note = "no overshoot-free weight on the grid; took the least-overshooting weight"
    w_star = float(min(max(w_star, 0.0), 1.0 - step))
    # argmin of the peak-timing objective over the grid, refined by golden section
    objs = np.array([_safe_obj(ev, w) for w in grid[::4]])
    w_obj = float("nan")
    if np.isfinite(objs).any():
        i = int(np.nanargmin(np.where(np.isfinite(objs), objs, np.nan)))
        lo_b = grid[::4][max(i - 1, 0)]
        hi_b = grid[::4][min(i + 1, len(objs) - 1)]
        if hi_b > lo_b:
            res = minimize_scalar(lambda w: _safe_obj(ev, w, big=1e6), bounds=(lo_b, hi_b), method="bounded",
                                  options={"xatol": 1e-4})
            w_obj = float(res.x)
        else:
            w_obj = float(lo_b)
    final = ev(w_star)
    sweep = [(r.w, r.overshoot, r.settling) for r in rows]
    return WeightSolution(ev.loop, w_star, lower, upper, branch, float(sigma1), w_obj,
                          final.peak_time, final.settling, sweep, note)


def _safe_obj(ev, w, big=float("inf")):
    try:
        v = ev(float(w), reduce=True).objective
    except (DomainError, np.linalg.LinAlgError, ValueError):
        return big
    return v if np.isfinite(v) else big


# --------------------------------------------------------------------------- scenario level

def scenario_loop_builder(scn):
    """``w -> r-to-y`` closed loop of the fusion controller on ``scn``'s plant.

    The true system is the generalized system around the plant as simulated;
    the controller's copy is built on its (possibly mismatched) model.
    """
    from .fusion import build_generalized_system
    from .plant import discretize
    from .sim import apply_mismatch, build_decoupler, build_plant

    cont, _ = build_plant(scn)
    internal = apply_mismatch(cont, scn.mismatch)
    true_d = discretize(cont, scn.ts)
    model_d = true_d if internal is cont else discretize(internal, scn.ts)
    dec = build_decoupler(scn, internal)

    def build(w) -> StateSpaceModel:
        w = np.broadcast_to(np.asarray(w, float), (scn.n_loops,))
        g_true = build_generalized_system(true_d, scn.pid, dec, w).model
        g_model = g_true if model_d is true_d else build_generalized_system(model_d, scn.pid, dec, w).model
        return closed_loop_model(g_true, g_model, scn.mpc)

    return build


def first_move(scn) -> np.ndarray:
    """Setpoint move of the first tracking phase, from the resting well to the first targets."""
    from .sim import build_plant, setpoints_at

    _, op = build_plant(scn)
    return setpoints_at(scn, 0.0) - np.asarray(op.layer_flows_qv, float)


def loop_evaluator(scn, loop: int, base_weights=None, horizon: float | None = None,
                   direction="first") -> LoopEvaluator:
    """Evaluator for one loop's weight, the other loops held at ``base_weights``.

    ``direction="first"`` analyses the joint setpoint move that opens the
    scenario (falling back to a lone unit step if it leaves this loop still);
    ``None`` always uses the lone unit step.
    """
    if isinstance(direction, str):
        if direction != "first":
            raise DomainError(f"unknown direction {direction!r}")
        direction = first_move(scn)
        if abs(direction[loop]) < 1e-9:
            direction = None
    build = scenario_loop_builder(scn)
    base = np.broadcast_to(np.asarray(scn.weights if base_weights is None else base_weights, float),
                           (scn.n_loops,)).copy()

    def at(w):
        ww = base.copy()
        ww[loop] = w
        return build(ww)

    return LoopEvaluator(at, loop, horizon or min(scn.duration, 300.0), scn.ts, direction)


def optimal_weights(scn, loop_index: int | None = None, step: float = 0.005, base_weights=None,
                    horizon: float | None = None, direction="first", max_sweeps: int = 8, tol: float = 1e-3):
    """Per-loop solutions: one :class:`WeightSolution`, or a list for every loop.

    For all loops the per-loop solves are repeated, each against the others'
    latest weights, until no weight moves by more than ``tol``.
    """
    if loop_index is not None:
        if not 0 <= loop_index < scn.n_loops:
            raise DomainError(f"loop {loop_index} out of range")
        return optimal_weight(loop_evaluator(scn, loop_index, base_weights, horizon, direction), step)
    w = np.broadcast_to(np.asarray(scn.weights if base_weights is None else base_weights, float),
                        (scn.n_loops,)).copy()
    for _ in range(max_sweeps):
        # Gauss-Seidel: a simultaneous update can cycle between two weight sets
        prev = w.copy()
        sols = []
        for i in range(scn.n_loops):
            sols.append(optimal_weight(loop_evaluator(scn, i, w, horizon, direction), step))
            w[i] = sols[-1].w_star
        if np.max(np.abs(w - prev)) <= tol:
            break
    return sols


def write_sweep_csv(path, solutions) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("loop,w,overshoot_pct,t_s\n")
        for sol in solutions:
            for w, over, settle in sol.sweep:
                fh.write(f"{sol.loop + 1},{w!r},{over * 100.0!r},{settle!r}\n")
