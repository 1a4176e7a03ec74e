"""Steady-state hydraulics of an N-layer injection well.

Units throughout: pressure in MPa, flow in m^3/h, nozzle and valve
coefficients in m^3 h^-1 MPa^-1/2.  The only SI quantity is the raw value
returned by :func:`throttle_coefficient`; :func:`nozzle_coefficient` converts
it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, InfeasibleConfigError

# m^3/s per sqrt(Pa)  ->  m^3/h per sqrt(MPa)
SI_TO_FIELD_COEFF = 3600.0 * 1000.0


@dataclass(frozen=True)
class LayerParams:
    absorption_index_inv: float  # k^-1, m^3 h^-1 MPa^-1
    opening_pressure_b: float  # MPa
    nozzle_opening_beta: float = 0.5
    nozzle_flow_param_Cm: float = 0.8
    pipe_inner_diameter_d: float = 0.003  # m
    depth_offset_hd: float = 0.0  # m, to the layer above

    def __post_init__(self):
        if not self.absorption_index_inv > 0:
            raise DomainError("absorption_index_inv must be > 0")
        if not self.opening_pressure_b > 0:
            raise DomainError("opening_pressure_b must be > 0")
        if not 0.0 <= self.nozzle_opening_beta <= 1.0:
            raise DomainError("nozzle_opening_beta must lie in [0, 1]")

    @property
    def k(self) -> float:
        """Pressure rise per unit flow, MPa per m^3/h."""
        return 1.0 / self.absorption_index_inv


@dataclass(frozen=True)
class WellConfig:
    layers: tuple[LayerParams, ...]
    ground_valve_C0: float
    pump_pressure_P0: float
    safety_pressure_Pm: float
    fluid_density_rho: float = 1000.0
    wave_speed_v: float = 1200.0
    unit_tube_length_le: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise InfeasibleConfigError("a well needs at least one layer")
        if not self.ground_valve_C0 > 0:
            raise DomainError("ground_valve_C0 must be > 0")
        if not self.wave_speed_v > 0:
            raise DomainError("wave_speed_v must be > 0")
        if not self.safety_pressure_Pm > self.b_max:
            raise InfeasibleConfigError(
                f"safety pressure {self.safety_pressure_Pm} MPa does not exceed "
                f"the largest opening pressure {self.b_max} MPa")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def b(self) -> np.ndarray:
        return np.array([lay.opening_pressure_b for lay in self.layers])

    @property
    def k(self) -> np.ndarray:
        return np.array([lay.k for lay in self.layers])

    @property
    def b_max(self) -> float:
        return max(lay.opening_pressure_b for lay in self.layers)

    @property
    def b_min(self) -> float:
        return min(lay.opening_pressure_b for lay in self.layers)

    def with_openings(self, betas) -> "WellConfig":
        layers = tuple(replace(lay, nozzle_opening_beta=float(b))
                       for lay, b in zip(self.layers, betas))
        return replace(self, layers=layers)


@dataclass(frozen=True)
class OperatingPoint:
    post_valve_pressure_P: float
    layer_flows_qv: np.ndarray
    total_flow: float
    diagnostic: str | None = None


@dataclass
class ConstraintReport:
    checks: dict[str, bool] = field(default_factory=dict)
    values: dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def violations(self) -> list[str]:
        return [name for name, passed in self.checks.items() if not passed]


def throttle_coefficient(layer: LayerParams, rho: float, beta: float | None = None) -> float:
    """Nozzle throttling coefficient C in SI units (m^3 s^-1 Pa^-1/2).

    ``C = (pi d^2 C_m / 4) sqrt(2 / (rho (1 - beta^2)))``.  ``beta`` defaults
    to the layer's own opening.
    """
    beta = layer.nozzle_opening_beta if beta is None else beta
    d = layer.pipe_inner_diameter_d
    cm = layer.nozzle_flow_param_Cm
    if d <= 0 or cm <= 0 or rho <= 0:
        raise DomainError("diameter, flow parameter and density must be positive")
    if not 0.0 < beta < 1.0:
        raise DomainError(f"opening ratio must lie in (0, 1), got {beta}")
    return math.pi * d * d * cm / 4.0 * math.sqrt(2.0 / (rho * (1.0 - beta * beta)))


def nozzle_coefficient(layer: LayerParams, rho: float, beta: float | None = None) -> float:
    """Throttling coefficient in field units, m^3 h^-1 MPa^-1/2."""
    return throttle_coefficient(layer, rho, beta) * SI_TO_FIELD_COEFF


def nozzle_coefficients(cfg: WellConfig, openings=None) -> np.ndarray:
    if openings is None:
        openings = [lay.nozzle_opening_beta for lay in cfg.layers]
    return np.array([nozzle_coefficient(lay, cfg.fluid_density_rho, b)
                     for lay, b in zip(cfg.layers, openings)])


def layer_pressure(layer: LayerParams, qv: float) -> float:
    """Layer pressure ``p = k q + b`` for injected flow ``qv``."""
    if qv < 0:
        raise DomainError("injected flow must be non-negative")
    return layer.k * qv + layer.opening_pressure_b


def layer_flow_at_pressure(layer: LayerParams, C: float, P: float) -> float:
    """Flow into a layer behind a nozzle of coefficient ``C`` at post-valve pressure ``P``.

    Nonnegative root of ``q^2 + C^2 k q - C^2 (P - b) = 0``; zero below the
    opening pressure.
    """
    if C < 0:
        raise DomainError("nozzle coefficient must be non-negative")
    head = P - layer.opening_pressure_b
    if head <= 0 or C == 0:
        return 0.0
    c2k = C * C * layer.k
    # rationalised form of (C sqrt(C^2 k^2 + 4 head) - C^2 k) / 2, no cancellation
    return 2.0 * C * C * head / (c2k + C * math.sqrt(c2k * layer.k + 4.0 * head))


def layer_flows(cfg: WellConfig, nozzle_coeffs, P: float) -> np.ndarray:
    return np.array([layer_flow_at_pressure(lay, c, P)
                     for lay, c in zip(cfg.layers, nozzle_coeffs)])


def fracturing_flow_range(cfg: WellConfig) -> tuple[float, float]:
    """Bounds on whole-well flow during fracturing with nozzles fully open."""
    if cfg.safety_pressure_Pm <= cfg.b_max:
        raise InfeasibleConfigError("safety pressure must exceed every opening pressure")
    b = cfg.b
    q_low = float(np.sum(cfg.ground_valve_C0 * np.sqrt(cfg.b_max - b)))
    q_high = float(np.sum(cfg.ground_valve_C0 * np.sqrt(cfg.safety_pressure_Pm - b)))
    return q_low, q_high


def min_injection_flow(cfg: WellConfig, nozzle_coeffs) -> float:
    """Lowest whole-well flow that keeps every layer at or above its opening pressure."""
    coeffs = np.asarray(nozzle_coeffs, dtype=float)
    if np.any(coeffs <= 0):
        raise DomainError("nozzle coefficients must be positive")
    total = 0.0
    for lay, c in zip(cfg.layers, coeffs):
        radicand = c * c * lay.k ** 2 + 4.0 * (cfg.b_max - lay.opening_pressure_b)
        assert radicand >= 0.0
        total += (c * math.sqrt(radicand) - c * c * lay.k) / 2.0
    return total


def _residual(cfg, coeffs, P):
    return cfg.ground_valve_C0 * math.sqrt(max(cfg.pump_pressure_P0 - P, 0.0)) \
        - float(np.sum(layer_flows(cfg, coeffs, P)))


def solve_operating_point(cfg: WellConfig, nozzle_coeffs=None) -> OperatingPoint:
    """Post-valve pressure balancing the ground valve against all layer nozzles.

    The valve flow falls and the layer intake rises with ``P``, so the root is
    unique; plain bisection is run down to floating-point resolution.
    """
    coeffs = nozzle_coefficients(cfg) if nozzle_coeffs is None else np.asarray(nozzle_coeffs, float)
    if coeffs.shape != (cfg.n_layers,):
        raise DomainError("one nozzle coefficient per layer is required")
    P0 = cfg.pump_pressure_P0
    n = cfg.n_layers
    if P0 <= cfg.b_min or not np.any(coeffs > 0):
        diag = None if np.any(coeffs > 0) else "all nozzles closed"
        if P0 <= cfg.b_min:
            diag = "pump pressure does not exceed any opening pressure"
        return OperatingPoint(P0, np.zeros(n), 0.0, diag)

    lo, hi = cfg.b_min, P0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _residual(cfg, coeffs, mid) > 0:
            lo = mid
        else:
            hi = mid
    # pick the endpoint with the smaller residual
    P = lo if abs(_residual(cfg, coeffs, lo)) <= abs(_residual(cfg, coeffs, hi)) else hi
    flows = layer_flows(cfg, coeffs, P)
    return OperatingPoint(P, flows, float(flows.sum()))


def check_constraints(cfg: WellConfig, op: OperatingPoint, nozzle_coeffs=None) -> ConstraintReport:
    """Evaluate the injection-window inequalities at an operating point.

    The undefined second lower bound is read as the fracturing lower bound.
    """
    coeffs = nozzle_coefficients(cfg) if nozzle_coeffs is None else np.asarray(nozzle_coeffs, float)
    rep = ConstraintReport()
    q0l = min_injection_flow(cfg, coeffs) if np.all(coeffs > 0) else 0.0
    q_frac_low, _ = fracturing_flow_range(cfg)
    lower = max(q0l, q_frac_low)
    upper = 2.0 * cfg.ground_valve_C0 * math.sqrt(max(cfg.safety_pressure_Pm - cfg.b_min, 0.0))
    rep.values.update(total_flow=op.total_flow, lower_bound=lower, upper_bound=upper,
                      Q0l=q0l, fracturing_low=q_frac_low)
    rep.checks["total_flow_lower"] = op.total_flow >= lower
    rep.checks["total_flow_upper"] = op.total_flow < upper
    for i, (lay, q) in enumerate(zip(cfg.layers, op.layer_flows_qv), start=1):
        limit = cfg.ground_valve_C0 * math.sqrt(max(cfg.safety_pressure_Pm - lay.opening_pressure_b, 0.0))
        rep.values[f"layer{i}_limit"] = limit
        rep.checks[f"layer{i}_flow_limit"] = q < limit
    rep.checks["pressure_below_safety"] = op.post_valve_pressure_P < cfg.safety_pressure_Pm
    return rep


def pressure_flow_curve(cfg: WellConfig, pressures, nozzle_coeffs=None) -> np.ndarray:
    """Layer intake characteristic sampled over post-valve pressures.

    Rows are ``(P, q_1 .. q_N, q_total)`` with ``q_total`` the exact sum of
    the layer columns.
    """
    coeffs = nozzle_coefficients(cfg) if nozzle_coeffs is None else np.asarray(nozzle_coeffs, float)
    pressures = np.sort(np.asarray(pressures, dtype=float))
    rows = np.empty((pressures.size, cfg.n_layers + 2))
    for r, P in enumerate(pressures):
        q = layer_flows(cfg, coeffs, P)
        rows[r, 0] = P
        rows[r, 1:-1] = q
        rows[r, -1] = q.sum()
    return rows


def opening_sweep(cfg: WellConfig, openings, layer: int | None = None) -> list[OperatingPoint]:
    """Operating points as one layer's opening (or every opening) follows ``openings``."""
    points = []
    base = [lay.nozzle_opening_beta for lay in cfg.layers]
    for beta in openings:
        if not 0.0 <= beta <= 1.0:
            raise DomainError("openings must lie in [0, 1]")
        betas = list(base)
        if layer is None:
            betas = [beta] * cfg.n_layers
        else:
            betas[layer] = beta
        coeffs = np.array([0.0 if b == 0 else nozzle_coefficient(lay, cfg.fluid_density_rho, b)
                           for lay, b in zip(cfg.layers, betas)])
        points.append(solve_operating_point(cfg, coeffs))
    return points


def slope_breaks(curve: np.ndarray, column: int = -1, rel_tol: float = 1e-6) -> np.ndarray:
    """Pressures at which layer columns of a sampled curve start rising from zero flow.

    Above its onset a layer obeys ``q^2 = a1 P - a2 q - a3`` (``a1 = C^2``,
    ``a2 = C^2 k``, ``a3 = C^2 b``), which is linear in the unknowns, so three
    positive samples recover the opening pressure ``b = a3 / a1`` exactly.
    """
    P = curve[:, 0]
    onsets = []
    cols = range(1, curve.shape[1] - 1) if column == -1 else [column]
    for c in cols:
        q = curve[:, c]
        pos = np.nonzero(q > rel_tol * max(q.max(), 1e-300))[0]
        if pos.size < 3 or pos[0] == 0:
            continue
        idx = pos[:3]
        M = np.column_stack([P[idx], -q[idx], -np.ones(3)])
        a1, _, a3 = np.linalg.solve(M, q[idx] ** 2)
        onsets.append(a3 / a1)
    return np.array(sorted(onsets))


@dataclass(frozen=True)
class WaveAmplitude:
    delta_q: float  # perturbed layer flow change, m^3/h
    delta_P: float  # post-valve pressure change, MPa
    delta_total: float
    low: OperatingPoint
    high: OperatingPoint


def wavecode_amplitude(cfg: WellConfig, layer_index: int, beta_low: float, beta_high: float) -> WaveAmplitude:
    """Steady flow and pressure swing when one layer's nozzle cycles between two openings."""
    if not 0.0 <= beta_low <= beta_high <= 1.0:
        raise DomainError("need 0 <= beta_low <= beta_high <= 1")
    lo, hi = opening_sweep(cfg, [beta_low, beta_high], layer=layer_index)
    return WaveAmplitude(
        delta_q=float(hi.layer_flows_qv[layer_index] - lo.layer_flows_qv[layer_index]),
        delta_P=hi.post_valve_pressure_P - lo.post_valve_pressure_P,
        delta_total=hi.total_flow - lo.total_flow,
        low=lo, high=hi)


def coupling_derivatives(cfg: WellConfig, nozzle_coeffs=None, rel_step: float = 1e-5) -> np.ndarray:
    """Steady flow interaction matrix ``G[j, i] = dq_j / dq_i`` at fixed openings of j.

    Central differences in layer i's nozzle coefficient; the diagonal is 1.
    """
    coeffs = nozzle_coefficients(cfg) if nozzle_coeffs is None else np.asarray(nozzle_coeffs, float)
    n = cfg.n_layers
    G = np.eye(n)
    for i in range(n):
        h = rel_step * coeffs[i]
        up, dn = coeffs.copy(), coeffs.copy()
        up[i] += h
        dn[i] -= h
        q_up = solve_operating_point(cfg, up).layer_flows_qv
        q_dn = solve_operating_point(cfg, dn).layer_flows_qv
        dq_i = q_up[i] - q_dn[i]
        if dq_i == 0:
            raise DomainError(f"layer {i + 1} is inactive at this operating point")
        for j in range(n):
            if j != i:
                G[j, i] = (q_up[j] - q_dn[j]) / dq_i
    return G


def write_curve_csv(path, curve: np.ndarray) -> None:
    n = curve.shape[1] - 2
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["P_MPa"] + [f"q_layer{i}" for i in range(1, n + 1)] + ["q_total"])
        for row in curve:
            w.writerow([repr(float(v)) for v in row])
