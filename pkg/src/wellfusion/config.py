"""JSON documents for wells and scenarios.

Keys mirror the dataclass field names.  A scenario document looks like::

    {"name": "...", "ts": 1.0, "duration": 700,
     "well": {...}, "valves": [{...}, ...],
     "mpc": {...}, "pid": [{...}, ...], "decoupler": {...},
     "controller": {"type": "fusion", "weights": [...]},
     "setpoints": [[[0, 2.0], [150, 1.0]], ...],
     "disturbances": [{"time": 450, "magnitude": 0.14, "loop": null}],
     "sampling_jitter": null, "model_mismatch": null,
     "saturation": [-1, 1], "pump": {...}}

``loop`` indices in documents are 1-based, like the CLI.
"""

from __future__ import annotations

import dataclasses
import json
from importlib import resources
from pathlib import Path

from .errors import ConfigError, WellFusionError
from .mpc import MpcConfig
from .pid import PidParams
from .plant import ValveDynamics
from .sim import (DecouplerSpec, Disturbance, JitterSpec, MismatchSpec, PumpParams, Scenario)
from .well_model import LayerParams, WellConfig


def _build(cls, doc, where: str, **extra):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in doc.items()}
    kwargs.update(extra)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except WellFusionError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from None


def _as_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _as_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_as_dict(v) for v in obj]
    if hasattr(obj, "item"):  # numpy scalar
        return obj.item()
    return obj


def well_from_dict(doc: dict) -> WellConfig:
    if "well" in doc and "layers" not in doc:
        doc = doc["well"]
    doc = dict(doc)
    layers = doc.pop("layers", None)
    if not layers:
        raise ConfigError("well: 'layers' must be a non-empty list")
    built = tuple(_build(LayerParams, lay, f"well.layers[{i}]") for i, lay in enumerate(layers))
    return _build(WellConfig, doc, "well", layers=built)


def well_to_dict(well: WellConfig) -> dict:
    return _as_dict(well)


def _nested(v):
    return tuple(tuple(_nested(x)) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v


def scenario_from_dict(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise ConfigError("scenario: expected an object")
    required = ("well", "valves", "mpc", "pid", "decoupler", "setpoints")
    missing = [k for k in required if k not in doc]
    if missing:
        raise ConfigError(f"scenario: missing keys {missing}")
    known = set(required) | {"name", "ts", "duration", "controller", "disturbances", "sampling_jitter",
                             "model_mismatch", "saturation", "pump", "description"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"scenario: unknown keys {sorted(unknown)}")
    ts = float(doc.get("ts", 1.0))
    well = well_from_dict(doc["well"])
    valves = tuple(_build(ValveDynamics, v, f"valves[{i}]") for i, v in enumerate(doc["valves"]))
    mpc = _build(MpcConfig, doc["mpc"], "mpc")
    pid = tuple(_build(PidParams, p, f"pid[{i}]", sampling_period_ts=p.get("sampling_period_ts", ts))
                for i, p in enumerate(doc["pid"]))
    dec = doc["decoupler"]
    if not isinstance(dec, dict) or "pole_targets" not in dec:
        raise ConfigError("decoupler: needs 'pole_targets'")
    decoupler = DecouplerSpec(_nested(dec["pole_targets"]), tuple(dec.get("dc_gain", (1.0,))))
    ctrl = doc.get("controller", {"type": "fusion"})
    if isinstance(ctrl, str):
        ctrl = {"type": ctrl}
    kind = ctrl.get("type", "fusion")
    weights = tuple(ctrl.get("weights", (0.5,)))
    setpoints = tuple(tuple((float(t), float(v)) for t, v in sched) for sched in doc["setpoints"])
    dists = []
    for i, d in enumerate(doc.get("disturbances", [])):
        d = dict(d)
        loop = d.pop("loop", None)
        if loop is not None:
            if not isinstance(loop, int) or loop < 1:
                raise ConfigError(f"disturbances[{i}]: loop must be a 1-based index")
            loop -= 1
        dists.append(_build(Disturbance, d, f"disturbances[{i}]", loop=loop))
    jitter = doc.get("sampling_jitter")
    if jitter is not None:
        if "seed" not in jitter:
            raise ConfigError("sampling_jitter: a seed is required")
        jitter = _build(JitterSpec, jitter, "sampling_jitter")
    mismatch = doc.get("model_mismatch")
    if mismatch is not None:
        mismatch = _build(MismatchSpec, mismatch, "model_mismatch")
    pump = _build(PumpParams, doc["pump"], "pump") if "pump" in doc else PumpParams()
    try:
        return Scenario(well=well, valves=valves, mpc=mpc, pid=pid, decoupler=decoupler, setpoints=setpoints,
                        controller=kind, weights=weights, ts=ts, duration=float(doc.get("duration", 700.0)),
                        disturbances=tuple(dists), jitter=jitter, mismatch=mismatch,
                        saturation=tuple(doc.get("saturation", (-1.0, 1.0))), pump=pump,
                        name=str(doc.get("name", "scenario")))
    except WellFusionError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"scenario: {exc}") from None


def scenario_to_dict(scn: Scenario) -> dict:
    doc = {
        "name": scn.name,
        "ts": scn.ts,
        "duration": scn.duration,
        "well": well_to_dict(scn.well),
        "valves": _as_dict(scn.valves),
        "mpc": _as_dict(scn.mpc),
        "pid": [{k: v for k, v in _as_dict(p).items() if k != "sampling_period_ts"} for p in scn.pid],
        "decoupler": _as_dict(scn.decoupler),
        "controller": {"type": scn.controller, "weights": list(scn.weights)},
        "setpoints": _as_dict(scn.setpoints),
        "disturbances": [{"time": d.time, "magnitude": d.magnitude,
                          "loop": None if d.loop is None else d.loop + 1} for d in scn.disturbances],
        "sampling_jitter": _as_dict(scn.jitter) if scn.jitter else None,
        "model_mismatch": _as_dict(scn.mismatch) if scn.mismatch else None,
        "saturation": list(scn.saturation),
        "pump": _as_dict(scn.pump),
    }
    return doc


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def load_well(path) -> WellConfig:
    return well_from_dict(read_json(path))


def load_scenario(path) -> Scenario:
    return scenario_from_dict(read_json(path))


def save_scenario(scn: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(scn), indent=2) + "\n", encoding="utf-8")


def data_path(name: str) -> Path:
    return Path(str(resources.files("wellfusion") / "data" / name))


def reference_scenario() -> Scenario:
    return load_scenario(data_path("reference_scenario.json"))


def reference_well() -> WellConfig:
    return load_well(data_path("reference_well.json"))
