"""Scenario files: masses, named states, grids, shapes and tolerance overrides."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .core import CollisionError, MassSystem, PhaseState, check_collision_free, reduce_to_center_of_mass
from .horofunctions import Lattice, cone_lattice

SCHEMA_VERSION = 1
BUNDLED = ("kepler-hyperbolic", "kepler-parabolic", "three-body-lagrange-expanding",
           "collision-headon")

_vec = {"type": "array", "items": {"type": "number"}, "minItems": 2}
_bodies = {"type": "array", "items": _vec, "minItems": 2}

SCHEMA = {
    "type": "object",
    "required": ["jmflow_schema", "masses", "dim", "states"],
    "additionalProperties": False,
    "properties": {
        "jmflow_schema": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "description": {"type": "string"},
        "reduced": {"type": "boolean"},
        "masses": {"type": "array", "minItems": 2,
                   "items": {"type": "number", "exclusiveMinimum": 0}},
        "dim": {"type": "integer", "minimum": 2},
        "states": {"type": "object", "minProperties": 1, "additionalProperties": {
            "type": "object", "required": ["q", "v"], "additionalProperties": False,
            "properties": {"q": _bodies, "v": _bodies}}},
        "grids": {"type": "object", "additionalProperties": {"oneOf": [
            {"type": "array", "items": _bodies, "minItems": 1},
            {"type": "object", "required": ["center", "spacing", "per_axis"],
             "additionalProperties": False,
             "properties": {"center": {"oneOf": [_bodies, {"type": "string"}]},
                            "spacing": {"type": "number", "exclusiveMinimum": 0},
                            "per_axis": {"type": "integer", "minimum": 1},
                            "dims": {"type": "integer", "minimum": 1}}}]}},
        "shapes": {"type": "object", "additionalProperties": {
            "type": "object", "required": ["a"], "additionalProperties": False,
            "properties": {"a": _bodies,
                           "alpha": {"type": "number", "exclusiveMinimum": 0,
                                     "exclusiveMaximum": 1},
                           "r": {"type": "number", "exclusiveMinimum": 0}}}},
        "tolerances": {"type": "object", "additionalProperties": {"type": "number"}},
    },
}


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Shape:
    a: np.ndarray
    alpha: float = 0.9
    r: float = 1.0


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    ms: MassSystem
    states: dict
    grids: dict = field(default_factory=dict)  # name -> Lattice or (G, n) array
    shapes: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    reduced: bool = False
    sha256: str = ""
    source: str = ""

    def state(self, name=None) -> PhaseState:
        if name is None:
            name = next(iter(self.states))
        if isinstance(name, int) or (isinstance(name, str) and name.isdigit()):
            name = list(self.states)[int(name)]
        try:
            return self.states[name]
        except KeyError:
            raise ScenarioError(f"unknown state {name!r}; have {sorted(self.states)}") from None

    def grid_points(self, name) -> np.ndarray:
        g = self.grids[name]
        return g.points() if isinstance(g, Lattice) else g

    def tol(self, key, default):
        return float(self.tolerances.get(key, default))


def scenario_path(name_or_path) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    stem = p.name[:-5] if p.name.endswith(".json") else p.name
    if stem in BUNDLED:
        return Path(str(resources.files("jmflow") / "scenarios" / f"{stem}.json"))
    raise ScenarioError(f"scenario {name_or_path!r} not found")


def _line_of(text, path):
    """Best-effort line number of the innermost named key of ``path``."""
    keys = [k for k in path if isinstance(k, str)]
    pos = 0
    for k in keys:
        i = text.find(f'"{k}"', pos)
        if i < 0:
            break
        pos = i
    return text.count("\n", 0, pos) + 1


def load_scenario(name_or_path) -> Scenario:
    path = scenario_path(name_or_path)
    raw = path.read_bytes()
    text = raw.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(doc),
                    key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ScenarioError(f"{path}:{_line_of(text, list(e.absolute_path))}: "
                            f"field {where}: {e.message}")
    ms = MassSystem(doc["masses"], doc["dim"])
    reduced = bool(doc.get("reduced", False))

    def conf(bodies, what):
        a = np.asarray(bodies, float)
        if a.shape != (ms.N, ms.dim):
            raise ScenarioError(f"{what}: expected shape {(ms.N, ms.dim)}, got {a.shape}")
        return a.ravel()

    states = {}
    for nm, st in doc["states"].items():
        q, v = conf(st["q"], f"states/{nm}/q"), conf(st["v"], f"states/{nm}/v")
        try:
            check_collision_free(ms, q, f"state {nm!r}")
        except CollisionError as exc:
            raise CollisionError(f"{path}: {exc}") from None
        s = PhaseState(ms, q, v)
        states[nm] = reduce_to_center_of_mass(ms, s) if reduced else s
    grids = {}
    for nm, g in doc.get("grids", {}).items():
        if isinstance(g, list):
            grids[nm] = np.array([conf(b, f"grids/{nm}") for b in g])
        else:
            c = g["center"]
            if isinstance(c, str):
                if c not in states:
                    raise ScenarioError(f"grids/{nm}/center: unknown state {c!r}")
                center = states[c].q
            else:
                center = conf(c, f"grids/{nm}/center")
            grids[nm] = cone_lattice(ms, center, g["spacing"], g["per_axis"], g.get("dims"))
    shapes = {nm: Shape(conf(s["a"], f"shapes/{nm}/a"), float(s.get("alpha", 0.9)),
                        float(s.get("r", 1.0)))
              for nm, s in doc.get("shapes", {}).items()}
    return Scenario(doc.get("name", path.stem), ms, states, grids, shapes,
                    dict(doc.get("tolerances", {})), reduced,
                    hashlib.sha256(raw).hexdigest(), str(path))
