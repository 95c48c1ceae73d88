"""Scenario files: schema, loading, and randomized generation.

A scenario is a self-contained JSON document (version "v1") holding the
grid, both barriers, the terminal variable, the driver, and optional
tolerance overrides.  Barriers and terminals come either from small
catalogs (constant / affine in the walk) or as explicit per-node tables;
the randomized generator always emits tables so that a generated file
replays exactly with no generator code in the loop.

Generated scenarios respect the lattice constraints the order-theoretic
laws need: the z-Lipschitz constant is capped at 0.9/sqrt(dt) (one-step
comparison fails beyond 1/sqrt(dt)) and positive monotonicity stays below
1/dt (implicit step solvability).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from jsonschema import Draft202012Validator

from .expectation import (
    Driver,
    constant_driver,
    linear_driver,
    polynomial_driver,
    truncated_driver,
)
from .lattice import OptionalProcess, TwoPhaseTree, build_tree
from .reflect import Barriers

__all__ = [
    "Scenario",
    "ScenarioError",
    "DEFAULT_TOLERANCES",
    "SCENARIO_SCHEMA",
    "load_scenario",
    "scenario_from_dict",
    "random_scenario",
]

DEFAULT_TOLERANCES: dict[str, float | int] = {
    "tol_root": 1e-12,
    "tol_comp": 1e-10,
    "tol_conv": 1e-8,
    "tol_game": 1e-8,
    "max_iter": 200,
    "enum_bound": 3,
}

_NUM = {"type": "number"}

SCENARIO_SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "steps", "dt", "lower", "upper", "terminal", "driver"],
    "properties": {
        "version": {"const": "v1"},
        "name": {"type": "string"},
        "steps": {"type": "integer", "minimum": 1},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "lower": {"type": "object", "required": ["kind"]},
        "upper": {"type": "object", "required": ["kind"]},
        "terminal": {"type": "object", "required": ["kind"]},
        "driver": {"type": "object", "required": ["kind"]},
        "tolerances": {
            "type": "object",
            "properties": {k: _NUM for k in DEFAULT_TOLERANCES},
            "additionalProperties": False,
        },
        "seed": {"type": "integer"},
    },
}

_BARRIER_SCHEMAS: dict[str, dict[str, Any]] = {
    "constant": {"type": "object", "required": ["kind", "value"],
                 "properties": {"kind": {}, "value": _NUM}, "additionalProperties": False},
    "affine": {"type": "object", "required": ["kind", "intercept", "slope"],
               "properties": {"kind": {}, "intercept": _NUM, "slope": _NUM, "time_coef": _NUM},
               "additionalProperties": False},
    "table": {"type": "object", "required": ["kind", "at", "after"],
              "properties": {"kind": {},
                             "at": {"type": "array", "items": {"type": "array", "items": _NUM}},
                             "after": {"type": "array", "items": {"type": "array", "items": _NUM}}},
              "additionalProperties": False},
}

_TERMINAL_SCHEMAS: dict[str, dict[str, Any]] = {
    "constant": _BARRIER_SCHEMAS["constant"],
    "affine": {"type": "object", "required": ["kind", "intercept", "slope"],
               "properties": {"kind": {}, "intercept": _NUM, "slope": _NUM},
               "additionalProperties": False},
    "table": {"type": "object", "required": ["kind", "values"],
              "properties": {"kind": {}, "values": {"type": "array", "items": _NUM}},
              "additionalProperties": False},
}

_DRIVER_SCHEMAS: dict[str, dict[str, Any]] = {
    "constant": {"type": "object", "required": ["kind", "value"],
                 "properties": {"kind": {}, "value": _NUM}, "additionalProperties": False},
    "linear": {"type": "object", "required": ["kind"],
               "properties": {"kind": {}, "const": _NUM, "y_coef": _NUM, "z_coef": _NUM},
               "additionalProperties": False},
    "truncated": {"type": "object", "required": ["kind", "bound"],
                  "properties": {"kind": {}, "const": _NUM, "y_coef": _NUM, "z_coef": _NUM,
                                 "bound": {"type": "number", "exclusiveMinimum": 0}},
                  "additionalProperties": False},
    "polynomial": {"type": "object", "required": ["kind", "terms", "lambda_z", "mu"],
                   "properties": {"kind": {},
                                  "terms": {"type": "array",
                                            "items": {"type": "array", "minItems": 3, "maxItems": 3,
                                                      "prefixItems": [{"type": "integer", "minimum": 0},
                                                                      {"type": "integer", "minimum": 0},
                                                                      _NUM]}},
                                  "lambda_z": {"type": "number", "minimum": 0},
                                  "mu": _NUM,
                                  "z_growth": {"type": "object",
                                               "required": ["gamma", "eta", "g_bound"],
                                               "properties": {"gamma": {"type": "number", "minimum": 0},
                                                              "eta": {"type": "number", "minimum": 0,
                                                                      "exclusiveMaximum": 1},
                                                              "g_bound": {"type": "number", "minimum": 0}},
                                               "additionalProperties": False}},
                   "additionalProperties": False},
}


class ScenarioError(ValueError):
    """Scenario file rejected; the message carries a JSON-pointer path."""


def _pointer(base: str, path: Any) -> str:
    parts = [str(p) for p in path]
    return base + ("/" + "/".join(parts) if parts else "")


def _validate(instance: Any, schema: dict[str, Any], base: str) -> None:
    errors = sorted(Draft202012Validator(schema).iter_errors(instance),
                    key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ScenarioError(f"{_pointer(base, err.absolute_path) or '/'}: {err.message}")


def _check_kind(spec: dict[str, Any], catalog: dict[str, Any], base: str, what: str) -> str:
    kind = spec.get("kind")
    if kind not in catalog:
        names = ", ".join(sorted(catalog))
        raise ScenarioError(f"{base}/kind: unknown {what} {kind!r}; catalog: {names}")
    _validate(spec, catalog[kind], base)
    return kind


def _table_process(tree: TwoPhaseTree, spec: dict[str, Any], base: str) -> OptionalProcess:
    at_rows, after_rows = spec["at"], spec["after"]
    if len(at_rows) != tree.n_steps + 1:
        raise ScenarioError(f"{base}/at: expected {tree.n_steps + 1} rows, got {len(at_rows)}")
    if len(after_rows) != tree.n_steps:
        raise ScenarioError(f"{base}/after: expected {tree.n_steps} rows, got {len(after_rows)}")
    for k, row in enumerate(at_rows):
        if len(row) != tree.nodes_at(k):
            raise ScenarioError(f"{base}/at/{k}: expected {tree.nodes_at(k)} values, got {len(row)}")
    for k, row in enumerate(after_rows):
        if len(row) != tree.nodes_at(k):
            raise ScenarioError(f"{base}/after/{k}: expected {tree.nodes_at(k)} values, got {len(row)}")
    return OptionalProcess(tree, [np.asarray(r, dtype=float) for r in at_rows],
                           [np.asarray(r, dtype=float) for r in after_rows])


def _barrier_process(tree: TwoPhaseTree, spec: dict[str, Any], base: str) -> OptionalProcess:
    kind = _check_kind(spec, _BARRIER_SCHEMAS, base, "barrier kind")
    if kind == "constant":
        return OptionalProcess.from_constant(tree, spec["value"])
    if kind == "affine":
        a, b, c = spec["intercept"], spec["slope"], spec.get("time_coef", 0.0)
        # the AFTER slot sits on the open interval and keeps the interval's
        # left-endpoint time
        return OptionalProcess.from_callable(
            tree, lambda step, phase, walk: a + b * walk + c * step * tree.dt)
    return _table_process(tree, spec, base)


def _terminal_values(tree: TwoPhaseTree, spec: dict[str, Any], base: str) -> np.ndarray:
    kind = _check_kind(spec, _TERMINAL_SCHEMAS, base, "terminal kind")
    if kind == "constant":
        return np.full(tree.n_leaves, float(spec["value"]))
    if kind == "affine":
        return spec["intercept"] + spec["slope"] * tree.brownian(tree.n_steps)
    values = spec["values"]
    if len(values) != tree.n_leaves:
        raise ScenarioError(f"{base}/values: expected {tree.n_leaves} values, got {len(values)}")
    return np.asarray(values, dtype=float)


def _build_driver(spec: dict[str, Any], base: str) -> Driver:
    kind = _check_kind(spec, _DRIVER_SCHEMAS, base, "driver")
    if kind == "constant":
        return constant_driver(spec["value"])
    if kind == "linear":
        return linear_driver(spec.get("const", 0.0), spec.get("y_coef", 0.0), spec.get("z_coef", 0.0))
    if kind == "truncated":
        return truncated_driver(spec.get("const", 0.0), spec.get("y_coef", 0.0),
                                spec.get("z_coef", 0.0), spec["bound"])
    zg = spec.get("z_growth")
    z_growth = (zg["gamma"], zg["eta"], zg["g_bound"]) if zg else None
    terms = [(int(i), int(j), float(c)) for i, j, c in spec["terms"]]
    return polynomial_driver(terms, lambda_z=spec["lambda_z"], mu=spec["mu"], z_growth=z_growth)


@dataclass
class Scenario:
    """A fully materialized experiment input."""

    name: str
    tree: TwoPhaseTree
    barriers: Barriers
    driver: Driver
    tolerances: dict[str, float | int] = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    seed: int | None = None
    data: dict[str, Any] = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return self.tree.n_steps

    @property
    def dt(self) -> float:
        return self.tree.dt


def scenario_from_dict(data: dict[str, Any]) -> Scenario:
    """Materialize a scenario document, validating schema then invariants."""
    _validate(data, SCENARIO_SCHEMA, "")
    tree = build_tree(int(data["steps"]), float(data["dt"]))
    lower = _barrier_process(tree, data["lower"], "/lower")
    upper = _barrier_process(tree, data["upper"], "/upper")
    terminal = _terminal_values(tree, data["terminal"], "/terminal")
    try:
        barriers = Barriers(lower, upper, terminal)
    except ValueError as exc:
        raise ScenarioError(f"/lower,/upper: {exc}") from None
    driver = _build_driver(data["driver"], "/driver")
    tolerances = dict(DEFAULT_TOLERANCES)
    tolerances.update(data.get("tolerances", {}))
    tolerances["max_iter"] = int(tolerances["max_iter"])
    tolerances["enum_bound"] = int(tolerances["enum_bound"])
    name = data.get("name") or "scenario"
    return Scenario(name=name, tree=tree, barriers=barriers, driver=driver,
                    tolerances=tolerances, seed=data.get("seed"), data=data)


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ScenarioError("/: scenario document must be a JSON object")
    scenario = scenario_from_dict(data)
    if not data.get("name"):
        scenario.name = path.stem
    return scenario


def _tables(tree: TwoPhaseTree, proc: OptionalProcess) -> dict[str, Any]:
    return {"kind": "table",
            "at": [[float(v) for v in proc.at[k]] for k in range(tree.n_steps + 1)],
            "after": [[float(v) for v in proc.after[k]] for k in range(tree.n_steps)]}


def random_scenario(seed: int, *, n_steps: int | None = None, dt: float | None = None,
                    driver_kind: str | None = None,
                    lower_right_usc: bool | None = None, lower_left_usc: bool | None = None,
                    upper_right_lsc: bool | None = None, upper_left_lsc: bool | None = None,
                    touching: bool = False, name: str | None = None) -> Scenario:
    """Draw a valid scenario with controllable barrier regularity.

    Each semicontinuity argument is three-valued: True enforces the flag,
    False plants at least one strict violation, None leaves the raw noise
    as it falls.  ``touching`` collapses the barrier gap to zero at one
    random point (the strict-separation failure witness for the midpoint
    construction).  Violation planting may disturb a *different* flag on a
    neighbouring slot, so callers should not request contradictory combos.
    """
    rng = np.random.default_rng(seed)
    n = int(n_steps) if n_steps is not None else int(rng.integers(1, 4))
    dt_val = float(dt) if dt is not None else float(rng.uniform(0.1, 1.0))
    tree = build_tree(n, dt_val)

    sigma = rng.uniform(0.2, 0.8)
    base = rng.uniform(-1.0, 0.0)
    trend = rng.uniform(-0.3, 0.3)
    low_at = [base + sigma * tree.brownian(k) + trend * k * dt_val
              + rng.normal(0.0, 0.25, tree.nodes_at(k)) for k in range(n + 1)]
    low_after = [base + sigma * tree.brownian(k) + trend * k * dt_val
                 + rng.normal(0.0, 0.25, tree.nodes_at(k)) for k in range(n)]
    for k in range(n):
        if lower_right_usc:
            low_after[k] = np.minimum(low_after[k], low_at[k])
        if lower_left_usc:
            low_at[k + 1] = np.maximum(low_at[k + 1], np.repeat(low_after[k], 2))
    if lower_right_usc is False:
        k = int(rng.integers(0, n))
        v = int(rng.integers(0, tree.nodes_at(k)))
        low_after[k][v] = low_at[k][v] + rng.uniform(0.3, 0.8)
    if lower_left_usc is False:
        k = int(rng.integers(0, n))
        v = int(rng.integers(0, tree.nodes_at(k)))
        low_at[k + 1][2 * v] = low_after[k][v] - rng.uniform(0.3, 0.8)

    gap_at = [rng.uniform(0.4, 1.2, tree.nodes_at(k)) for k in range(n + 1)]
    gap_after = [rng.uniform(0.4, 1.2, tree.nodes_at(k)) for k in range(n)]
    for k in range(n):
        # keep the upper barrier at a grid time above the lower barrier's
        # interval value just after it; a lower right-limit poking above
        # the current upper value makes stop-tie reads exceed what the
        # minimizer can defend, and the game detaches from the reflected
        # solution (see games.value_identity_applicable)
        gap_at[k] = np.maximum(gap_at[k], low_after[k] - low_at[k] + 0.05)
    for k in range(n):
        if upper_right_lsc:
            need = gap_at[k] + (low_at[k] - low_after[k])
            gap_after[k] = np.maximum(gap_after[k], need + 0.05)
        if upper_left_lsc:
            child_need = gap_at[k + 1] + (low_at[k + 1] - np.repeat(low_after[k], 2))
            need = np.maximum(child_need[0::2], child_need[1::2])
            gap_after[k] = np.maximum(gap_after[k], need + 0.05)
    up_at = [low_at[k] + gap_at[k] for k in range(n + 1)]
    up_after = [low_after[k] + gap_after[k] for k in range(n)]
    if upper_right_lsc is False:
        k = int(rng.integers(0, n))
        v = int(rng.integers(0, tree.nodes_at(k)))
        # raising above the right limit plants the violation; the floor
        # keeps the slot above the lower barrier when its grid-time noise
        # landed far above its interval noise
        up_at[k][v] = max(up_after[k][v] + rng.uniform(0.3, 0.8), low_at[k][v] + 0.05)
    if upper_left_lsc is False:
        k = int(rng.integers(0, n))
        v = int(rng.integers(0, tree.nodes_at(k)))
        # any value above up_after[k][v] violates the left flag; the floors
        # keep the barrier pair valid and the stop-tie reads defendable
        floor = low_at[k + 1][2 * v] + 0.05
        if k + 1 < n:
            floor = max(floor, low_after[k + 1][2 * v] + 0.05)
        up_at[k + 1][2 * v] = max(up_after[k][v] + rng.uniform(0.3, 0.8), floor)
    if touching:
        key = int(rng.integers(0, 2 * n + 1))
        step, ph = key >> 1, key & 1
        v = int(rng.integers(0, tree.nodes_at(step)))
        if ph == 0:
            up_at[step][v] = low_at[step][v]
        else:
            up_after[step][v] = low_after[step][v]

    u = rng.uniform(0.0, 1.0, tree.n_leaves)
    terminal = low_at[n] + u * (up_at[n] - low_at[n])

    kind = driver_kind or str(rng.choice(["constant", "linear", "truncated"]))
    z_cap = 0.9 / math.sqrt(dt_val)
    y_cap = min(0.5, 0.9 / dt_val)
    if kind == "constant":
        driver_spec: dict[str, Any] = {"kind": "constant", "value": float(rng.uniform(-1.0, 1.0))}
    elif kind == "linear":
        driver_spec = {"kind": "linear", "const": float(rng.uniform(-0.5, 0.5)),
                       "y_coef": float(rng.uniform(-1.5, y_cap)),
                       "z_coef": float(rng.uniform(-z_cap, z_cap))}
    elif kind == "truncated":
        driver_spec = {"kind": "truncated", "const": float(rng.uniform(-0.5, 0.5)),
                       "y_coef": float(rng.uniform(-1.5, y_cap)),
                       "z_coef": float(rng.uniform(-z_cap, z_cap)),
                       "bound": float(rng.uniform(0.5, 2.0))}
    elif kind == "cubic":
        driver_spec = {"kind": "polynomial",
                       "terms": [[3, 0, -float(rng.uniform(0.5, 3.0))], [1, 0, -1.0]],
                       "lambda_z": 0.0, "mu": -1.0}
    else:
        raise ValueError(f"unknown driver_kind {kind!r} (constant, linear, truncated, cubic)")

    lower = OptionalProcess(tree, low_at, low_after)
    upper = OptionalProcess(tree, up_at, up_after)
    data = {
        "version": "v1",
        "name": name or f"random-{seed}",
        "steps": n,
        "dt": dt_val,
        "lower": _tables(tree, lower),
        "upper": _tables(tree, upper),
        "terminal": {"kind": "table", "values": [float(v) for v in terminal]},
        "driver": driver_spec,
        "seed": int(seed),
    }
    return scenario_from_dict(data)
