"""JSON model configuration and the catalog of named parametric families."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Callable, Dict, Union

import numpy as np
from scipy.special import ndtr

from .errors import ConfigurationError
from .measures import Grid, ProbVector
from .model import (
    AdditiveNoiseSpec,
    GameModel,
    build_additive_noise_model,
    decoupled_toy_model,
    tabular_model,
    toy_model,
)


def _params(entry: dict, n: int, family: str) -> list:
    params = list(entry.get("params", []))
    if len(params) != n:
        raise ConfigurationError(f"{family} expects {n} parameters, got {len(params)}")
    return [float(p) for p in params]


def _drift(entry: dict) -> Callable:
    name = entry.get("name")
    if name == "zero":
        return lambda x, a, y: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(a), np.shape(y)))
    if name == "constant":
        (c,) = _params(entry, 1, "f=constant")
        return lambda x, a, y: np.full(np.broadcast_shapes(np.shape(x), np.shape(a), np.shape(y)), c)
    if name == "tanh_affine":
        kx, ka, ky, b = _params(entry, 4, "f=tanh_affine")
        if b <= 0:
            raise ConfigurationError("tanh_affine bound must be positive")
        return lambda x, a, y: b * np.tanh((kx * x + ka * a + ky * y) / b)
    if name == "clipped_affine":
        kx, ka, ky, b = _params(entry, 4, "f=clipped_affine")
        if b <= 0:
            raise ConfigurationError("clipped_affine bound must be positive")
        return lambda x, a, y: np.clip(kx * x + ka * a + ky * y, -b, b)
    raise ConfigurationError(f"unknown drift family {name!r}")


def _diffusion(entry: dict) -> Callable:
    name = entry.get("name")
    if name == "constant":
        (s,) = _params(entry, 1, "g=constant")
        return lambda x, a: np.full(np.broadcast_shapes(np.shape(x), np.shape(a)), s)
    if name == "action_affine":
        s0, s1 = _params(entry, 2, "g=action_affine")
        return lambda x, a: s0 + s1 * np.abs(a) + 0.0 * x
    raise ConfigurationError(f"unknown diffusion family {name!r}")


def _coupling_cost(entry: dict) -> Callable:
    name = entry.get("name")
    if name == "zero":
        return lambda x, a, y: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(a), np.shape(y)))
    if name == "quadratic":
        kxy, kx, ka = _params(entry, 3, "d=quadratic")
        if min(kxy, kx, ka) < 0:
            raise ConfigurationError("quadratic cost coefficients must be nonnegative")
        return lambda x, a, y: kxy * (x - y) ** 2 + kx * x**2 + ka * a**2
    raise ConfigurationError(f"unknown cost family {name!r}")


def _grid(entry: Any, what: str) -> Grid:
    if isinstance(entry, dict):
        try:
            return Grid.linspace(float(entry["min"]), float(entry["max"]), int(entry["points"]))
        except KeyError as exc:
            raise ConfigurationError(f"{what} needs min, max and points") from exc
    if isinstance(entry, (list, tuple)):
        return Grid(np.asarray(entry, dtype=float))
    raise ConfigurationError(f"cannot read {what} from {entry!r}")


def initial_law(entry: Any, grid: Grid) -> ProbVector:
    """``uniform`` | ``dirac`` [x] | ``normal`` [mean, std] | ``masses`` [...]."""
    if entry is None or entry == "uniform":
        return ProbVector.uniform(grid)
    if isinstance(entry, list):
        return ProbVector.from_mass(grid, entry)
    name = entry.get("name")
    if name == "uniform":
        return ProbVector.uniform(grid)
    if name == "dirac":
        (x,) = _params(entry, 1, "mu0=dirac")
        return ProbVector.point_mass(grid, int(grid.nearest_index(x)))
    if name == "normal":
        m, s = _params(entry, 2, "mu0=normal")
        if s <= 0:
            raise ConfigurationError("mu0 normal std must be positive")
        pts = grid.points
        mids = 0.5 * (pts[1:] + pts[:-1])
        cdf = ndtr((np.concatenate((mids, [np.inf])) - m) / s)
        mass = np.diff(np.concatenate(([0.0], cdf)))
        return ProbVector.from_mass(grid, mass / mass.sum())
    if name == "masses":
        return ProbVector.from_mass(grid, entry.get("params", []))
    raise ConfigurationError(f"unknown initial law {name!r}")


def model_from_config(cfg: Dict[str, Any]) -> GameModel:
    kind = cfg.get("model")
    beta = cfg.get("beta")
    if kind == "toy":
        return toy_model(beta=float(beta if beta is not None else 0.9))
    if kind == "toy_decoupled":
        return decoupled_toy_model(
            beta=float(beta if beta is not None else 0.9),
            occupancy=float(cfg.get("occupancy", 0.5)),
        )
    if beta is None:
        raise ConfigurationError("config must set beta")
    beta = float(beta)
    if kind == "additive_noise":
        sg = _grid(cfg.get("grid"), "grid")
        ag = _grid(cfg.get("actions", {"min": -0.4, "max": 0.4, "points": 5}), "actions")
        noise = cfg.get("noise", {})
        spec = AdditiveNoiseSpec(
            f=_drift(cfg.get("f", {"name": "zero"})),
            g=_diffusion(cfg.get("g", {"name": "constant", "params": [1.0]})),
            d=_coupling_cost(cfg.get("d", {"name": "zero"})),
            state_grid=sg,
            action_grid=ag,
            beta=beta,
            mu0=initial_law(cfg.get("mu0"), sg),
            sigma_trunc=float(noise.get("sigma_trunc", 4.0)),
            config=cfg,
        )
        return build_additive_noise_model(spec)
    if kind == "tabular":
        states = cfg.get("states")
        actions = cfg.get("actions")
        if states is None or actions is None:
            raise ConfigurationError("tabular model needs states and actions")
        sg = Grid(np.asarray(states, dtype=float))
        bounded = bool(cfg.get("cost_bounded", True))
        return tabular_model(
            states,
            actions,
            cfg.get("kernel"),
            cfg.get("cost"),
            beta=beta,
            mu0=initial_law(cfg.get("mu0"), sg),
            cost_coupling=cfg.get("cost_coupling"),
            kernel_coupling=cfg.get("kernel_coupling"),
            cost_bounded=bounded,
            action_labels=cfg.get("action_labels"),
            name=str(cfg.get("name", "tabular")),
            config=cfg,
        )
    raise ConfigurationError(f"unknown model kind {kind!r}")


def load_config(path: Union[str, Path]) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError("config root must be a JSON object")
    return cfg


DEFAULT_ADDITIVE_CONFIG = {
    "model": "additive_noise",
    "beta": 0.5,
    "grid": {"min": -2.0, "max": 2.0, "points": 41},
    "actions": {"min": -0.4, "max": 0.4, "points": 5},
    "noise": {"sigma_trunc": 4.0},
    "f": {"name": "tanh_affine", "params": [0.5, 1.0, 0.3, 0.4]},
    "g": {"name": "constant", "params": [0.3]},
    "d": {"name": "quadratic", "params": [1.0, 0.1, 0.5]},
    "mu0": {"name": "normal", "params": [1.0, 0.3]},
}


def default_additive_model() -> GameModel:
    return model_from_config(json.loads(json.dumps(DEFAULT_ADDITIVE_CONFIG)))
