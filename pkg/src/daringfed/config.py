"""Configuration loading, validation, overrides, and runtime assembly.

Precedence: built-in defaults < config file < --set overrides < --seed flag.
Unknown top-level sections and unknown override paths are rejected rather
than silently ignored.  A manifest written by a previous run doubles as a
config file, which is how byte-identical reruns are produced.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .engine import EngineConfig
from .errors import ConfigError
from .mechanism import (
    CommPrior,
    CostModel,
    ResourceBounds,
    SurvivalModel,
    cost_from_descriptor,
    survival_from_descriptor,
)
from .simulation import ClientPopulation, ToyParams

MANIFEST_KIND = "daringfed-manifest"

DEFAULT_CONFIG: dict = {
    "bounds": {
        "tau_lo": 0.1,
        "tau_hi": 0.9,
        "theta_lo": 0.1,
        "theta_hi": 0.9,
        "xi": 0.01,
        "gamma_lo": 0.0,
        "gamma_hi": 1.0,
    },
    "model": {
        "cost": {"form": "quadratic_synthetic"},
        "survival": {"form": "power_synthetic", "exponent": 8},
    },
    "tau_prior": {"atoms": [[0.1, 0.5], [0.9, 0.5]]},
    "beta": None,
    "policy": "DF",
    "rounds": 5000,
    "seed": 42,
    "convergence_window": 200,
    "estimator_window": None,
    "fixed_gamma": None,
    "theta_dist": {"kind": "survival_matched"},
    "shift_schedule": [],
    "toy": {
        "dim": 10,
        "batch_size": 16,
        "eta": 0.05,
        "alpha": 0.2,
        "base_noise": 0.1,
        "label_noise": 0.5,
        "train_noise": 1.0,
        "upload_noise": 0.05,
        "loss_window": 500,
    },
    "sweep": {
        "mu_lo": 0.1,
        "mu_hi": 0.9,
        "mu_cells": 41,
        "gamma_lo": 0.01,
        "gamma_hi": 0.25,
        "gamma_cells": 25,
    },
    "design": {"fine_step": None},
    "verify": {"corrupt_scheme": False},
}

# sections whose leaf keys are fixed by the defaults skeleton
_CLOSED_SECTIONS = ("bounds", "toy", "sweep", "design", "verify")


def load_config(path: Optional[str]) -> dict:
    """Defaults merged with the config file (or a previous run's manifest)."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return config
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if isinstance(raw, dict) and raw.get("kind") == MANIFEST_KIND:
        raw = raw.get("config", {})
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    _merge(config, raw, context="")
    return config


def _merge(base: dict, incoming: dict, context: str) -> None:
    for key, value in incoming.items():
        where = f"{context}.{key}" if context else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            section = context or key
            if key in _CLOSED_SECTIONS or context in _CLOSED_SECTIONS:
                _merge(base[key], value, context=where)
            else:
                # open sections (model descriptors, samplers) are replaced
                # whole and validated by their builders
                base[key] = copy.deepcopy(value)
        else:
            base[key] = copy.deepcopy(value)


def apply_overrides(config: dict, overrides: list[str]) -> None:
    """Apply repeatable ``key.path=value`` assignments; unknown paths fail."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, _, raw_value = item.partition("=")
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        keys = path.split(".")
        node: Any = config
        for k in keys[:-1]:
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(f"unknown override path: {path}")
            node = node[k]
        leaf = keys[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"unknown override path: {path}")
        node[leaf] = value


@dataclass
class Runtime:
    """Config resolved into live objects."""

    config: dict
    bounds: ResourceBounds
    prior: CommPrior
    cost: CostModel
    survival: SurvivalModel
    beta: float
    engine_config: EngineConfig
    toy: ToyParams

    def population(self) -> ClientPopulation:
        shifts = tuple(
            (int(r), dict(d)) for r, d in self.config.get("shift_schedule", [])
        )
        return ClientPopulation(
            prior=self.prior,
            survival=self.survival,
            bounds=self.bounds,
            theta_dist=dict(self.config["theta_dist"]),
            shift_schedule=shifts,
        )

    def sweep_grids(self) -> tuple[np.ndarray, np.ndarray]:
        s = self.config["sweep"]
        for cells_key in ("mu_cells", "gamma_cells"):
            if int(s[cells_key]) < 1:
                raise ConfigError(f"sweep {cells_key} must be >= 1")
        mu = np.linspace(float(s["mu_lo"]), float(s["mu_hi"]), int(s["mu_cells"]))
        gamma = np.linspace(
            float(s["gamma_lo"]), float(s["gamma_hi"]), int(s["gamma_cells"])
        )
        return mu, gamma


def build_runtime(config: dict) -> Runtime:
    try:
        bounds = ResourceBounds(**config["bounds"])
    except TypeError as exc:
        raise ConfigError(f"bad bounds section: {exc}") from exc
    cost = cost_from_descriptor(config["model"]["cost"], bounds)
    survival = survival_from_descriptor(config["model"]["survival"], bounds)
    prior_desc = config["tau_prior"]
    if prior_desc.get("uniform"):
        prior = CommPrior.uniform_equivalent(bounds)
    else:
        atoms = [(float(v), float(m)) for v, m in prior_desc["atoms"]]
        prior = CommPrior.canonical(atoms, bounds)
    beta = config["beta"]
    beta = bounds.theta_lo if beta is None else float(beta)
    policy = config["policy"]
    if policy not in ("DF", "DF-B", "DF-D", "DF-BD"):
        raise ConfigError(f"unknown policy {policy!r}")
    if int(config["rounds"]) < 0:
        raise ConfigError("rounds must be >= 0")
    window = config.get("estimator_window")
    engine_config = EngineConfig(
        bounds=bounds,
        prior=prior,
        cost=cost,
        beta=beta,
        convergence_window=int(config["convergence_window"]),
        seed=int(config["seed"]),
        signaling=policy in ("DF", "DF-D"),
        estimator_window=None if window is None else int(window),
    )
    try:
        toy = ToyParams(**config["toy"])
    except TypeError as exc:
        raise ConfigError(f"bad toy section: {exc}") from exc
    return Runtime(
        config=config,
        bounds=bounds,
        prior=prior,
        cost=cost,
        survival=survival,
        beta=beta,
        engine_config=engine_config,
        toy=toy,
    )


def make_manifest(command: str, config: dict, version: str) -> dict:
    return {
        "kind": MANIFEST_KIND,
        "command": command,
        "package_version": version,
        "config": copy.deepcopy(config),
    }
