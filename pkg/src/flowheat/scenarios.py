"""Scenario configuration: schema, validation, bundled configs, and the
construction of models/trajectories/weights a run needs."""

from __future__ import annotations

import importlib.resources
import json
import math

import numpy as np

from . import geometry as geo, kernels as ker
from .flows import GeneralizedFlowSpec, StepControl, evolve
from .geometry import ManifoldModel


class ConfigError(ValueError):
    pass


CONFIG_SCHEMA = {
    "name": "string: scenario identifier",
    "seed": "integer: master seed for every random draw",
    "geometry": {
        "kind": "one of flat_torus | round_sphere | warped_sphere",
        "n": "integer >= 3 (simulations use 3)",
        "resolution": "grid points per axis / intervals on the polar arc",
        "periods": "[per-axis lengths] (flat_torus)",
        "radius": "positive initial radius (round_sphere)",
        "profile_eccentricity": "warped_sphere: profile sin(x)(1 + e sin^2 x)",
        "constants_resolution": "coarser grid for the Sobolev trial search",
    },
    "flow": {
        "kind": "ricci | list",
        "horizon": "final time (must precede blow-up)",
        "coupling": "positive constant (list only)",
        "aux_amplitude": "initial auxiliary field amplitude (list only)",
        "target_rel_change": "integrator accuracy target per step",
        "dt_max": "largest step",
        "interp_tol": "stored-state interpolation tolerance",
    },
    "kernels": {
        "dt": "solver substep (null = automatic)",
        "delta_coeff": "point-source width coefficient: delta = coeff h^2",
        "delta_cap_frac": "cap delta <= frac (t - s)",
        "truncation": "oracle tail bound target",
    },
    "constants": {
        "trial_budget": "Sobolev trial evaluations",
        "safety_factor": "multiplier on the Sobolev estimate (>= 1)",
        "overrides": "optional explicit values, bypassing estimation",
    },
    "bounds": {
        "checks": "subset of [weighted_sup, on_diagonal, gaussian_static_weight,"
                  " gaussian_moving_weight, sup_from_l2, l2_from_l1]",
        "alphas": "[weight exponents]",
        "pairs": "[[s, t] time pairs]",
        "mu_power": "power of the gradient supremum in the static-weight"
                    " Gaussian exponent (display version: 2)",
        "weight_clamp": "distance clamp for sphere weights",
        "mollify_cells": "profile smoothing width in grid cells",
        "band_cells": "cut-locus/pole exclusion band for gradient suprema",
    },
    "entropy": {
        "enabled": "bool",
        "t_star": "final time of the conjugate-density run",
        "sigma": "scale at t_star (null = soliton pairing on spheres)",
        "budget": "optimizer evaluations for the entropy infimum",
        "infimum_pair": "[t_star, sigma] for the infimum comparison",
    },
    "output": {"formats": "subset of [json, csv]"},
}

_REQUIRED = {
    "name": str,
    "seed": int,
    "geometry": dict,
    "flow": dict,
    "output": dict,
}

_GEO_REQUIRED = {"kind": str, "n": int, "resolution": int}
_FLOW_REQUIRED = {"kind": str, "horizon": (int, float)}


def validate_config(cfg: dict) -> dict:
    """Schema-check a scenario config; raises ConfigError naming the field."""
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    for key, typ in _REQUIRED.items():
        if key not in cfg:
            raise ConfigError(f"config missing required field: {key}")
        if not isinstance(cfg[key], typ):
            raise ConfigError(f"config field {key} has wrong type")
    for key, typ in _GEO_REQUIRED.items():
        if key not in cfg["geometry"]:
            raise ConfigError(f"config missing required field: geometry.{key}")
    for key, typ in _FLOW_REQUIRED.items():
        if key not in cfg["flow"]:
            raise ConfigError(f"config missing required field: flow.{key}")
        if not isinstance(cfg["flow"][key], typ):
            raise ConfigError(f"config field flow.{key} has wrong type")
    kind = cfg["geometry"]["kind"]
    if kind == "flat_torus" and "periods" not in cfg["geometry"]:
        raise ConfigError("config missing required field: geometry.periods")
    if kind == "round_sphere" and "radius" not in cfg["geometry"]:
        raise ConfigError("config missing required field: geometry.radius")
    if "bounds" in cfg:
        for key in ("checks", "alphas", "pairs"):
            if key not in cfg["bounds"]:
                raise ConfigError(f"config missing required field: bounds.{key}")
    fmts = cfg["output"].get("formats")
    if not fmts or not set(fmts) <= {"json", "csv"}:
        raise ConfigError("output.formats must be a nonempty subset of [json, csv]")
    return cfg


def build_model(gcfg: dict) -> ManifoldModel:
    kind = gcfg["kind"]
    if kind == "flat_torus":
        return ManifoldModel(
            "flat_torus", gcfg["n"], gcfg["resolution"],
            periods=tuple(gcfg["periods"]),
        )
    if kind == "round_sphere":
        return ManifoldModel(
            "round_sphere", gcfg["n"], gcfg["resolution"], radius=gcfg["radius"]
        )
    ecc = gcfg.get("profile_eccentricity", 0.0)
    N = gcfg["resolution"]
    x = np.linspace(0.0, math.pi, N + 1)
    prof = np.sin(x) * (1.0 + ecc * np.sin(x) ** 2)
    return ManifoldModel("warped_sphere", gcfg["n"], N, profile=prof, length=math.pi)


def build_trajectory(cfg: dict):
    model = build_model(cfg["geometry"])
    fcfg = cfg["flow"]
    aux = None
    if fcfg["kind"] == "list":
        amp = fcfg.get("aux_amplitude", 0.3)
        x = np.linspace(0.0, math.pi, model.resolution + 1)
        aux = geo.ScalarField(amp * np.cos(x))
    spec = GeneralizedFlowSpec(
        fcfg["kind"], coupling=fcfg.get("coupling"), initial_aux=aux
    )
    control = StepControl(
        interp_tol=fcfg.get("interp_tol", 1e-6),
        target_rel_change=fcfg.get("target_rel_change", 2e-4),
        dt_max=fcfg.get("dt_max", 1e-4),
    )
    return evolve(spec, geo.initial_state(model), fcfg["horizon"], control)


def source_point(model: ManifoldModel):
    """Deterministic, on-grid kernel source for a scenario."""
    if model.kind == "flat_torus":
        N = model.resolution
        idx = (N // 6, 5 * N // 12, N // 4)
        h = model.periods[0] / N
        return np.array(idx, dtype=float) * h
    return 0.0


def weight_builder_for(traj, cfg: dict):
    bcfg = cfg.get("bounds", {})
    cells = bcfg.get("mollify_cells", 4.0)
    model = traj.model
    if model.kind == "flat_torus":
        base = ker.coordinate_weight(model, 1.0, mollify_cells=cells)

        def build(alpha, s, t):
            wt = ker.WeightSpec(alpha=alpha, profile=base.profile)
            return wt.certify(traj, span=(s, t))

        return build
    clamp = bcfg.get("weight_clamp", 1.5)

    def build(alpha, s, t):
        wt = ker.distance_weight(
            traj, source_point(model), alpha=alpha, t_ref=t, clamp=clamp,
            mollify_cells=max(cells, 6.0),
        )
        return wt.certify(traj, span=(s, t))

    return build


def bundled_names():
    root = importlib.resources.files("flowheat.scenario_data")
    return sorted(
        p.name[: -len(".json")] for p in root.iterdir() if p.name.endswith(".json")
    )


def load_bundled(name: str) -> dict:
    root = importlib.resources.files("flowheat.scenario_data")
    path = root / f"{name}.json"
    if not path.is_file():
        raise ConfigError(
            f"unknown bundled scenario {name!r}; available: {bundled_names()}"
        )
    return json.loads(path.read_text())


def load_config(path_or_name: str) -> dict:
    import os

    if os.path.exists(path_or_name):
        with open(path_or_name) as fh:
            cfg = json.load(fh)
    else:
        cfg = load_bundled(path_or_name)
    return validate_config(cfg)
