"""Run configuration: strict YAML schema, presets, and object construction.

The config document is the single source of truth for an experiment. Unknown
keys are rejected rather than ignored: silent parameter typos are the main
failure mode of simulation repositories. Physical quantities carry unit
suffixes in their key names; model-level quantities (probabilities, costs,
horizons in model time) are unitless.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .demand import CrpState, crp_sample_request
from .errors import ConfigError
from .mfg import SolverConfig
from .radio import RadioEnvironment, average_rate, dbm_to_watts, mean_field_interference
from .simulate import SimConfig

_SCHEMA = {
    "name": str,
    "description": str,
    "radio": {
        "sbs_density_per_m2": float,
        "user_density_per_m2": float,
        "tx_power_dbm": float,
        "noise_dbm": float,
        "pathloss_exponent": float,
        "antennas": int,
        "ball_radius_m": float,
        "request_range_m": float,
    },
    "demand": {
        "mean_popularity": float,
        "x0": float,
        "reversion_rate": float,
        "volatility": float,
        "crp": {
            "theta": float,
            "discount": float,
            "requests": int,
            "catalog_size": int,
            "content_rank": int,
            "seed": int,
        },
    },
    "cost": {
        "storage_weight": float,
        "storage_capacity": float,
        "content_size": float,
        "discard_rate": float,
        "backhaul_limit": float,
        "neighbor_degeneracy": float,
    },
    "lattice": {
        "nx": int,
        "nq": int,
        "horizon": float,
        "solve_horizon": float,
    },
    "solver": {
        "damping": float,
        "tol": float,
        "max_iters": int,
        "terminal_value": float,
        "denom_floor": float,
        "q0_mean": float,
        "q0_sd": float,
        "x0_mode": str,
        "x0_sd": float,
    },
    "sim": {
        "area_m": list,
        "horizon": float,
        "dt": float,
        "replications": int,
        "master_seed": int,
        "q0": float,
        "compare_ipi": bool,
    },
    "policies": list,
    "ipi": {"bias": float, "sd": float},
    "sweep": {"key": str, "values": list},
    "contents": list,
}

_DEFAULTS = {
    "name": "run",
    "description": "",
    "radio": {
        "tx_power_dbm": 23.0,
        "noise_dbm": -70.0,
        "pathloss_exponent": 4.0,
        "antennas": 1,
    },
    "demand": {"reversion_rate": 1.0, "volatility": 0.1},
    "cost": {
        "storage_weight": 0.0,
        "storage_capacity": 1.0,
        "content_size": 1.0,
        "discard_rate": 0.1,
        "backhaul_limit": 1.0,
        "neighbor_degeneracy": 20.0,
    },
    "lattice": {"nx": 64, "nq": 64, "horizon": 1.0},
    "solver": {
        "damping": 0.5,
        "tol": 1e-4,
        "max_iters": 200,
        "terminal_value": 0.0,
        "denom_floor": 1e-6,
        "q0_mean": 0.7,
        "q0_sd": 0.05,
        "x0_mode": "stationary",
    },
    "sim": {
        "area_m": [200.0, 200.0],
        "horizon": 1.0,
        "dt": 0.01,
        "replications": 20,
        "master_seed": 1234,
        "q0": 0.7,
        "compare_ipi": False,
    },
    "policies": ["mf", "baseline", "random"],
    "ipi": {"bias": 0.0, "sd": 0.0},
}

_POLICY_KINDS = ("mf", "baseline", "random")


def _check_keys(doc, schema, path=""):
    if not isinstance(doc, dict):
        raise ConfigError(f"section '{path or '<root>'}' must be a mapping")
    for key, value in doc.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown config key '{where}'")
        spec = schema[key]
        if isinstance(spec, dict):
            _check_keys(value, spec, where)
        elif spec is float:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"key '{where}' must be a number")
        elif spec is int:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"key '{where}' must be an integer")
        elif spec is bool:
            if not isinstance(value, bool):
                raise ConfigError(f"key '{where}' must be a boolean")
        elif not isinstance(value, spec):
            raise ConfigError(f"key '{where}' must be of type {spec.__name__}")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class RunConfig:
    """Validated experiment document plus derived model objects."""

    doc: dict
    path: str = ""

    @classmethod
    def from_mapping(cls, doc: dict, path: str = "") -> "RunConfig":
        if doc is None:
            doc = {}
        _check_keys(doc, _SCHEMA)
        merged = _merge(_DEFAULTS, doc)
        cfg = cls(doc=merged, path=path)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        return cls.from_mapping(doc, path=str(path))

    def validate(self) -> None:
        doc = self.doc
        for section in ("radio",):
            if "sbs_density_per_m2" not in doc.get(section, {}):
                raise ConfigError("radio.sbs_density_per_m2 is required")
            if "user_density_per_m2" not in doc[section]:
                raise ConfigError("radio.user_density_per_m2 is required")
            if "ball_radius_m" not in doc[section]:
                raise ConfigError("radio.ball_radius_m is required")
        radio = doc["radio"]
        if radio["sbs_density_per_m2"] <= 0 or radio["user_density_per_m2"] <= 0:
            raise ConfigError("densities must be positive")
        if radio["sbs_density_per_m2"] <= radio["user_density_per_m2"]:
            raise ConfigError("sbs density must exceed user density (UDN regime)")
        demand = doc["demand"]
        if "mean_popularity" not in demand and "crp" not in demand:
            raise ConfigError("demand.mean_popularity or demand.crp is required")
        for kind in doc["policies"]:
            if kind not in _POLICY_KINDS:
                raise ConfigError(f"unknown policy kind '{kind}'")
        area = doc["sim"]["area_m"]
        if len(area) != 2 or any(not isinstance(v, (int, float)) or v <= 0 for v in area):
            raise ConfigError("sim.area_m must be two positive numbers")
        lattice = doc["lattice"]
        if lattice.get("solve_horizon", lattice["horizon"]) < lattice["horizon"]:
            raise ConfigError("lattice.solve_horizon must be >= lattice.horizon")
        if doc["ipi"]["sd"] < 0:
            raise ConfigError("ipi.sd must be nonnegative")
        if "sweep" in doc:
            if "key" not in doc["sweep"] or "values" not in doc["sweep"]:
                raise ConfigError("sweep needs both key and values")
        for entry in doc.get("contents", []):
            if not isinstance(entry, dict) or "name" not in entry:
                raise ConfigError("each contents entry needs a name")
            extra = set(entry) - {"name", "demand", "solver"}
            if extra:
                raise ConfigError(f"unknown keys in contents entry: {sorted(extra)}")

    # derived objects ------------------------------------------------------

    def environment(self) -> RadioEnvironment:
        r = self.doc["radio"]
        return RadioEnvironment(
            sbs_density=float(r["sbs_density_per_m2"]),
            user_density=float(r["user_density_per_m2"]),
            tx_power=dbm_to_watts(float(r["tx_power_dbm"])),
            pathloss_exp=float(r["pathloss_exponent"]),
            antennas=int(r["antennas"]),
            noise=dbm_to_watts(float(r["noise_dbm"])),
            ball_radius=float(r["ball_radius_m"]),
        )

    def rate(self) -> float:
        env = self.environment()
        return average_rate(env, mean_field_interference(env))

    def mean_popularity(self, demand_doc: dict = None) -> float:
        d = demand_doc if demand_doc is not None else self.doc["demand"]
        if "mean_popularity" in d:
            return float(d["mean_popularity"])
        crp = d["crp"]
        state = CrpState(
            catalog_size=int(crp.get("catalog_size", 20)),
            theta=float(crp.get("theta", 1.0)),
            discount=float(crp.get("discount", 0.5)),
        )
        rng = np.random.default_rng(int(crp.get("seed", 0)))
        for _ in range(int(crp.get("requests", 1000))):
            crp_sample_request(state, rng)
        shares = np.sort(state.request_counts)[::-1] / state.total_requests
        rank = int(crp.get("content_rank", 0))
        if not 0 <= rank < state.catalog_size:
            raise ConfigError("demand.crp.content_rank out of range")
        return float(shares[rank])

    def contents(self) -> list:
        """Per-content (name, demand_doc, solver_doc) tuples for the solver."""
        entries = self.doc.get("contents")
        if not entries:
            return [("content", self.doc["demand"], self.doc["solver"])]
        out = []
        for entry in entries:
            demand = _merge(self.doc["demand"], entry.get("demand", {}))
            solver = _merge(self.doc["solver"], entry.get("solver", {}))
            out.append((entry["name"], demand, solver))
        return out

    def solver_config(self, demand_doc: dict = None, solver_doc: dict = None) -> SolverConfig:
        cost = self.doc["cost"]
        solver = solver_doc if solver_doc is not None else self.doc["solver"]
        demand = demand_doc if demand_doc is not None else self.doc["demand"]
        return SolverConfig(
            rate=self.rate(),
            content_size=float(cost["content_size"]),
            discard_rate=float(cost["discard_rate"]),
            backhaul_limit=float(cost["backhaul_limit"]),
            storage_capacity=float(cost["storage_capacity"]),
            storage_weight=float(cost["storage_weight"]),
            neighbor_degeneracy=float(cost["neighbor_degeneracy"]),
            reversion_rate=float(demand["reversion_rate"]),
            volatility=float(demand["volatility"]),
            mean_popularity=self.mean_popularity(demand),
            damping=float(solver["damping"]),
            tol=float(solver["tol"]),
            max_iters=int(solver["max_iters"]),
            terminal_value=float(solver["terminal_value"]),
            denom_floor=float(solver["denom_floor"]),
        )

    def sim_config(self, seed_override: int = None) -> SimConfig:
        doc = self.doc
        demand = doc["demand"]
        cost = doc["cost"]
        sim = doc["sim"]
        mean = self.mean_popularity()
        return SimConfig(
            env=self.environment(),
            rate=self.rate(),
            area=(float(sim["area_m"][0]), float(sim["area_m"][1])),
            request_range=doc["radio"].get("request_range_m"),
            mean_popularity=mean,
            x0=float(demand.get("x0", mean)),
            reversion_rate=float(demand["reversion_rate"]),
            volatility=float(demand["volatility"]),
            storage_weight=float(cost["storage_weight"]),
            storage_capacity=float(cost["storage_capacity"]),
            content_size=float(cost["content_size"]),
            discard_rate=float(cost["discard_rate"]),
            backhaul_limit=float(cost["backhaul_limit"]),
            neighbor_degeneracy=float(cost["neighbor_degeneracy"]),
            q0=float(sim["q0"]),
            horizon=float(sim["horizon"]),
            dt=float(sim["dt"]),
            replications=int(sim["replications"]),
            master_seed=int(sim["master_seed"]) if seed_override is None else int(seed_override),
        )

    def with_override(self, dotted_key: str, value) -> "RunConfig":
        """New config with one dotted key replaced (sweep machinery)."""
        doc = copy.deepcopy(self.doc)
        parts = dotted_key.split(".")
        node = doc
        schema = _SCHEMA
        for part in parts[:-1]:
            if not isinstance(schema, dict) or part not in schema:
                raise ConfigError(f"unknown sweep key '{dotted_key}'")
            schema = schema[part]
            node = node.setdefault(part, {})
        leaf = parts[-1]
        if not isinstance(schema, dict) or leaf not in schema:
            raise ConfigError(f"unknown sweep key '{dotted_key}'")
        if schema[leaf] not in (float, int):
            raise ConfigError(f"sweep key '{dotted_key}' is not numeric")
        node[leaf] = value
        doc.pop("sweep", None)
        return RunConfig.from_mapping(doc, path=self.path)

    def config_hash(self) -> str:
        canon = json.dumps(self.doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def preset_names() -> list:
    files = resources.files("mfcache").joinpath("presets")
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".yaml"))


def load_preset(name: str) -> RunConfig:
    files = resources.files("mfcache").joinpath("presets")
    candidate = files.joinpath(f"{name}.yaml")
    if not candidate.is_file():
        raise ConfigError(
            f"unknown preset '{name}'; available: {', '.join(preset_names())}"
        )
    doc = yaml.safe_load(candidate.read_text())
    return RunConfig.from_mapping(doc, path=f"preset:{name}")
