"""Run configuration: strict TOML loading, experiment presets, and the
glue that turns a config into sampler spaces, trainer modes, and
normalizers.

Unknown keys are rejected everywhere (typo safety); preset values fill
anything the file leaves out; file values win over presets.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

try:
    import tomllib  # Python 3.11+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import sampler, trainer


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# Defaults and presets. full_scale swaps in the expensive settings.

_BASE = {
    "run": {
        "experiment": "custom",
        "mode": "online",
        "ensemble_size": 8,
        "concurrency": 4,
        "shards": 1,
        "sample_unit": "single_step",  # single_step | step_pair | full_trajectory
    },
    "seeds": {"master": 1, "validation": 900_000},
    "sampling": {"strategy": "monte_carlo", "sweep_axis": ""},
    "params": {},
    "solver": {
        "kind": "lorenz",
        "grid_n": 32,
        "dt": 0.01,
        "t_total": 20.0,
        "length": 1.0,
        "alpha": 1.0,
        "lorenz_variant": "standard",
        "init_std": 30.0,
    },
    "buffer": {"policy": "read_once_random", "capacity": 256, "watermark": 0},
    "trainer": {
        "hidden_dims": [64, 64, 64],
        "activation": "relu",
        "lr0": 1e-3,
        "decay_gamma": 0.99995,
        "batch_size": 64,
        "max_batches": 10_000,
        "validate_every": 200,
        "checkpoint_every": 2_000,
        "mode": "direct",  # direct | autoregressive
        "input_params": [],
        "epochs": 0,  # offline only; 0 = derive from max_batches
    },
    "server": {
        "host": "127.0.0.1",
        "data_port": 0,
        "ctrl_port": 0,
        "idle_grace_s": 10.0,
        "validation_trajectories": 10,
        "validation_stride": 1,
        "payload_hash": False,
        "serialized": False,
        "log_batch_stats": False,
    },
    "launcher": {"heartbeat_timeout_s": 10.0, "tick_s": 1.0, "max_retries": 3},
    "paths": {"outdir": "run_out", "dataset": "dataset.mtrj"},
}

_PRESETS = {
    "custom": {},
    "e1_heat": {
        "run": {"ensemble_size": 500, "sample_unit": "single_step"},
        "solver": {"kind": "heat", "grid_n": 32, "dt": 0.01, "t_total": 1.0},
        "params": {
            "t_ic": {"kind": "uniform", "lo": 100.0, "hi": 500.0},
            "t_x1": {"kind": "uniform", "lo": 100.0, "hi": 500.0},
            "t_x2": {"kind": "uniform", "lo": 100.0, "hi": 500.0},
            "t_y1": {"kind": "uniform", "lo": 100.0, "hi": 500.0},
            "t_y2": {"kind": "uniform", "lo": 100.0, "hi": 500.0},
        },
        "trainer": {
            "hidden_dims": [256, 256, 256],
            "activation": "relu",
            "mode": "direct",
            "input_params": ["t_ic", "t_x1", "t_x2", "t_y1", "t_y2"],
        },
    },
    "e2_lorenz": {
        "run": {"ensemble_size": 1000, "sample_unit": "step_pair"},
        "solver": {"kind": "lorenz", "dt": 0.01, "t_total": 20.0},
        "params": {
            "rho": {"kind": "discrete", "values": [0.0, 20.0, 40.0, 60.0, 80.0, 100.0]},
            "x0": {"kind": "normal", "mean": 15.0, "std": 30.0},
            "y0": {"kind": "normal", "mean": 15.0, "std": 30.0},
            "z0": {"kind": "normal", "mean": 15.0, "std": 30.0},
        },
        "buffer": {"capacity": 4096},
        "trainer": {
            "hidden_dims": [512, 512, 512],
            "activation": "silu",
            "batch_size": 1024,
            "mode": "autoregressive",
            "input_params": ["rho"],
        },
    },
    "advection": {
        "run": {"ensemble_size": 50, "sample_unit": "single_step"},
        "solver": {"kind": "advection", "grid_n": 64, "dt": 0.005, "t_total": 1.0},
        "params": {"beta": {"kind": "uniform", "lo": 0.5, "hi": 2.0}},
        "trainer": {
            "hidden_dims": [128, 128],
            "activation": "relu",
            "mode": "direct",
            "input_params": ["beta"],
        },
    },
}

_FULL_SCALE = {
    "e1_heat": {"solver": {"grid_n": 100}, "trainer": {"hidden_dims": [1024, 1024, 1024]}},
    "e2_lorenz": {},
    "advection": {},
    "custom": {},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _check_known_keys(tree: dict, model: dict, path: str = "") -> None:
    for key, value in tree.items():
        where = f"{path}.{key}" if path else key
        if key not in model:
            raise ConfigError(f"unknown config key: {where}")
        # [params] holds free-form entry names; don't recurse into it.
        if isinstance(value, dict) and isinstance(model[key], dict) and key != "params":
            _check_known_keys(value, model[key], where)


_ENUMS = {
    ("run", "mode"): ("online", "offline_generate", "offline_train"),
    ("run", "sample_unit"): ("single_step", "step_pair", "full_trajectory"),
    ("sampling", "strategy"): ("monte_carlo", "ordered_sweep"),
    ("solver", "kind"): ("heat", "lorenz", "advection"),
    ("solver", "lorenz_variant"): ("standard", "as_printed"),
    ("buffer", "policy"): ("fifo", "reservoir_weighted", "read_once_random"),
    ("trainer", "activation"): ("relu", "silu"),
    ("trainer", "mode"): ("direct", "autoregressive"),
}


@dataclass
class RunConfig:
    tree: dict

    def __getitem__(self, section: str) -> dict:
        return self.tree[section]

    # -- sampler glue ------------------------------------------------------

    def param_space(self) -> sampler.ParamSpace:
        entries = []
        for name, spec in self.tree["params"].items():
            entries.append((name, _dist_from_spec(name, spec)))
        if not entries:
            raise ConfigError("no [params] entries; pick a preset or declare parameters")
        return sampler.ParamSpace(tuple(entries))

    def strategy(self):
        s = self.tree["sampling"]
        if s["strategy"] == "monte_carlo":
            return sampler.MonteCarlo(self.tree["seeds"]["master"])
        if not s["sweep_axis"]:
            raise ConfigError("ordered_sweep needs sampling.sweep_axis")
        return sampler.OrderedSweep(
            s["sweep_axis"], self.tree["run"]["ensemble_size"], self.tree["seeds"]["master"]
        )

    def validation_params(self, index: int) -> sampler.ParamVector:
        return sampler.next_params(
            self.param_space(), sampler.MonteCarlo(self.tree["seeds"]["validation"]), index
        )

    # -- solver glue -------------------------------------------------------

    def steps_total(self) -> int:
        s = self.tree["solver"]
        return int(round(s["t_total"] / s["dt"]))

    def field_dim(self) -> int:
        s = self.tree["solver"]
        if s["kind"] == "heat":
            return s["grid_n"] * s["grid_n"]
        if s["kind"] == "lorenz":
            return 3
        return s["grid_n"]

    def field_shape(self) -> tuple:
        s = self.tree["solver"]
        if s["kind"] == "heat":
            return (s["grid_n"], s["grid_n"])
        if s["kind"] == "lorenz":
            return (3,)
        return (s["grid_n"],)

    def solver_params(self, lam: sampler.ParamVector, seed: int = 0):
        """Materialize solver parameters from a λ plus fixed settings."""
        from . import solvers

        s = self.tree["solver"]
        if s["kind"] == "heat":
            return solvers.HeatParams(
                lam["t_ic"], lam["t_x1"], lam["t_x2"], lam["t_y1"], lam["t_y2"],
                alpha=s["alpha"], n=s["grid_n"], dt=s["dt"],
                t_total=s["t_total"], length=s["length"],
            )
        if s["kind"] == "lorenz":
            names = set(lam.names)
            if {"x0", "y0", "z0"} <= names:
                x0, y0, z0 = lam["x0"], lam["y0"], lam["z0"]
            else:
                x0, y0, z0 = solvers.lorenz_init_from_seed(seed)
            return solvers.LorenzParams(
                rho=lam["rho"], x0=x0, y0=y0, z0=z0, dt=s["dt"],
                t_total=s["t_total"], variant=s["lorenz_variant"],
            )
        u0 = solvers.advection_profile(s["grid_n"], seed)
        return solvers.AdvectionParams(
            beta=lam["beta"], u0=u0, dt=s["dt"], t_total=s["t_total"], length=s["length"]
        )

    # -- trainer glue ------------------------------------------------------

    def sgd_config(self) -> trainer.SgdConfig:
        t = self.tree["trainer"]
        return trainer.SgdConfig(t["lr0"], t["decay_gamma"], t["batch_size"], t["max_batches"])

    def input_names(self) -> tuple:
        names = tuple(self.tree["trainer"]["input_params"])
        if not names:
            raise ConfigError("trainer.input_params is empty")
        return names

    def build_mode(self, val_fields: Optional[np.ndarray] = None):
        """Training mode object; val_fields (N, field_dim) feeds fitted
        normalization constants where the experiment needs them."""
        t = self.tree["trainer"]
        target_norm = self._target_norm(val_fields)
        if t["mode"] == "direct":
            return trainer.Direct(self.input_names(), self.steps_total(), target_norm)
        return trainer.Autoregressive(
            self.input_names(), pair_seed=self.tree["seeds"]["master"] + 7, target_norm=target_norm
        )

    def model_dims(self) -> tuple:
        t = self.tree["trainer"]
        field_dim = self.field_dim()
        in_dim = len(self.input_names()) + (1 if t["mode"] == "direct" else field_dim)
        return (in_dim, *t["hidden_dims"], field_dim)

    def _target_norm(self, val_fields):
        exp = self.tree["run"]["experiment"]
        if exp == "e1_heat":
            return trainer.Normalizer.scalar(trainer.MinMax(100.0, 500.0))
        if exp == "e2_lorenz":
            mean, std = _fit_stats(val_fields)
            return trainer.Normalizer(mean, std)
        return None

    def build_input_normalizer(self, val_fields: Optional[np.ndarray] = None) -> trainer.Normalizer:
        exp = self.tree["run"]["experiment"]
        t = self.tree["trainer"]
        names = self.input_names()
        space = {name: dist for name, dist in self.param_space().entries}
        specs = []
        for name in names:
            dist = space[name]
            if exp == "e2_lorenz" and name == "rho":
                specs.append(trainer.MinMax(0.0, 100.0))
            elif isinstance(dist, sampler.UniformReal):
                specs.append(trainer.MinMax(dist.lo, dist.hi))
            elif isinstance(dist, sampler.DiscreteSet):
                lo, hi = min(dist.values), max(dist.values)
                specs.append(trainer.MinMax(lo, hi) if hi > lo else trainer.Identity())
            elif isinstance(dist, sampler.Normal):
                specs.append(trainer.Standardize(dist.mean, dist.std))
            else:
                specs.append(trainer.Identity())
        lam_norm = trainer.Normalizer.from_features(specs)
        if t["mode"] == "direct":
            # time input is already in [0, 1]
            field_part = trainer.Normalizer.identity(1)
        elif exp == "e2_lorenz":
            mean, std = _fit_stats(val_fields)
            field_part = trainer.Normalizer(mean, std)
        else:
            field_part = trainer.Normalizer.identity(self.field_dim())
        return trainer.Normalizer(
            np.concatenate([lam_norm.offset, field_part.offset]),
            np.concatenate([lam_norm.scale, field_part.scale]),
        )

    def watermark(self) -> int:
        w = self.tree["buffer"]["watermark"]
        return w if w > 0 else 4 * self.tree["trainer"]["batch_size"]

    def make_buffer(self, seed: int):
        from .buffer import Fifo, MemoryBuffer, ReadOnceRandom, ReservoirWeighted

        b = self.tree["buffer"]
        policy = {
            "fifo": Fifo(),
            "reservoir_weighted": ReservoirWeighted(),
            "read_once_random": ReadOnceRandom(min(self.watermark(), b["capacity"])),
        }[b["policy"]]
        return MemoryBuffer(policy, b["capacity"], seed=seed)


def _fit_stats(val_fields):
    if val_fields is None:
        raise ConfigError("this experiment needs validation fields to fit normalization")
    mean = val_fields.mean(axis=0)
    std = val_fields.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return mean, std


def _dist_from_spec(name: str, spec) -> object:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(f"params.{name} must be a table with a 'kind'")
    kind = spec["kind"]
    known = {
        "uniform": ({"kind", "lo", "hi"}, lambda: sampler.UniformReal(spec["lo"], spec["hi"])),
        "normal": ({"kind", "mean", "std"}, lambda: sampler.Normal(spec["mean"], spec["std"])),
        "discrete": ({"kind", "values"}, lambda: sampler.DiscreteSet(tuple(spec["values"]))),
        "fixed": ({"kind", "value"}, lambda: sampler.Fixed(spec["value"])),
    }
    if kind not in known:
        raise ConfigError(f"params.{name}: unknown kind {kind!r}")
    allowed, build = known[kind]
    extra = set(spec) - allowed
    missing = allowed - set(spec)
    if extra:
        raise ConfigError(f"params.{name}: unknown keys {sorted(extra)}")
    if missing:
        raise ConfigError(f"params.{name}: missing keys {sorted(missing)}")
    try:
        return build()
    except ValueError as err:
        raise ConfigError(f"params.{name}: {err}") from err


def _validate(tree: dict) -> None:
    _check_known_keys(tree, _BASE)
    for (section, key), allowed in _ENUMS.items():
        value = tree[section][key]
        if value not in allowed:
            raise ConfigError(f"{section}.{key} must be one of {allowed}, got {value!r}")
    run = tree["run"]
    if run["ensemble_size"] < 1:
        raise ConfigError("run.ensemble_size must be >= 1")
    if run["concurrency"] < 1:
        raise ConfigError("run.concurrency must be >= 1")
    if run["shards"] < 1:
        raise ConfigError("run.shards must be >= 1")
    t = tree["trainer"]
    if t["batch_size"] < 1:
        raise ConfigError("trainer.batch_size must be >= 1")
    if t["max_batches"] < 0:
        raise ConfigError("trainer.max_batches must be >= 0")
    b = tree["buffer"]
    if b["capacity"] < 1:
        raise ConfigError("buffer.capacity must be >= 1")
    if b["watermark"] < 0:
        raise ConfigError("buffer.watermark must be >= 0")
    if b["capacity"] < t["batch_size"]:
        raise ConfigError(
            f"buffer.capacity {b['capacity']} cannot hold one batch of {t['batch_size']}"
        )
    mode = t["mode"]
    unit = run["sample_unit"]
    if mode == "direct" and unit != "single_step":
        raise ConfigError("direct mode requires sample_unit = single_step")
    if mode == "autoregressive" and unit == "single_step":
        raise ConfigError("autoregressive mode requires step_pair or full_trajectory units")


def from_tree(user_tree: dict, full_scale: bool = False) -> RunConfig:
    if not isinstance(user_tree, dict):
        raise ConfigError("config root must be a table")
    _check_known_keys(user_tree, _BASE)
    experiment = user_tree.get("run", {}).get("experiment", "custom")
    if experiment not in _PRESETS:
        raise ConfigError(
            f"run.experiment must be one of {sorted(_PRESETS)}, got {experiment!r}"
        )
    tree = _merge(_BASE, _PRESETS[experiment])
    if full_scale:
        tree = _merge(tree, _FULL_SCALE[experiment])
    tree = _merge(tree, user_tree)
    tree["run"]["experiment"] = experiment
    _validate(tree)
    return RunConfig(tree)


def load_config(path, full_scale: bool = False) -> RunConfig:
    try:
        with open(path, "rb") as f:
            tree = tomllib.load(f)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"invalid TOML in {path}: {err}") from err
    return from_tree(tree, full_scale)


def space_to_json(space: sampler.ParamSpace) -> list:
    out = []
    for name, dist in space.entries:
        if isinstance(dist, sampler.UniformReal):
            out.append({"name": name, "kind": "uniform", "lo": dist.lo, "hi": dist.hi})
        elif isinstance(dist, sampler.Normal):
            out.append({"name": name, "kind": "normal", "mean": dist.mean, "std": dist.std})
        elif isinstance(dist, sampler.DiscreteSet):
            out.append({"name": name, "kind": "discrete", "values": list(dist.values)})
        else:
            out.append({"name": name, "kind": "fixed", "value": dist.value})
    return out
