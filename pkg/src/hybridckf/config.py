"""Experiment configuration: a nested YAML mapping merged over defaults.

Every key has a default, so ``{}`` is a complete config. Overrides use dotted
keys (``filter.q_s=1e-3``) and values in YAML notation. Unknown keys and
ill-typed values raise :class:`ConfigError` naming the dotted key.
"""

import copy
import math

import numpy as np
import yaml

from hybridckf.bptt import BpttConfig
from hybridckf.ckf import FilterConfig
from hybridckf.errors import ConfigError
from hybridckf.retina import DriverConfig, RetinaParams
from hybridckf.state_space import HybridModelConfig, estimate_meas_noise

CONFIG_VERSION = 1
METHODS = ("ckf", "bptt")
TABLE_SNR_LEVELS = [49.53, 39.52, 32.58, 29.51, 22.56]

DEFAULTS = {
    "master_seed": 0,
    "output_dir": "results",
    "n_runs": 10,
    "methods": ["ckf", "bptt"],
    "snr_levels": list(TABLE_SNR_LEVELS),
    "sim": {"dt": 0.01, "train_seconds": 12.0, "test_seconds": 8.0, "integrator": "rk4"},
    "retina": {
        "r_in1": 0.8,
        "r_12": 1.2,
        "r_24": 2.0,
        "r_45": 1.0,
        "r_out5": 0.6,
        "c1": 0.05,
        "c2": 0.08,
        "c4": 0.12,
        "c5": 0.10,
        "drivers": {"pin_mean": 62.0, "pin_amplitude": 8.0, "pin_frequency": 1.0, "pout_mean": 14.0},
    },
    "filter": {
        "q_omega": 1e-7,
        "q_s": 1e-4,
        "meas_noise": "auto",
        "init_weight_var": 0.09,
        "init_pressure_var": 25.0,
        "init_pressures": "from_first_measurement",
        "jitter_base": 1e-9,
        "linear_update": True,
        "window": 50,
        "test_q_p4": 1e-2,
    },
    "bptt": {
        "epochs": 300,
        "truncation_window": "full",
        "init_p4": "steady_state",
        "lr": 5e-3,
        "train_initial_state": False,
    },
}


def _number(key, value, positive=False, nonneg=False):
    if isinstance(value, str):
        try:
            value = float(value)
        except ValueError:
            raise ConfigError(key, f"expected a number, got {value!r}") from None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"expected a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(key, "must be finite")
    if positive and not value > 0:
        raise ConfigError(key, "must be positive")
    if nonneg and value < 0:
        raise ConfigError(key, "must be nonnegative")
    return value


def _integer(key, value, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(key, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(key, f"must be at least {minimum}")
    return value


def _boolean(key, value):
    if not isinstance(value, bool):
        raise ConfigError(key, f"expected true or false, got {value!r}")
    return value


def _vector_or_scalar(key, value, length, **kw):
    if isinstance(value, list):
        if len(value) != length:
            raise ConfigError(key, f"expected {length} values")
        return [_number(key, v, **kw) for v in value]
    return _number(key, value, **kw)


def _meas_noise(key, value):
    if value == "auto":
        return value
    return _vector_or_scalar(key, value, 3, positive=True)


def _init_pressures(key, value):
    if value in ("from_first_measurement", "steady_state"):
        return value
    if isinstance(value, list):
        return _vector_or_scalar(key, value, 4)
    raise ConfigError(key, "expected from_first_measurement, steady_state or 4 pressures")


def _truncation(key, value):
    if value == "full":
        return value
    return _integer(key, value, minimum=0)


def _init_p4(key, value):
    if value == "steady_state":
        return value
    return _number(key, value)


def _optional_nonneg(key, value):
    return None if value is None else _number(key, value, nonneg=True)


def _methods(key, value):
    if not isinstance(value, list) or not value:
        raise ConfigError(key, "expected a nonempty list")
    for m in value:
        if m not in METHODS:
            raise ConfigError(key, f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    if len(set(value)) != len(value):
        raise ConfigError(key, "methods repeat")
    return list(value)


def _snr_levels(key, value):
    if not isinstance(value, list) or not value:
        raise ConfigError(key, "expected a nonempty list")
    levels = [_number(key, v) for v in value]
    if len(set(levels)) != len(levels):
        raise ConfigError(key, "levels repeat")
    return levels


def _integrator(key, value):
    if value not in ("rk4", "euler"):
        raise ConfigError(key, "expected rk4 or euler")
    return value


def _string(key, value):
    if not isinstance(value, str) or not value:
        raise ConfigError(key, "expected a nonempty string")
    return value


_POS = lambda k, v: _number(k, v, positive=True)
_NONNEG = lambda k, v: _number(k, v, nonneg=True)

VALIDATORS = {
    "master_seed": lambda k, v: _integer(k, v, minimum=0),
    "output_dir": _string,
    "n_runs": lambda k, v: _integer(k, v, minimum=1),
    "methods": _methods,
    "snr_levels": _snr_levels,
    "sim.dt": _POS,
    "sim.train_seconds": _POS,
    "sim.test_seconds": _POS,
    "sim.integrator": _integrator,
    **{f"retina.{n}": _POS for n in ("r_in1", "r_12", "r_24", "r_45", "r_out5", "c1", "c2", "c4", "c5")},
    "retina.drivers.pin_mean": _number,
    "retina.drivers.pin_amplitude": _NONNEG,
    "retina.drivers.pin_frequency": _POS,
    "retina.drivers.pout_mean": _number,
    "filter.q_omega": _NONNEG,
    "filter.q_s": lambda k, v: _vector_or_scalar(k, v, 4, nonneg=True),
    "filter.meas_noise": _meas_noise,
    "filter.init_weight_var": _POS,
    "filter.init_pressure_var": _POS,
    "filter.init_pressures": _init_pressures,
    "filter.jitter_base": _POS,
    "filter.linear_update": _boolean,
    "filter.window": lambda k, v: _integer(k, v, minimum=1),
    "filter.test_q_p4": _optional_nonneg,
    "bptt.epochs": lambda k, v: _integer(k, v, minimum=1),
    "bptt.truncation_window": _truncation,
    "bptt.init_p4": _init_p4,
    "bptt.lr": _POS,
    "bptt.train_initial_state": _boolean,
}


def _merge(base, update, prefix=""):
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        if not isinstance(key, str) or key not in base:
            raise ConfigError(dotted, "unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(dotted, "expected a mapping")
            _merge(base[key], value, dotted + ".")
        else:
            base[key] = value


def _validate(tree, prefix=""):
    for key, value in tree.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            _validate(value, dotted + ".")
        else:
            tree[key] = VALIDATORS[dotted](dotted, value)


def parse_override(text):
    """``"a.b=value"`` -> ``{"a": {"b": parsed}}`` with YAML value parsing."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(text, "empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as exc:
        raise ConfigError(key, f"unparseable value: {exc}") from None
    out = value
    for part in reversed(key.split(".")):
        out = {part: out}
    return out


class ExperimentConfig:
    """Validated configuration tree with builders for the domain objects."""

    def __init__(self, tree):
        self.tree = tree

    @classmethod
    def load(cls, path=None, overrides=(), text=None):
        tree = copy.deepcopy(DEFAULTS)
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        if text is not None:
            try:
                user = yaml.safe_load(text)
            except yaml.YAMLError as exc:
                raise ConfigError("<file>", f"invalid YAML: {exc}") from None
            if user is None:
                user = {}
            if not isinstance(user, dict):
                raise ConfigError("<file>", "top level must be a mapping")
            _merge(tree, user)
        for item in overrides:
            _merge(tree, parse_override(item) if isinstance(item, str) else item)
        _validate(tree)
        cfg = cls(tree)
        cfg._check_domain()
        return cfg

    @classmethod
    def from_dict(cls, user):
        return cls.load(overrides=[user])

    def _check_domain(self):
        try:
            self.retina_params()
        except ValueError as exc:
            raise ConfigError("retina", str(exc)) from None
        sim = self.tree["sim"]
        for name in ("train_seconds", "test_seconds"):
            if round(sim[name] / sim["dt"]) < 2:
                raise ConfigError(f"sim.{name}", "horizon must cover at least two steps")

    def __getitem__(self, key):
        return self.tree[key]

    def to_yaml(self):
        return yaml.safe_dump({"config_version": CONFIG_VERSION, **self.tree}, sort_keys=True)

    # builders

    def retina_params(self):
        r = dict(self.tree["retina"])
        drivers = DriverConfig(**r.pop("drivers"))
        return RetinaParams(drivers=drivers, **r)

    def model_config(self, meas_noise):
        f = self.tree["filter"]
        q_s = np.asarray(f["q_s"], dtype=np.float64) if isinstance(f["q_s"], list) else f["q_s"]
        return HybridModelConfig(
            dt=self.tree["sim"]["dt"],
            params=self.retina_params(),
            q_omega=f["q_omega"],
            q_s=q_s,
            meas_noise=meas_noise,
        )

    def meas_noise_for(self, ds):
        """Configured measurement variance, or the one implied by ``ds`` when ``auto``."""
        value = self.tree["filter"]["meas_noise"]
        if value == "auto":
            return estimate_meas_noise(ds)
        return np.asarray(value, dtype=np.float64) if isinstance(value, list) else value

    def filter_config(self, ds):
        f = self.tree["filter"]
        init = f["init_pressures"]
        return FilterConfig(
            model=self.model_config(self.meas_noise_for(ds)),
            init_weight_var=f["init_weight_var"],
            init_pressure_var=f["init_pressure_var"],
            init_pressures=np.asarray(init) if isinstance(init, list) else init,
            jitter_base=f["jitter_base"],
            linear_update=f["linear_update"],
            window=f["window"],
            test_q_p4=f["test_q_p4"],
        )

    def bptt_config(self, seed):
        b = self.tree["bptt"]
        return BpttConfig(
            epochs=b["epochs"],
            truncation_window=b["truncation_window"],
            init_p4=b["init_p4"],
            lr=b["lr"],
            seed=seed,
            # BPTT never reads the noise model
            model=self.model_config(1.0),
            train_initial_state=b["train_initial_state"],
        )
