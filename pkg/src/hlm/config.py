"""Run configuration: a TOML document mirroring every module's config type.

One document drives the whole pipeline. Unknown sections or keys are
rejected so a typo can never silently fall back to a default, and the
effective (merged) configuration is echoed into every output sidecar.
"""

import copy
import hashlib
import json
from dataclasses import asdict

try:
    import tomllib
except ImportError:                       # python < 3.11
    import tomli as tomllib

from .adapter import AdapterConfig
from .backbone import DenoiserConfig, VAEConfig
from .sampler import GuidanceConfig
from .schedule import make_schedule
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _defaults():
    train = asdict(TrainConfig())
    train.pop("seed")                     # the one seed comes from the CLI
    train["styles_fraction"] = 1.0
    guidance = asdict(GuidanceConfig())
    guidance["timestep_range"] = []       # empty list = active at every step
    return {
        "dataset": {"reps_per_cell": 8, "lengths": [48, 64], "fps": 20.0},
        "vae": asdict(VAEConfig()),
        "denoiser": asdict(DenoiserConfig()),
        "schedule": {"kind": "cosine", "num_steps": 1000},
        "pretrain": {"vae_epochs": 14, "den_epochs": 30, "batch_size": 32,
                     "vae_lr": 1e-3, "den_lr": 3e-4},
        "adapter": asdict(AdapterConfig()),
        "train": train,
        "guidance": guidance,
        "sample": {"length": 64, "n_steps": 50},
        "transfer": {"invert_steps": 600, "n_steps": 50},
        "eval": {"samples_per_style": 8, "length": 64, "n_steps": 25,
                 "topk": 3, "clf_epochs": 300, "clf_lr": 3e-3},
        "ablate": {"fractions": [1.0, 0.25], "samples_per_style": 8,
                   "length": 64, "n_steps": 25, "seeds": [0, 1, 2]},
    }


def _check_type(section, key, value, default):
    if isinstance(default, bool) or isinstance(value, bool):
        ok = isinstance(value, bool) and isinstance(default, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float))
    elif isinstance(default, int):
        ok = isinstance(value, int)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{section}.{key}: expected "
                          f"{type(default).__name__}, got {value!r}")


def load_run_config(path=None, overrides=None):
    """Defaults, then the TOML file, then explicit overrides. Returns the
    effective configuration as a plain nested dict."""
    cfg = copy.deepcopy(_defaults())
    if path is not None:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
        for section, body in doc.items():
            if section not in cfg:
                raise ConfigError(f"unknown config section [{section}]")
            if not isinstance(body, dict):
                raise ConfigError(f"top-level key {section!r} must be a section")
            for key, value in body.items():
                if key not in cfg[section]:
                    raise ConfigError(f"unknown key {section}.{key}")
                _check_type(section, key, value, cfg[section][key])
                cfg[section][key] = value
    for dotted, value in (overrides or {}).items():
        set_value(cfg, dotted, value)
    return cfg


def set_value(cfg, dotted, value):
    """Apply one `section.key = value` override with the same validation the
    file loader uses."""
    if dotted.count(".") != 1:
        raise ConfigError(f"override key must be section.key, got {dotted!r}")
    section, key = dotted.split(".")
    if section not in cfg or key not in cfg[section]:
        raise ConfigError(f"unknown key {dotted}")
    _check_type(section, key, value, cfg[section][key])
    cfg[section][key] = value


def config_digest(cfg):
    """Short stable digest of the effective configuration."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


# -- bridges into the module config types ------------------------------

def vae_config(cfg):
    return VAEConfig(**cfg["vae"])


def denoiser_config(cfg):
    return DenoiserConfig(**cfg["denoiser"])


def adapter_config(cfg):
    return AdapterConfig(**cfg["adapter"])


def train_config(cfg, seed):
    body = dict(cfg["train"])
    body.pop("styles_fraction")
    return TrainConfig(seed=seed, **body)


def guidance_config(cfg):
    body = dict(cfg["guidance"])
    window = body.pop("timestep_range")
    return GuidanceConfig(timestep_range=tuple(window) if window else None,
                          **body)


def schedule_config(cfg):
    return make_schedule(cfg["schedule"]["kind"], cfg["schedule"]["num_steps"])
