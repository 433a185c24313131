"""Experiment configuration: an INI file with [data], [model], [train], [eval].

Every key is optional and falls back to the defaults below; unknown sections
or keys are rejected by name. ``config_hash`` digests the fully resolved,
typed values, so reordering keys or spelling out a default leaves it
unchanged. ``data.path`` only says where to cache the dataset and is left out
of the hash.
"""

import configparser
import hashlib
import json
from dataclasses import dataclass

from .model import ProbeConfig
from .synthdata import DatasetVariant, check_variant
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    return tuple(int(t) for t in text.replace(",", " ").split())


def _str(text):
    return text.strip()


def _opt_str(text):
    text = text.strip()
    return text or None


# section -> key -> (parser, default)
SCHEMA = {
    "data": {
        "variant": (_str, "dc-bc"),
        "seed": (int, 0),
        "train": (int, 20000),
        "test": (int, 2000),
        "image_size": (int, 64),
        "glyph_size": (int, 28),
        "path": (_opt_str, None),
    },
    "model": {
        "arch": (_str, "small-conv"),
        "channels": (_ints, (8, 16, 64)),
        "kernel": (int, 3),
        "out_init": (float, 1.0),
        "mlp_hidden": (int, 128),
        "rep_dim": (int, 64),
        "proj_dim": (int, 8),
        "proj_hidden": (int, 64),
        "head_count": (int, 0),
    },
    "train": {
        "positive_mode": (_str, "view-pair"),
        "regularizer": (_str, "none"),
        "lam": (float, 0.0),
        "tau": (float, 0.1),
        "optimizer": (_str, "adam"),
        "lr": (float, 1e-3),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "adam_eps": (float, 1e-8),
        "momentum": (float, 0.9),
        "batch_size": (int, 128),
        "steps": (int, 2000),
        "seed": (int, 0),
        "hflip": (_bool, False),
    },
    "eval": {
        "probe_iterations": (int, 500),
        "probe_tol": (float, 1e-6),
        "probe_step": (float, 2.0),
        "probe_normalize": (_bool, False),
        "probe_whiten": (_bool, False),
        "eps": (float, 1.0),
        "delta": (float, 3.0),
        "view": (int, 0),
    },
}

_UNHASHED = {("data", "path")}


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    data: dict
    model: dict
    train: dict
    eval: dict

    @classmethod
    def defaults(cls):
        return cls(**{s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})

    def section(self, name):
        return getattr(self, name)

    def with_values(self, **sections):
        """Copy with overrides, e.g. ``with_values(train={"seed": 3})``."""
        out = {}
        for name in SCHEMA:
            merged = dict(self.section(name))
            for key, value in sections.get(name, {}).items():
                if key not in SCHEMA[name]:
                    raise ConfigError(f"unknown key [{name}] {key}")
                merged[key] = value
            out[name] = merged
        unknown = set(sections) - set(SCHEMA)
        if unknown:
            raise ConfigError(f"unknown section [{sorted(unknown)[0]}]")
        cfg = ExperimentConfig(**out)
        cfg.validate()
        return cfg

    # -- derived objects

    def variant(self):
        d = self.data
        return DatasetVariant(d["variant"], d["train"], d["test"])

    def train_config(self):
        m, t = self.model, self.train
        return TrainConfig(
            variant=self.data["variant"],
            arch=m["arch"],
            channels=m["channels"],
            kernel=m["kernel"],
            out_init=m["out_init"],
            mlp_hidden=m["mlp_hidden"],
            rep_dim=m["rep_dim"],
            proj_dim=m["proj_dim"],
            proj_hidden=m["proj_hidden"],
            head_count=m["head_count"],
            **t,
        )

    def probe_config(self):
        e = self.eval
        return ProbeConfig(
            iterations=e["probe_iterations"], tol=e["probe_tol"], step=e["probe_step"], normalize=e["probe_normalize"],
            whiten=e["probe_whiten"],
        )

    def validate(self):
        try:
            check_variant(self.data["variant"])
            self.variant()
            self.train_config().encoder_config(self.data["image_size"])
            self.probe_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.eval["view"] not in (0, 1):
            raise ConfigError("[eval] view must be 0 or 1")

    # -- text forms

    def canonical(self):
        return {
            s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(self.section(s).items()) if (s, k) not in _UNHASHED}
            for s in SCHEMA
        }

    @property
    def config_hash(self):
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def to_ini(self):
        lines = []
        for s in SCHEMA:
            lines.append(f"[{s}]")
            for k in SCHEMA[s]:
                lines.append(f"{k} = {_fmt(self.section(s)[k])}".rstrip())
            lines.append("")
        return "\n".join(lines)


def parse_config(text, source="<config>"):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    values = {}
    for name in parser.sections():
        if name not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{name}]")
        values[name] = {}
        for key, raw in parser.items(name):
            if key not in SCHEMA[name]:
                raise ConfigError(f"{source}: unknown key '{key}' in [{name}]")
            conv = SCHEMA[name][key][0]
            try:
                values[name][key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for [{name}] {key}: {exc}") from exc
    return ExperimentConfig.defaults().with_values(**values)


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read(), str(path))


def tiny_config(**overrides):
    """A seconds-scale configuration for smoke tests and demos."""
    base = ExperimentConfig.defaults().with_values(
        data={"train": 64, "test": 64, "image_size": 32, "glyph_size": 16},
        model={"channels": (4, 8, 16), "rep_dim": 16, "proj_dim": 4, "proj_hidden": 16},
        train={"batch_size": 16, "steps": 4},
        eval={"probe_iterations": 50},
    )
    return base.with_values(**overrides) if overrides else base


__all__ = ["ConfigError", "ExperimentConfig", "SCHEMA", "load_config", "parse_config", "tiny_config"]
