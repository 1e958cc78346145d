"""Flat key = value configuration files (UTF-8, # comments) and the typed
run configuration assembled from them.

Layer stacks are described by a compact one-line syntax, e.g.

    layers = dau:out=16:k=2:sigma=0.5, relu, maxpool, maxpool, dense:out=2

Unknown keys, including in --set overrides, are rejected rather than ignored.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .network import LayerSpec, NetworkSpec
from .optim import TrainConfig


class ConfigError(ValueError):
    pass


def _parse_bool(v):
    low = v.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


# key -> (type converter, default)
KNOWN_KEYS = {
    "seed": (int, 7),
    "precision": (str, "f64"),
    "threads": (int, 1),
    "data": (str, "synthetic"),
    "data.n": (int, 1024),
    "data.n_test": (int, 256),
    "data.offset": (float, 3.0),
    "data.blob_sigma": (float, 1.1),
    "data.noise": (float, 0.05),
    "data.dir": (str, ""),
    "data.train_images": (str, ""),
    "data.train_labels": (str, ""),
    "data.test_images": (str, ""),
    "data.test_labels": (str, ""),
    "data.limit": (int, 0),
    "input_shape": (str, "1x16x16"),
    "classes": (int, 2),
    "layers": (str, ""),
    "lr": (float, 0.01),
    "momentum": (float, 0.9),
    "weight_decay": (float, 0.0005),
    "batch_size": (int, 32),
    "iterations": (int, 2000),
    "schedule": (str, "const"),
    "mu_lr_multiplier": (float, 500.0),
    "augment_mirror": (_parse_bool, False),
    "eval_interval": (int, 0),
    "checkpoint_interval": (int, 0),
    "checkpoint": (str, ""),
    "prune.threshold": (float, 0.0),
    "prune.scope": (str, "per_layer"),
    "analyze.layer": (int, -1),
    "analyze.bins": (int, 24),
    "bench.channels": (int, 64),
    "bench.units": (int, 2),
    "bench.sigma": (float, 0.5),
    "bench.dmax": (float, 4.0),
    "bench.size": (int, 32),
    "bench.batch": (int, 1),
    "bench.warmup": (int, 3),
    "bench.iters": (int, 20),
}

LAYER_ARG_TYPES = {
    "dau": {"out": int, "k": int, "sigma": float, "dmax": float, "mode": str,
            "sigma_learnable": _parse_bool, "mu_init": str, "mu_frozen": _parse_bool},
    "conv": {"out": int, "ksize": int},
    "maxpool": {"size": int},
    "batchnorm": {},
    "relu": {},
    "dense": {"out": int, "in": int},
    "softmax_xent": {},
}


def parse_config_text(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = value.strip()
    return values


def apply_overrides(values, overrides):
    """--set key=value pairs; unknown keys are rejected, not ignored."""
    out = dict(values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown override key {key!r}")
        out[key] = value.strip()
    return out


def typed_values(values):
    out = {}
    for key, (conv, default) in KNOWN_KEYS.items():
        if key in values:
            try:
                out[key] = conv(values[key])
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"key {key!r}: {exc}")
        else:
            out[key] = default
    return out


def parse_layers(text):
    if not text.strip():
        raise ConfigError("config must define 'layers'")
    specs = []
    for piece in text.split(","):
        piece = piece.strip()
        if not piece:
            raise ConfigError("empty layer entry in 'layers'")
        parts = piece.split(":")
        kind = parts[0].strip()
        if kind not in LAYER_ARG_TYPES:
            raise ConfigError(f"unknown layer kind {kind!r}")
        args = {}
        for part in parts[1:]:
            if "=" not in part:
                raise ConfigError(f"layer argument {part!r} is not name=value")
            name, _, value = part.partition("=")
            name = name.strip()
            arg_types = LAYER_ARG_TYPES[kind]
            if name not in arg_types:
                raise ConfigError(f"layer kind {kind!r} has no argument {name!r}")
            try:
                args[name] = arg_types[name](value.strip())
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"layer argument {name!r}: {exc}")
        specs.append(LayerSpec(kind, args))
    return specs


def parse_schedule(text):
    """const | step:<drop,drop,...>:<factor> | poly:<power>"""
    parts = text.strip().split(":")
    kind = parts[0]
    if kind == "const":
        return {"schedule": "const"}
    if kind == "step":
        if len(parts) < 2:
            raise ConfigError("step schedule needs drop points: step:d1,d2:factor")
        drops = tuple(int(d) for d in parts[1].split(",") if d)
        factor = float(parts[2]) if len(parts) > 2 else 0.1
        return {"schedule": "step", "step_drops": drops, "step_factor": factor}
    if kind == "poly":
        power = float(parts[1]) if len(parts) > 1 else 0.9
        return {"schedule": "poly", "poly_power": power}
    raise ConfigError(f"unknown schedule {text!r}")


def parse_input_shape(text):
    parts = text.lower().replace("x", " ").split()
    if len(parts) != 3:
        raise ConfigError(f"input_shape must be CxHxW, got {text!r}")
    return tuple(int(p) for p in parts)


@dataclass
class RunConfig:
    values: dict
    network_spec: NetworkSpec = None
    train_config: TrainConfig = None
    raw_text: str = ""
    source: str = "<config>"

    def __post_init__(self):
        v = self.values
        if v["precision"] not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {v['precision']!r}")
        if self.network_spec is None and v["layers"]:
            self.network_spec = NetworkSpec(
                input_shape=parse_input_shape(v["input_shape"]),
                classes=v["classes"], seed=v["seed"],
                layers=parse_layers(v["layers"]))
        if self.train_config is None:
            sched = parse_schedule(v["schedule"])
            self.train_config = TrainConfig(
                base_lr=v["lr"], momentum=v["momentum"],
                weight_decay=v["weight_decay"], batch_size=v["batch_size"],
                total_iterations=v["iterations"],
                mu_lr_multiplier=v["mu_lr_multiplier"], **sched)

    def __getitem__(self, key):
        return self.values[key]


def load_run_config(path=None, overrides=(), text=None, require_layers=False):
    if text is None:
        if path is None:
            text = ""
            source = "<defaults>"
        else:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
            source = path
    else:
        source = "<inline>"
    values = parse_config_text(text, source)
    values = apply_overrides(values, overrides)
    typed = typed_values(values)
    if require_layers and not typed["layers"]:
        raise ConfigError("this command requires a 'layers' definition in the config")
    return RunConfig(typed, raw_text=text, source=source)


def git_blob_sha1(data):
    """Hash bytes the way git hashes a blob object."""
    h = hashlib.sha1()
    h.update(b"blob %d\x00" % len(data))
    h.update(data)
    return h.hexdigest()
