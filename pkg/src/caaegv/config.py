"""Run configuration: JSON document, schema validation and CLI overrides."""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

import jsonschema

from .dataset import build_dataset, read_manifest, scan_directory, synthetic_records
from .evaluation import DEFAULT_THRESHOLDS
from .exceptions import BadConfig
from .experiment import FAST_ARCH
from .losses import ABLATIONS, LossWeights
from .trainer import TrainConfig

MANIFEST_NAME = "dataset.json"
CONFIG_NAME = "config.json"

DEFAULT_CONFIG = {
    "seed": 0,
    "batch_size": 32,
    "epochs": 15,
    "learning_rate": 1e-3,
    "beta1": 0.5,
    "beta2": 0.999,
    "image_size": 64,
    "n_z": 50,
    "lambda": 100.0,
    "gamma": 10.0,
    "phi": 0.01,
    "gender_on": True,
    "vgg_on": True,
    "checkpoint_every": 0,
    "saturating": False,
    "arch": dict(FAST_ARCH),
    "dataset": {"synthetic": {"count": 2000, "seed": 0, "identities": 200, "age_range": [0, 100]}},
    "split": [0.7, 0.15, 0.15],
    "models": list(ABLATIONS),
    "thresholds": list(DEFAULT_THRESHOLDS),
    "evaluation": {"classifier_epochs": 8, "embedder_epochs": 10, "classifier_min_age": 21},
}


def load_schema(name: str = "run_config") -> dict:
    text = resources.files("caaegv").joinpath("schemas").joinpath(f"{name}.schema.json").read_text()
    return json.loads(text)


def validate(doc: dict, schema: str = "run_config") -> dict:
    try:
        jsonschema.validate(doc, load_schema(schema))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise BadConfig(f"{schema} invalid at {where}: {exc.message}") from exc
    return doc


def parse_override(text: str) -> tuple[str, object]:
    """``key.sub=value``; the value is parsed as JSON when possible."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise BadConfig(f"override {text!r} is not of the form KEY=VALUE")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(config: dict, overrides) -> dict:
    out = copy.deepcopy(config)
    for key, value in overrides:
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise BadConfig(f"cannot set {key}: {p} is not an object")
        node[leaf] = value
    return out


def merge_defaults(user: dict) -> dict:
    merged = copy.deepcopy(DEFAULT_CONFIG)
    for key, value in user.items():
        if key in ("dataset", "arch"):
            merged[key] = copy.deepcopy(value)
        elif isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return merged


def load_config(path=None, overrides=()) -> dict:
    """Read, override, validate and complete a run config."""
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise BadConfig(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise BadConfig(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise BadConfig("config must be a JSON object")
    user = apply_overrides(user, overrides)
    validate(user)
    merged = validate(merge_defaults(user))
    if abs(sum(merged["split"]) - 1.0) > 1e-9:
        raise BadConfig(f"split fractions must sum to 1, got {merged['split']}")
    train_config(merged)
    return merged


def write_config(config: dict, directory) -> Path:
    path = Path(directory) / CONFIG_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config, indent=1, sort_keys=True) + "\n")
    return path


def train_config(config: dict, variant: str | None = None) -> TrainConfig:
    flags = ABLATIONS[variant] if variant else None
    return TrainConfig(
        batch_size=config["batch_size"], epochs=config["epochs"], learning_rate=config["learning_rate"],
        beta1=config["beta1"], beta2=config["beta2"], seed=config["seed"], image_size=config["image_size"],
        n_z=config["n_z"], weights=LossWeights(config["lambda"], config["gamma"], config["phi"]),
        gender_on=flags.gender_on if flags else config["gender_on"],
        vgg_on=flags.vgg_on if flags else config["vgg_on"],
        checkpoint_every=config["checkpoint_every"], saturating=config["saturating"], arch=dict(config["arch"]))


def records_from_spec(spec: dict):
    """Records described by a ``dataset`` block (synthetic description or directory)."""
    if "synthetic" in spec:
        s = spec["synthetic"]
        return synthetic_records(s["count"], seed=s.get("seed", 0), identities=s.get("identities"),
                                 age_range=tuple(s.get("age_range", (0, 100))))
    return scan_directory(spec["directory"])


def dataset_splits(config: dict, data=None):
    """(train, val, test) from a prepared directory, an image directory or the config."""
    if data is not None:
        data = Path(data)
        manifest = data / MANIFEST_NAME if data.is_dir() else data
        if manifest.is_file():
            return read_manifest(manifest)
        records = scan_directory(data)
    else:
        records = records_from_spec(config["dataset"])
    return build_dataset(records, tuple(config["split"]), seed=config["seed"])
