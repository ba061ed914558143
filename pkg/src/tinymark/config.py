"""Declarative model configuration: parsing, validation, and serialization.

A configuration document is YAML with the keys below. FC and CNN models use
the layer grammar directly; RNN models add ``rnn_kind``, ``rnn_units``,
``sequence_length`` and ``embedding_dim``::

    model_type: "CNN"
    convs_params: [[8, 3, 1], [0, 2, 2], [16, 3, 1], [0, 0, 0]]
    denses_params: [64, 16]
    convs_dropout: 0.25
    denses_dropout: 0.10
    activation: "relu"
    use_batch_norm: False
    epochs: 50
    batch_size: 32
    dataset:
        name: "mnist"
        args:
            flat_features: False
    random_seed: 42

Each ``convs_params`` entry is ``[channels, kernel, stride]``. ``channels == 0``
selects max pooling with the given kernel/stride; ``channels == 0`` together
with ``kernel == 0`` selects global average pooling. The output layer width and
the loss are derived from the dataset and never appear in the document.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigSyntaxError, TinymarkError, UnsupportedModelType, ValidationError

MODEL_TYPES = ("FC", "CNN", "RNN")
ACTIVATIONS = ("relu", "tanh", "sigmoid", "leaky_relu")
RNN_KINDS = ("simple", "lstm", "gru")

DATASET_NAMES = (
    "randomset_classification",
    "randomset_regression",
    "randomset_sequence",
    "sinus",
    "csv_file",
)
# Shape presets: synthetic random data with the input geometry of the public
# dataset of the same name. Nothing is downloaded.
DATASET_PRESETS = {
    "mnist": {"image_shape": (28, 28, 1), "num_classes": 10},
    "cifar10": {"image_shape": (32, 32, 3), "num_classes": 10},
}

_DATASET_ARGS = {
    "randomset_classification": {"flat_features", "feature_dim", "image_shape", "num_classes"},
    "randomset_regression": {"flat_features", "feature_dim", "image_shape"},
    "randomset_sequence": {"feature_dim", "num_classes", "sequence_length"},
    "sinus": {"flat_features"},
    "csv_file": {"path", "flat_features"},
    "mnist": {"flat_features"},
    "cifar10": {"flat_features"},
}

_TOP_KEYS = (
    "model_type",
    "convs_params",
    "denses_params",
    "convs_dropout",
    "denses_dropout",
    "activation",
    "use_batch_norm",
    "rnn_kind",
    "rnn_units",
    "sequence_length",
    "embedding_dim",
    "epochs",
    "batch_size",
    "dataset",
    "random_seed",
)
_RNN_KEYS = ("rnn_kind", "rnn_units", "sequence_length", "embedding_dim")


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    flat_features: bool = True
    feature_dim: int | None = None
    image_shape: tuple[int, int, int] | None = None
    num_classes: int | None = None
    sequence_length: int | None = None
    path: str | None = None

    @property
    def task(self) -> str:
        if self.name in DATASET_PRESETS or self.name == "randomset_classification":
            return "classification"
        if self.name == "randomset_sequence" and self.num_classes is not None:
            return "classification"
        return "regression"

    def resolved_image_shape(self) -> tuple[int, int, int] | None:
        if self.name in DATASET_PRESETS:
            return DATASET_PRESETS[self.name]["image_shape"]
        return self.image_shape

    def resolved_num_classes(self) -> int | None:
        if self.name in DATASET_PRESETS:
            return DATASET_PRESETS[self.name]["num_classes"]
        return self.num_classes

    def to_dict(self) -> dict[str, Any]:
        args: dict[str, Any] = {}
        for key in sorted(_DATASET_ARGS[self.name]):
            value = getattr(self, key)
            if key == "flat_features":
                args[key] = value
            elif value is not None:
                args[key] = list(value) if key == "image_shape" else value
        return {"name": self.name, "args": args}


@dataclass(frozen=True)
class ModelSpec:
    model_type: str
    dataset: DatasetSpec
    convs_params: tuple[tuple[int, int, int], ...] = ()
    denses_params: tuple[int, ...] = ()
    convs_dropout: float = 0.0
    denses_dropout: float = 0.0
    activation: str = "relu"
    use_batch_norm: bool = False
    rnn_kind: str | None = None
    rnn_units: int | None = None
    sequence_length: int | None = None
    embedding_dim: int | None = None
    # Accepted and echoed in reports; no training happens.
    epochs: int = 1
    batch_size: int = 32
    random_seed: int = 0

    @property
    def effective_sequence_length(self) -> int | None:
        return self.sequence_length if self.sequence_length is not None else self.dataset.sequence_length

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "model_type": self.model_type,
            "convs_params": [list(c) for c in self.convs_params],
            "denses_params": list(self.denses_params),
            "convs_dropout": self.convs_dropout,
            "denses_dropout": self.denses_dropout,
            "activation": self.activation,
            "use_batch_norm": self.use_batch_norm,
        }
        if self.model_type == "RNN":
            for key in _RNN_KEYS:
                if getattr(self, key) is not None:
                    out[key] = getattr(self, key)
        out["epochs"] = self.epochs
        out["batch_size"] = self.batch_size
        out["dataset"] = self.dataset.to_dict()
        out["random_seed"] = self.random_seed
        return out

    def digest(self) -> str:
        """Stable content hash, used as the model's cache identity."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- field coercion ---------------------------------------------------------


def _int(value: Any, path: str, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(path, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ValidationError(path, f"must be >= {minimum}, got {value}")
    return value


def _fraction(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(path, f"expected a number, got {value!r}")
    value = float(value)
    if not 0.0 <= value < 1.0:
        raise ValidationError(path, f"must be in [0, 1), got {value}")
    return value


def _flag(value: Any, path: str) -> bool:
    if not isinstance(value, bool):
        raise ValidationError(path, f"expected a boolean, got {value!r}")
    return value


def _choice(value: Any, path: str, options: tuple[str, ...]) -> str:
    if value not in options:
        raise ValidationError(path, f"must be one of {', '.join(options)}; got {value!r}")
    return value


def _list(value: Any, path: str) -> list:
    if not isinstance(value, list):
        raise ValidationError(path, f"expected a list, got {value!r}")
    return value


def _conv_entry(raw: Any, path: str) -> tuple[int, int, int]:
    entry = _list(raw, path)
    if len(entry) != 3:
        raise ValidationError(path, "expected [channels, kernel, stride]")
    channels = _int(entry[0], f"{path}[0]", 0)
    kernel = _int(entry[1], f"{path}[1]", 0)
    # global average pooling ignores its stride; the canonical form writes 0
    is_gap = channels == 0 and kernel == 0
    stride = _int(entry[2], f"{path}[2]", 0 if is_gap else 1)
    if channels > 0 and kernel == 0:
        raise ValidationError(path, "a convolution needs kernel >= 1")
    return channels, kernel, stride


def parse_dataset(raw: Any, path: str = "dataset") -> DatasetSpec:
    if not isinstance(raw, dict):
        raise ValidationError(path, "expected a mapping with 'name' and optional 'args'")
    unknown = sorted(set(raw) - {"name", "args"})
    if unknown:
        raise ValidationError(path, f"unknown keys: {', '.join(unknown)}")
    name = _choice(raw.get("name"), f"{path}.name", DATASET_NAMES + tuple(DATASET_PRESETS))
    args = raw.get("args") or {}
    if not isinstance(args, dict):
        raise ValidationError(f"{path}.args", "expected a mapping")
    unknown = sorted(set(args) - _DATASET_ARGS[name])
    if unknown:
        raise ValidationError(f"{path}.args", f"unknown keys for {name}: {', '.join(unknown)}")

    a = f"{path}.args"
    flat = _flag(args["flat_features"], f"{a}.flat_features") if "flat_features" in args else True
    feature_dim = _int(args["feature_dim"], f"{a}.feature_dim", 1) if "feature_dim" in args else None
    num_classes = _int(args["num_classes"], f"{a}.num_classes") if "num_classes" in args else None
    seq_len = _int(args["sequence_length"], f"{a}.sequence_length", 1) if "sequence_length" in args else None
    image_shape = None
    if "image_shape" in args:
        dims = _list(args["image_shape"], f"{a}.image_shape")
        if len(dims) != 3:
            raise ValidationError(f"{a}.image_shape", "expected [height, width, channels]")
        image_shape = tuple(_int(d, f"{a}.image_shape[{i}]", 1) for i, d in enumerate(dims))
    csv_path = None
    if "path" in args:
        if not isinstance(args["path"], str) or not args["path"]:
            raise ValidationError(f"{a}.path", "expected a non-empty string")
        csv_path = args["path"]

    if name == "randomset_classification" and (num_classes is None or num_classes < 2):
        raise ValidationError(f"{a}.num_classes", "classification requires num_classes >= 2")
    if name in ("randomset_classification", "randomset_regression"):
        if flat and feature_dim is None:
            raise ValidationError(f"{a}.feature_dim", "required when flat_features is true")
        if not flat and image_shape is None:
            raise ValidationError(f"{a}.image_shape", "required when flat_features is false")
    if name == "randomset_sequence":
        if num_classes is not None and num_classes < 2:
            raise ValidationError(f"{a}.num_classes", "must be >= 2 (token vocabulary size)")
        if feature_dim is None and num_classes is None:
            raise ValidationError(a, "randomset_sequence needs feature_dim or num_classes")
    if name == "csv_file" and csv_path is None:
        raise ValidationError(f"{a}.path", "required for csv_file")

    return DatasetSpec(
        name=name,
        flat_features=flat,
        feature_dim=feature_dim,
        image_shape=image_shape,
        num_classes=num_classes,
        sequence_length=seq_len,
        path=csv_path,
    )


def model_spec_from_dict(doc: Any) -> ModelSpec:
    if not isinstance(doc, dict):
        raise ValidationError("<root>", "expected a mapping at the top level")
    unknown = sorted(set(doc) - set(_TOP_KEYS))
    if unknown:
        raise ValidationError("<root>", f"unknown keys: {', '.join(unknown)}")
    for required in ("model_type", "dataset"):
        if required not in doc:
            raise ValidationError(required, "missing required key")

    model_type = doc["model_type"]
    if model_type not in MODEL_TYPES:
        raise UnsupportedModelType(f"model_type {model_type!r} is not one of {', '.join(MODEL_TYPES)}")

    convs = tuple(
        _conv_entry(entry, f"convs_params[{i}]")
        for i, entry in enumerate(_list(doc.get("convs_params", []), "convs_params"))
    )
    denses = tuple(
        _int(n, f"denses_params[{i}]", 1)
        for i, n in enumerate(_list(doc.get("denses_params", []), "denses_params"))
    )
    dataset = parse_dataset(doc["dataset"])

    kwargs: dict[str, Any] = {}
    if "convs_dropout" in doc:
        kwargs["convs_dropout"] = _fraction(doc["convs_dropout"], "convs_dropout")
    if "denses_dropout" in doc:
        kwargs["denses_dropout"] = _fraction(doc["denses_dropout"], "denses_dropout")
    if "activation" in doc:
        kwargs["activation"] = _choice(doc["activation"], "activation", ACTIVATIONS)
    if "use_batch_norm" in doc:
        kwargs["use_batch_norm"] = _flag(doc["use_batch_norm"], "use_batch_norm")
    if "epochs" in doc:
        kwargs["epochs"] = _int(doc["epochs"], "epochs", 0)
    if "batch_size" in doc:
        kwargs["batch_size"] = _int(doc["batch_size"], "batch_size", 1)
    if "random_seed" in doc:
        kwargs["random_seed"] = _int(doc["random_seed"], "random_seed")

    if model_type == "RNN":
        kwargs["rnn_kind"] = _choice(doc.get("rnn_kind"), "rnn_kind", RNN_KINDS)
        if "rnn_units" not in doc:
            raise ValidationError("rnn_units", "missing required key for RNN models")
        kwargs["rnn_units"] = _int(doc["rnn_units"], "rnn_units", 1)
        if doc.get("sequence_length") is not None:
            kwargs["sequence_length"] = _int(doc["sequence_length"], "sequence_length", 1)
        if doc.get("embedding_dim") is not None:
            kwargs["embedding_dim"] = _int(doc["embedding_dim"], "embedding_dim", 1)
    else:
        present = [k for k in _RNN_KEYS if doc.get(k) is not None]
        if present:
            raise ValidationError(present[0], f"only valid for RNN models, not {model_type}")

    if model_type == "FC" and convs:
        raise ValidationError("convs_params", "FC models must not have convolution layers")
    if model_type == "RNN":
        if convs:
            raise ValidationError("convs_params", "RNN models must not have convolution layers")
        if dataset.name != "randomset_sequence":
            raise ValidationError("dataset.name", "RNN models require the randomset_sequence dataset")
        seq = kwargs.get("sequence_length")
        if seq is not None and dataset.sequence_length is not None and seq != dataset.sequence_length:
            raise ValidationError("sequence_length", "disagrees with dataset.args.sequence_length")
        if seq is None and dataset.sequence_length is None:
            raise ValidationError("sequence_length", "required (here or in dataset.args)")
        if kwargs.get("embedding_dim") is not None and dataset.num_classes is None:
            raise ValidationError("embedding_dim", "needs dataset.args.num_classes as the vocabulary size")
        if kwargs.get("embedding_dim") is None and dataset.feature_dim is None:
            raise ValidationError("dataset.args.feature_dim", "required for RNN models without an embedding")
    elif dataset.name == "randomset_sequence":
        raise ValidationError("dataset.name", f"randomset_sequence is only valid for RNN models, not {model_type}")
    if model_type == "CNN":
        if dataset.resolved_image_shape() is None or dataset.flat_features:
            raise ValidationError("dataset.args.flat_features", "CNN models need image-shaped input (flat_features: false)")

    return ModelSpec(
        model_type=model_type,
        dataset=dataset,
        convs_params=convs,
        denses_params=denses,
        **kwargs,
    )


def parse_model_config(text: str) -> ModelSpec:
    """Parse a YAML configuration document into a validated ModelSpec."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigSyntaxError(str(exc)) from exc
    return model_spec_from_dict(doc)


def dump_model_config(spec: ModelSpec) -> str:
    return yaml.safe_dump(spec.to_dict(), sort_keys=False, default_flow_style=None)


def load_model_config(path: str | Path) -> ModelSpec:
    """Parse a config file; a relative csv_file path resolves against the file's directory."""
    path = Path(path)
    spec = parse_model_config(path.read_text(encoding="utf-8"))
    if spec.dataset.name == "csv_file":
        data = Path(spec.dataset.path)
        if not data.is_absolute():
            data = path.parent / data
        if not data.is_file():
            raise ValidationError("dataset.args.path", f"csv file not found: {data}")
        spec = replace(spec, dataset=replace(spec.dataset, path=str(data)))
    return spec


@dataclass
class ScanResult:
    models: list[tuple[str, ModelSpec]] = field(default_factory=list)
    diagnostics: list[tuple[str, str]] = field(default_factory=list)


def scan_config_dir(path: str | Path) -> ScanResult:
    """Parse every ``.yaml``/``.yml`` file in ``path`` in filename order.

    Per-file failures are collected in ``diagnostics`` as ``(filename, message)``
    and never abort the scan. A missing or unreadable directory raises OSError.
    """
    directory = Path(path)
    if not directory.is_dir():
        raise NotADirectoryError(f"config directory not found: {directory}")
    result = ScanResult()
    files = sorted(p for p in directory.iterdir() if p.is_file() and p.suffix in (".yaml", ".yml"))
    for file in files:
        try:
            spec = load_model_config(file)
        except (TinymarkError, OSError, UnicodeDecodeError) as exc:
            result.diagnostics.append((file.name, f"{type(exc).__name__}: {exc}"))
            continue
        result.models.append((file.stem, spec))
    return result

