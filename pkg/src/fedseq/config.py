"""Experiment configuration: flat dotted-key files, presets, manifests.

Config files are plain text, one ``key = value`` pair per line, with
``#`` comments and dotted section prefixes (``grouping.method = greedy``).
The same keys work as ``--set key=value`` overrides on the CLI.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field, fields

from . import __version__

ALGORITHMS = (
    "centralized",
    "fedavg",
    "fedprox",
    "feddyn",
    "fedseq",
    "fedseqinter",
    "fedseq+prox",
    "fedseq+dyn",
    "fedseqinter+prox",
    "fedseqinter+dyn",
)

# per-algorithm recommended regularizer strengths, applied when the
# config leaves them unset
DEFAULT_MU = {"fedprox": 0.01, "fedseq+prox": 0.01, "fedseqinter+prox": 1.0}
DEFAULT_ALPHA_DYN = {"feddyn": 0.1, "fedseq+dyn": 0.1, "fedseqinter+dyn": 1.0}


class ConfigError(ValueError):
    """Bad key, bad value, or unreadable config file."""


@dataclass
class ExperimentConfig:
    algorithm: str = "fedseq"
    seed: int = 0
    rounds: int = 300
    fraction: float = 0.2
    epochs_client: int = 1
    epochs_superclient: int = 1
    pretrain_epochs: int = 10
    approximator: str = "conf"  # conf | clf | oracle
    confidence_mode: str = "global-mean"
    classifier_mode: str = "all"
    explained_variance: float = 0.9
    output_dir: str = "out"

    data_kind: str = "synthetic"  # synthetic | cifar10
    data_num_classes: int = 10
    data_per_class_train: int = 500
    data_per_class_test: int = 100
    data_dim: int = 32
    data_separation: float = 4.0
    data_path: str = ""
    data_num_clients: int = 50
    data_alpha: float = 0.0
    data_exemplars_per_class: int = 10

    model_kind: str = "mlp"
    model_hidden: tuple[int, ...] = (64, 32)
    model_classifier_layers: int = 2

    optim_lr: float = 0.01
    optim_momentum: float = 0.0
    optim_weight_decay: float = 4e-4
    optim_batch_size: int = 64

    centralized_epochs: int = 60
    centralized_momentum: float = 0.9

    grouping_method: str = "greedy"
    grouping_metric: str = "kl"
    grouping_min_samples: int = 1000
    grouping_max_clients: int = 11

    prox_mu: float | None = None
    dyn_alpha: float | None = None

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(
                f"unknown algorithm {self.algorithm!r}; valid: {', '.join(ALGORITHMS)}"
            )

    # -- derived values --------------------------------------------------

    def resolved_mu(self) -> float:
        if self.prox_mu is not None:
            return self.prox_mu
        return DEFAULT_MU.get(self.algorithm, 0.01)

    def resolved_alpha_dyn(self) -> float:
        if self.dyn_alpha is not None:
            return self.dyn_alpha
        return DEFAULT_ALPHA_DYN.get(self.algorithm, 0.1)

    def objective_kind(self) -> str:
        if self.algorithm in ("fedprox", "fedseq+prox", "fedseqinter+prox"):
            return "prox"
        if self.algorithm in ("feddyn", "fedseq+dyn", "fedseqinter+dyn"):
            return "dyn"
        return "plain"

    def aggregation_kind(self) -> str:
        return "feddyn" if self.algorithm == "feddyn" else "fedavg"

    def to_flat(self) -> dict[str, object]:
        out: dict[str, object] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = " ".join(str(v) for v in value)
            out[f.name.replace("_", ".", 1) if _is_dotted(f.name) else f.name] = value
        return out


_DOTTED_PREFIXES = ("data_", "model_", "optim_", "centralized_", "grouping_",
                    "prox_", "dyn_")


def _is_dotted(field_name: str) -> bool:
    return field_name.startswith(_DOTTED_PREFIXES)


def _field_map() -> dict[str, dataclasses.Field]:
    out = {}
    for f in fields(ExperimentConfig):
        key = f.name.replace("_", ".", 1) if _is_dotted(f.name) else f.name
        out[key] = f
    return out


def valid_keys() -> list[str]:
    return sorted(_field_map())


def _coerce(key: str, raw: str, f: dataclasses.Field) -> object:
    raw = raw.strip()
    ftype = f.type
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "float | None":
            return None if raw in ("", "none", "None") else float(raw)
        if ftype == "tuple[int, ...]":
            parts = raw.replace(",", " ").split()
            return tuple(int(p) for p in parts)
        return raw
    except ValueError as err:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({err})") from None


def parse_assignments(pairs: dict[str, str]) -> dict[str, object]:
    mapping = _field_map()
    values: dict[str, object] = {}
    for key, raw in pairs.items():
        if key not in mapping:
            raise ConfigError(
                f"unknown config key {key!r}; valid keys: {', '.join(valid_keys())}"
            )
        values[mapping[key].name] = _coerce(key, raw, mapping[key])
    return values


def load_config(path: str, overrides: list[str] | None = None) -> ExperimentConfig:
    """Read a flat key/value file and apply ``key=value`` overrides."""
    pairs: dict[str, str] = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                stripped = line.split("#", 1)[0].strip()
                if not stripped:
                    continue
                if "=" not in stripped:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, raw = stripped.split("=", 1)
                pairs[key.strip()] = raw.strip()
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err}") from None
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        pairs[key.strip()] = raw.strip()
    return ExperimentConfig(**parse_assignments(pairs))


def from_preset(name: str, overrides: list[str] | None = None) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; valid: {', '.join(sorted(PRESETS))}")
    pairs = dict(PRESETS[name])
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        pairs[key.strip()] = raw.strip()
    return ExperimentConfig(**parse_assignments(pairs))


# Desk-scale preset: 50 clients on 10-class Gaussian blobs; the grouping
# geometry keeps roughly ten clients per superclient like the full-scale
# setup. The cifar preset carries the full-scale values and is
# long-running by design.
PRESETS: dict[str, dict[str, str]] = {
    "desk-synth": {
        "algorithm": "fedseq",
        "rounds": "300",
        # 0.4 of the five superclients = two concurrent model slots, so the
        # inter-superclient variant is exercised with a real pool
        "fraction": "0.4",
        "data.kind": "synthetic",
        "data.num_classes": "10",
        "data.per_class_train": "500",
        "data.per_class_test": "100",
        "data.dim": "32",
        "data.separation": "4.0",
        "data.num_clients": "50",
        "data.alpha": "0.0",
        "data.exemplars_per_class": "10",
        "model.kind": "mlp",
        "model.hidden": "64 32",
        "model.classifier_layers": "2",
        "optim.lr": "0.01",
        "optim.weight_decay": "0.0004",
        "optim.batch_size": "64",
        "grouping.method": "greedy",
        "grouping.metric": "kl",
        "grouping.min_samples": "1000",
        "grouping.max_clients": "11",
        "pretrain_epochs": "10",
        "centralized.epochs": "60",
    },
    "paper-cifar10": {
        "algorithm": "fedseq",
        "rounds": "10000",
        "fraction": "0.2",
        "data.kind": "cifar10",
        "data.num_classes": "10",
        "data.num_clients": "500",
        "data.alpha": "0.0",
        "data.exemplars_per_class": "10",
        "model.kind": "small-cnn",
        "model.hidden": "120 84",
        "optim.lr": "0.01",
        "optim.weight_decay": "0.0004",
        "optim.batch_size": "64",
        "grouping.method": "greedy",
        "grouping.metric": "kl",
        "grouping.min_samples": "800",
        "grouping.max_clients": "11",
        "pretrain_epochs": "10",
        "centralized.epochs": "300",
        "centralized.momentum": "0.9",
    },
}


@dataclass
class RunManifest:
    config: dict[str, object]
    library_version: str = __version__
    seeds: dict[str, object] = field(default_factory=dict)
    started_at: str = ""
    finished_at: str = ""
    diverged: bool = False
    extras: dict[str, object] = field(default_factory=dict)

    @staticmethod
    def begin(config: ExperimentConfig) -> "RunManifest":
        return RunManifest(
            config=config.to_flat(),
            seeds={"root": config.seed},
            started_at=_now(),
        )

    def finish(self) -> None:
        self.finished_at = _now()

    def write(self, path) -> None:
        payload = dataclasses.asdict(self)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def read(path) -> "RunManifest":
        with open(path) as fh:
            payload = json.load(fh)
        return RunManifest(**payload)


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
