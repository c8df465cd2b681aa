"""
Experiment configuration.

An experiment is described by one JSON document::

    {
        "schema_version": 1,
        "name": "light-rate-4-9",
        "model": {"family": "light_bc", "num_users": 2, "num_bits": 2, "blocklength": 9},
        "channel": {"forward_snr_db": 2.0, "feedback_noise_db": "noiseless"},
        "training": {"epochs": 10},
        "sweep": {"feedback_noise_db": [-20, -10]},
        "seed": 7
    }

Unknown keys at any level are rejected. Training settings not given fall back to the
desk-scale defaults of the model family.
"""

import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Optional, Union

from feedback_code_toolkit.codes import CODE_FAMILIES, CodeConfig
from feedback_code_toolkit.exceptions import ConfigError
from feedback_code_toolkit.train_federated import FederatedConfig
from feedback_code_toolkit.train_global import TrainConfig, canonical_hash, desk_defaults


__all__ = [
    "SCHEMA_VERSION",
    "NOISELESS",
    "ModelSettings",
    "ChannelSettings",
    "SweepGrid",
    "EvaluationSettings",
    "ExperimentConfig",
    "per_user_rate",
    "sum_rate",
    "parse_config",
    "load_config",
    "config_to_dict",
    "dump_config",
    "config_hash",
    "training_hash",
    "with_overrides",
]

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
NOISELESS = "noiseless"

SCHEMES = ("broadcast", "tdd")
MODES = ("train", "evaluate")


def per_user_rate(num_bits: int, blocklength: int) -> float:
    return num_bits / blocklength


def sum_rate(num_users: int, num_bits: int, blocklength: int) -> float:
    return num_users * num_bits / blocklength


def _reject_unknown(section: str, data: dict[str, Any], allowed) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")


def _parse_noise(value) -> Optional[float]:
    if value is None or value == NOISELESS:
        return None
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    raise ConfigError(f"feedback noise must be a number of dB or {NOISELESS!r}, got {value!r}")


def _dump_noise(value: Optional[float]):
    return NOISELESS if value is None else value


@dataclass(frozen=True)
class ModelSettings:
    """Family, dimensions and (optional) architecture sizes of the code."""

    family: str = "light_bc"
    num_users: int = 2
    num_bits: int = 2
    blocklength: int = 9
    architecture: dict[str, Any] = field(default_factory=dict)

    def code_config(
        self, num_users: Optional[int] = None, blocklength: Optional[int] = None
    ) -> CodeConfig:
        if self.family not in CODE_FAMILIES:
            raise ConfigError(
                f"unknown model family {self.family!r}; expected one of {sorted(CODE_FAMILIES)}"
            )
        data = {
            "num_users": self.num_users if num_users is None else num_users,
            "num_bits": self.num_bits,
            "blocklength": self.blocklength if blocklength is None else blocklength,
            **self.architecture,
        }
        try:
            return CODE_FAMILIES[self.family].config_class.from_dict(data)
        except TypeError as error:
            raise ConfigError(f"invalid architecture for {self.family}: {error}") from error

    @property
    def sum_rate(self) -> float:
        return sum_rate(self.num_users, self.num_bits, self.blocklength)


@dataclass(frozen=True)
class ChannelSettings:
    forward_snr_db: float = 2.0
    feedback_noise_db: Optional[float] = None


@dataclass(frozen=True)
class SweepGrid:
    """Axes of a sweep; an axis left as None stays at the base experiment's value.

    Attributes:
        feedback_noise_db: Feedback noise powers in dB; None entries are noiseless.
        forward_snr_db: Forward SNRs in dB.
        grad_snr_db: Gradient downlink SNRs in dB (federated runs only); None entries
          are noiseless.
        scheme: "broadcast" or "tdd".
        mode: "train" trains a fresh model per point; "evaluate" loads the checkpoint
          of each point from the output directory.
    """

    feedback_noise_db: Optional[tuple[Optional[float], ...]] = None
    forward_snr_db: Optional[tuple[float, ...]] = None
    grad_snr_db: Optional[tuple[Optional[float], ...]] = None
    scheme: str = "broadcast"
    mode: str = "train"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"sweep scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.mode not in MODES:
            raise ConfigError(f"sweep mode must be one of {MODES}, got {self.mode!r}")
        for name in ("feedback_noise_db", "forward_snr_db", "grad_snr_db"):
            axis = getattr(self, name)
            if axis is not None and len(axis) == 0:
                raise ConfigError(f"sweep axis {name!r} is empty")


@dataclass(frozen=True)
class EvaluationSettings:
    max_samples: int = 100_000
    target_errors: int = 100
    batch_size: int = 10_000

    def __post_init__(self):
        if min(self.max_samples, self.target_errors, self.batch_size) < 1:
            raise ConfigError("evaluation budgets must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    """A complete experiment description.

    The single ``seed`` drives model initialization, training messages and every
    channel noise substream.
    """

    name: str = "experiment"
    model: ModelSettings = field(default_factory=ModelSettings)
    channel: ChannelSettings = field(default_factory=ChannelSettings)
    training: TrainConfig = field(default_factory=TrainConfig)
    federated: Optional[FederatedConfig] = None
    sweep: Optional[SweepGrid] = None
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    output_dir: str = "results"
    seed: int = 0

    @property
    def train_config(self) -> TrainConfig:
        return replace(self.training, seed=self.seed)

    @property
    def federated_config(self) -> Optional[FederatedConfig]:
        if self.federated is None:
            return None
        return replace(self.federated, base=self.train_config)


_TOP_LEVEL = (
    "schema_version",
    "name",
    "model",
    "channel",
    "training",
    "federated",
    "sweep",
    "evaluation",
    "output_dir",
    "seed",
)


def _axis(values, parse=float):
    if values is None:
        return None
    if not isinstance(values, list):
        raise ConfigError(f"sweep axes must be lists, got {values!r}")
    return tuple(parse(v) for v in values)


def _optional_float(value) -> Optional[float]:
    if value is None or value == NOISELESS:
        return None
    return float(value)


def parse_config(data: dict[str, Any]) -> ExperimentConfig:
    """Builds an ExperimentConfig from a parsed JSON document."""
    _reject_unknown("top level", data, _TOP_LEVEL)
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")

    model_data = dict(data.get("model", {}))
    _reject_unknown("model", model_data, [f.name for f in fields(ModelSettings)])
    model = ModelSettings(**model_data)
    model.code_config()

    channel_data = dict(data.get("channel", {}))
    _reject_unknown("channel", channel_data, [f.name for f in fields(ChannelSettings)])
    channel = ChannelSettings(
        float(channel_data.get("forward_snr_db", ChannelSettings.forward_snr_db)),
        _parse_noise(channel_data.get("feedback_noise_db")),
    )

    training_data = dict(data.get("training", {}))
    if "seed" in training_data:
        raise ConfigError("set the top-level 'seed' instead of training.seed")
    base = desk_defaults(model.family).to_dict()
    base.update(training_data)
    table = base.get("lr_table")
    if "lr_table" not in training_data and table is not None and len(table) < base["epochs"]:
        # preset table shorter than the requested epochs
        base["lr_table"] = None
    training = TrainConfig.from_dict(base)

    federated = None
    if data.get("federated") is not None:
        federated_data = dict(data["federated"])
        if "grad_snr_db" in federated_data:
            federated_data["grad_snr_db"] = _optional_float(federated_data["grad_snr_db"])
        federated = FederatedConfig.from_dict(federated_data, base=training)

    sweep = None
    if data.get("sweep") is not None:
        sweep_data = dict(data["sweep"])
        _reject_unknown("sweep", sweep_data, [f.name for f in fields(SweepGrid)])
        sweep = SweepGrid(
            feedback_noise_db=_axis(sweep_data.get("feedback_noise_db"), _parse_noise),
            forward_snr_db=_axis(sweep_data.get("forward_snr_db")),
            grad_snr_db=_axis(sweep_data.get("grad_snr_db"), _optional_float),
            scheme=sweep_data.get("scheme", "broadcast"),
            mode=sweep_data.get("mode", "train"),
        )

    evaluation_data = dict(data.get("evaluation", {}))
    _reject_unknown("evaluation", evaluation_data, [f.name for f in fields(EvaluationSettings)])

    return ExperimentConfig(
        name=str(data.get("name", "experiment")),
        model=model,
        channel=channel,
        training=training,
        federated=federated,
        sweep=sweep,
        evaluation=EvaluationSettings(**evaluation_data),
        output_dir=str(data.get("output_dir", "results")),
        seed=int(data.get("seed", 0)),
    )


def load_config(path: Union[str, os.PathLike]) -> ExperimentConfig:
    """Reads and validates a JSON experiment file.

    Raises:
        ConfigError: If the file cannot be parsed or fails validation.
    """
    try:
        with open(path, encoding="utf-8") as handle:
            data = json.load(handle)
    except (OSError, json.JSONDecodeError) as error:
        raise ConfigError(f"cannot read config {path}: {error}") from error
    config = parse_config(data)
    logger.debug("loaded config %s (%s)", path, config_hash(config)[:12])
    return config


def config_to_dict(config: ExperimentConfig) -> dict[str, Any]:
    training = config.training.to_dict()
    del training["seed"]
    out: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "name": config.name,
        "model": {
            "family": config.model.family,
            "num_users": config.model.num_users,
            "num_bits": config.model.num_bits,
            "blocklength": config.model.blocklength,
            "architecture": dict(config.model.architecture),
        },
        "channel": {
            "forward_snr_db": config.channel.forward_snr_db,
            "feedback_noise_db": _dump_noise(config.channel.feedback_noise_db),
        },
        "training": training,
        "evaluation": {
            "max_samples": config.evaluation.max_samples,
            "target_errors": config.evaluation.target_errors,
            "batch_size": config.evaluation.batch_size,
        },
        "output_dir": config.output_dir,
        "seed": config.seed,
    }
    if config.federated is not None:
        out["federated"] = config.federated.to_dict()
    if config.sweep is not None:
        sweep = config.sweep
        out["sweep"] = {
            "feedback_noise_db": None
            if sweep.feedback_noise_db is None
            else [_dump_noise(v) for v in sweep.feedback_noise_db],
            "forward_snr_db": None if sweep.forward_snr_db is None else list(sweep.forward_snr_db),
            "grad_snr_db": None
            if sweep.grad_snr_db is None
            else [_dump_noise(v) for v in sweep.grad_snr_db],
            "scheme": sweep.scheme,
            "mode": sweep.mode,
        }
    return out


def dump_config(config: ExperimentConfig, path: Union[str, os.PathLike]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(config_to_dict(config), handle, indent=2, sort_keys=True)
        handle.write("\n")


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form of the config."""
    return canonical_hash(config_to_dict(config))


TRAINING_SECTIONS = ("model", "training", "federated", "seed")


def training_hash(config: ExperimentConfig) -> str:
    """SHA-256 over the sections that determine what training produces.

    Channel, evaluation, sweep and output settings are left out: one trained model
    serves every evaluation of its operating point.
    """
    data = config_to_dict(config)
    return canonical_hash({key: data.get(key) for key in TRAINING_SECTIONS})


def with_overrides(
    config: ExperimentConfig,
    seed: Optional[int] = None,
    output_dir: Optional[str] = None,
    max_samples: Optional[int] = None,
    target_errors: Optional[int] = None,
) -> ExperimentConfig:
    """Applies command-line overrides."""
    if seed is not None:
        config = replace(config, seed=seed)
    if output_dir is not None:
        config = replace(config, output_dir=output_dir)
    evaluation = config.evaluation
    if max_samples is not None:
        evaluation = replace(evaluation, max_samples=max_samples)
    if target_errors is not None:
        evaluation = replace(evaluation, target_errors=target_errors)
    return replace(config, evaluation=evaluation)
