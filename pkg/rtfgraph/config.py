"""
Run configuration.

A RunConfig nests every module's settings. Values come from, in increasing
priority: model defaults, a UTF-8 JSON file, environment variables (a .env
file is honoured) and command-line overrides.

Environment variables:
    RTFGRAPH_OUT_DIR   Output directory
    RTFGRAPH_THREADS   Worker threads
    RTFGRAPH_SEED      Global seed (also seeds training)
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional

from dotenv import find_dotenv, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from rtfgraph.errors import ConfigError
from rtfgraph.gcn import TrainConfig
from rtfgraph.room_sim import RoomSpec, SceneSpec
from rtfgraph.rtf_estimation import FeatureConfig
from rtfgraph.signal_core import StftConfig

logger = logging.getLogger(__name__)

Method = Literal["unprocessed", "gevd", "oracle", "knn_rtfs", "self_rtfs"]
Metric = Literal["snr_out", "si_sdr", "stoi", "estoi", "sbf", "npm"]

ALL_METHODS: List[str] = ["unprocessed", "gevd", "oracle", "knn_rtfs", "self_rtfs"]
ALL_METRICS: List[str] = ["snr_out", "si_sdr", "stoi", "estoi", "sbf", "npm"]
GRAPH_MODES = {"knn_rtfs": "knn", "self_rtfs": "self"}

ENV_OVERRIDES = {
    "RTFGRAPH_OUT_DIR": ("out_dir", str),
    "RTFGRAPH_THREADS": ("threads", int),
    "RTFGRAPH_SEED": ("seed", int),
}


class SplitSizes(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    train: int = Field(default=110, ge=2)
    validation: int = Field(default=10, ge=1)
    test: int = Field(default=24, ge=1)

    @property
    def total(self) -> int:
        return self.train + self.validation + self.test


class RunConfig(BaseModel):
    """Everything one pipeline run depends on."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    stft: StftConfig = StftConfig()
    room: RoomSpec = RoomSpec()
    scene: SceneSpec = SceneSpec()
    features: FeatureConfig = FeatureConfig()
    train: TrainConfig = TrainConfig()

    t60s: List[float] = [0.1, 0.3, 0.6]
    snr_grid: List[float] = [-15.0, -10.0, -5.0, 0.0, 5.0, 10.0]
    splits: SplitSizes = SplitSizes()
    noise_draws: int = Field(default=3, ge=1)
    test_draws: int = Field(default=1, ge=1)
    duration_s: float = Field(default=3.0, gt=0.0)
    air_len: int = Field(default=4096, ge=1)
    neighbors: int = Field(default=5, ge=1)

    seed: int = 0
    threads: int = Field(default=1, ge=1)
    out_dir: str = "runs/desk_scale"
    methods: List[Method] = ALL_METHODS
    metrics: List[Metric] = ALL_METRICS
    graph_modes: List[Literal["knn", "self"]] = ["knn", "self"]
    compare_seeds: List[int] = [0, 1, 2]
    example_cache: int = Field(default=64, ge=0)
    dump_wav: bool = False
    dump_wav_examples: int = Field(default=4, ge=0)
    progress: bool = True

    @model_validator(mode="after")
    def _check_run(self):
        if not self.snr_grid:
            raise ValueError("snr_grid must not be empty")
        if len(set(self.snr_grid)) != len(self.snr_grid):
            raise ValueError(f"snr_grid has duplicates: {self.snr_grid}")
        if not self.t60s or min(self.t60s) <= 0:
            raise ValueError(f"t60s must be a non-empty list of positive values, got {self.t60s}")
        if len({round(t * 1000) for t in self.t60s}) != len(self.t60s):
            raise ValueError(f"t60s must be distinct at millisecond resolution, got {self.t60s}")
        if self.splits.total != self.scene.num_positions:
            raise ValueError(f"Splits {self.splits.train}/{self.splits.validation}/{self.splits.test} do not cover "
                             f"the {self.scene.num_positions} grid positions")
        if self.neighbors >= self.splits.train:
            raise ValueError(f"neighbors={self.neighbors} must be below the {self.splits.train} training positions")
        if self.features.d > self.stft.bins:
            raise ValueError(f"Feature length {self.features.d} exceeds {self.stft.bins} STFT bins")
        if self.room.sample_rate * self.duration_s < self.stft.fft_len:
            raise ValueError(f"duration_s={self.duration_s} is shorter than one STFT frame")
        if not self.methods or not self.metrics:
            raise ValueError("methods and metrics must not be empty")
        if not self.compare_seeds:
            raise ValueError("compare_seeds must not be empty")
        return self

    @property
    def num_samples(self) -> int:
        return int(round(self.duration_s * self.room.sample_rate))

    def room_for(self, t60: float) -> RoomSpec:
        return self.room.model_copy(update={"t60": t60})

    def with_seed(self, seed: int) -> "RunConfig":
        return self.model_copy(update={"seed": seed, "train": self.train.model_copy(update={"seed": seed})})


def t60_tag(t60: float) -> str:
    """File tag for a reverberation time, e.g. 0.3 -> 't300'."""
    return f"t{int(round(t60 * 1000))}"


def _set_dotted(data: Dict[str, Any], key: str, value):
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"Cannot override {key!r}: {part!r} is not a section")
    node[parts[-1]] = value


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Build a RunConfig from a JSON file, the environment and dotted-key overrides.

    Args:
        path (str): JSON config file (defaults only when None)
        overrides: Mapping like {"train.loss": "stoi", "threads": 4}; None values are ignored

    Returns:
        RunConfig: Validated configuration

    Raises:
        ConfigError: On unreadable JSON, unknown keys or invalid values
        FileNotFoundError: If path does not exist
    """
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file {path} does not exist")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")

    load_dotenv(find_dotenv(usecwd=True))
    for var, (key, cast) in ENV_OVERRIDES.items():
        raw = os.getenv(var)
        if raw:
            try:
                data[key] = cast(raw)
            except ValueError as e:
                raise ConfigError(f"Environment variable {var}={raw!r} is invalid: {e}") from e
            logger.debug(f"{var} overrides {key}")

    for key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(data, key, value)
    if "seed" in data and "seed" not in data.get("train", {}):
        _set_dotted(data, "train.seed", data["seed"])

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def config_schema() -> str:
    return json.dumps(RunConfig.model_json_schema(), indent=2)
