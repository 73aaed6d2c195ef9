"""Run configuration: one JSON document holding every knob of every command.

Sections map onto the library's own config objects (``StftConfig``,
``LossWeights``, ``AugmentPolicy``, ``OptimConfig``). Unknown keys and
ill-typed values are rejected before any work starts. Infinite SNRs are
written as the string ``"inf"`` so the document stays strict JSON.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .augment import AugmentPolicy
from .errors import InvalidConfigError
from .spectral import StftConfig
from .training import LossWeights, OptimConfig

DEFAULT_SNR_GRID = (-12.5, -10.0, 0.0, 10.0, 20.0, 30.0, 40.0)
NOISEAUG_SNR_GRID = (math.inf,) + tuple(float(v) for v in range(40, -15, -5))
Q_LIST = (70.0, 50.0, 40.0, 20.0, 10.0, 5.0, 1.0, 0.0)


@dataclass(frozen=True)
class DataConfig:
    speech_root: str | None = None
    noise_root: str | None = None
    dev_list: str | None = None
    test_list: str | None = None
    noise_train_fraction: float = 0.8
    # long recording for ``evaluate --noise file``, cropped into one clip per test utterance
    noise_file: str | None = None
    # recognizer early stopping watches the dev split at this SNR (inf = clean dev);
    # finite values mix in training-pool noise under the dev-noise substream
    dev_snr_db: float = math.inf

    def __post_init__(self):
        if not 0.0 <= self.noise_train_fraction <= 1.0:
            raise InvalidConfigError("data.noise_train_fraction must lie in [0, 1]")
        if math.isnan(self.dev_snr_db) or self.dev_snr_db == -math.inf:
            raise InvalidConfigError("data.dev_snr_db must be finite or inf")


@dataclass(frozen=True)
class EvalConfig:
    snr_grid: tuple[float, ...] = DEFAULT_SNR_GRID
    batch_size: int = 256

    def __post_init__(self):
        _check_grid("eval.snr_grid", self.snr_grid)
        if self.batch_size <= 0:
            raise InvalidConfigError("eval.batch_size must be positive")


@dataclass(frozen=True)
class SweepConfig:
    noiseaug_snr_grid: tuple[float, ...] = NOISEAUG_SNR_GRID
    # SNRs of the noisy dev sets scoring the noise-augmentation sweep
    dev_snr_grid: tuple[float, ...] = DEFAULT_SNR_GRID
    q_list: tuple[float, ...] = Q_LIST

    def __post_init__(self):
        _check_grid("sweep.noiseaug_snr_grid", self.noiseaug_snr_grid)
        _check_grid("sweep.dev_snr_grid", self.dev_snr_grid)
        if not self.q_list or any(not 0.0 <= q <= 100.0 for q in self.q_list):
            raise InvalidConfigError("sweep.q_list must be a nonempty list of values in [0, 100]")


@dataclass(frozen=True)
class ToyConfig:
    n_classes: int = 4
    n_per_class: int = 250
    n_noise: int = 40

    def __post_init__(self):
        if not 1 <= self.n_classes <= 4:
            raise InvalidConfigError("toy.n_classes must lie in [1, 4]")
        if self.n_per_class < 5 or self.n_noise < 2:
            raise InvalidConfigError("toy.n_per_class must be >= 5 and toy.n_noise >= 2")


def _check_grid(name: str, grid) -> None:
    if not grid:
        raise InvalidConfigError(f"{name} must not be empty")
    for v in grid:
        if math.isnan(v) or v == -math.inf:
            raise InvalidConfigError(f"{name} entries must be finite or inf, got {v}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs"
    n_classes: int | None = None
    stft: StftConfig = field(default_factory=StftConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)

    def __post_init__(self):
        if self.seed < 0:
            raise InvalidConfigError("seed must be >= 0")
        if self.n_classes is not None and self.n_classes < 2:
            raise InvalidConfigError("n_classes must be >= 2")

    # ------------------------------------------------------------ serialization

    def to_dict(self) -> dict:
        return _encode(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return _decode(cls, doc, "")

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        doc = self.to_dict()
        for item in overrides:
            apply_override(doc, item)
        return RunConfig.from_dict(doc)

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path


def load_config(path: str | os.PathLike | None, overrides: list[str] = ()) -> RunConfig:
    """Read a config file (or start from defaults) and apply ``key.sub=value`` overrides."""
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InvalidConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise InvalidConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise InvalidConfigError(f"{path}: top level must be an object")
    for item in overrides:
        apply_override(doc, item)
    return RunConfig.from_dict(doc)


def apply_override(doc: dict, item: str) -> None:
    """Set ``a.b.c=value`` in ``doc``; the value is parsed as JSON, else taken as a string."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise InvalidConfigError(f"override {item!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    *parents, leaf = key.split(".")
    node = doc
    for p in parents:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise InvalidConfigError(f"override {key!r}: {p!r} is not a section")
    node[leaf] = value


# ---------------------------------------------------------------- (de)coding

def _encode_value(v):
    if dataclasses.is_dataclass(v):
        return _encode(v)
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, tuple):
        return [_encode_value(x) for x in v]
    return v


def _encode(obj) -> dict:
    return {f.name: _encode_value(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def _float(v, where: str) -> float:
    if isinstance(v, str) and v.strip().lower() in ("inf", "+inf", "infinity"):
        return math.inf
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise InvalidConfigError(f"{where}: expected a number, got {v!r}")
    return float(v)


def _coerce(tp, v, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if v is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], v, where)
    if dataclasses.is_dataclass(tp):
        if not isinstance(v, dict):
            raise InvalidConfigError(f"{where}: expected an object")
        return _decode(tp, v, where + ".")
    if origin is tuple:
        if not isinstance(v, list):
            raise InvalidConfigError(f"{where}: expected a list")
        return tuple(_coerce(args[0], x, f"{where}[{i}]") for i, x in enumerate(v))
    if tp is float:
        return _float(v, where)
    if tp is bool:
        if not isinstance(v, bool):
            raise InvalidConfigError(f"{where}: expected true/false, got {v!r}")
        return v
    if tp is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise InvalidConfigError(f"{where}: expected an integer, got {v!r}")
        return v
    if tp is str:
        if not isinstance(v, str):
            raise InvalidConfigError(f"{where}: expected a string, got {v!r}")
        return v
    raise InvalidConfigError(f"{where}: unsupported field type {tp}")


def _decode(cls, doc: dict, prefix: str) -> Any:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise InvalidConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {k: _coerce(hints[k], v, prefix + k) for k, v in doc.items()}
    try:
        return cls(**kwargs)
    except InvalidConfigError as exc:
        raise InvalidConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise InvalidConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from None
