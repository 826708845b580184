"""Configuration handling for the SLPD toolkit."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, TypeVar
import json
import math
import os

from .errors import ConfigurationError

_DEFAULT_CONFIG_FILENAMES = (
    "slpd_toolkit.config.json",
    "config.json",
)
_CONFIG_ENV_VAR = "SLPD_TOOLKIT_CONFIG"

CLUSTERING_SOURCES = ("teacher", "student")
INTER_MODES = ("prototype", "region", "off")
INTRA_MODES = ("slide", "global", "off")
SAMPLING_POLICIES = ("uniform", "slide_balanced")
CLUSTER_METRICS = ("sqeuclidean", "cosine")
ACTIVATIONS = ("tanh", "relu", "identity")
PROTOTYPE_HEADS = ("teacher", "student")

_T = TypeVar("_T")
_BOOL_WORDS = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _get(data: Mapping[str, Any], key: str, default: _T, convert: Callable[[Any], _T]) -> _T:
    if key not in data or data[key] is None:
        return default
    try:
        return convert(data[key])
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"Invalid value for {key!r}: {data[key]!r}") from exc


def _as_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, int) and value in (0, 1):
        return bool(value)
    if isinstance(value, str) and value.strip().lower() in _BOOL_WORDS:
        return _BOOL_WORDS[value.strip().lower()]
    raise ValueError(f"not a boolean: {value!r}")


def _section(data: Mapping[str, Any], key: str) -> Mapping[str, Any]:
    value = data.get(key)
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        raise ConfigurationError(f"Section {key!r} must be a JSON object")
    return value


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigurationError(message)


def _choice(value: str, options: tuple[str, ...], name: str) -> None:
    _require(value in options, f"{name} must be one of {', '.join(options)} (got {value!r})")


@dataclass(frozen=True)
class KMeansConfig:
    """Lloyd/k-means++ parameters for one clustering call."""

    M: int = 2
    max_iters: int = 100
    rel_tol: float = 1e-6
    restarts: int = 5
    seed: int = 0
    metric: str = "sqeuclidean"

    def __post_init__(self) -> None:
        _require(self.M >= 1, "M must be >= 1")
        _require(self.max_iters >= 1, "max_iters must be >= 1")
        _require(0 < self.rel_tol < 1, "rel_tol must lie in (0, 1)")
        _require(self.restarts >= 1, "restarts must be >= 1")
        _choice(self.metric, CLUSTER_METRICS, "metric")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "KMeansConfig":
        return cls(
            M=_get(data, "M", 2, int),
            max_iters=_get(data, "max_iters", 100, int),
            rel_tol=_get(data, "rel_tol", 1e-6, float),
            restarts=_get(data, "restarts", 5, int),
            seed=_get(data, "seed", 0, int),
            metric=_get(data, "metric", "sqeuclidean", str),
        )


@dataclass(frozen=True)
class LossWeights:
    """Scales of the intra- and inter-slide terms in the total loss."""

    alpha1: float = 1.0
    alpha2: float = 1.0

    def __post_init__(self) -> None:
        for name in ("alpha1", "alpha2"):
            value = getattr(self, name)
            _require(math.isfinite(value), f"{name} must be finite")
            _require(value >= 0, f"{name} must be >= 0")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "LossWeights":
        return cls(
            alpha1=_get(data, "alpha1", 1.0, float),
            alpha2=_get(data, "alpha2", 1.0, float),
        )


@dataclass(frozen=True)
class ModelConfig:
    """Encoder/head architecture and the teacher-student mechanics."""

    hidden: tuple[int, ...] = (64, 64)
    embed_dim: int = 16
    head_hidden: int = 32
    out_dim: int = 32
    activation: str = "tanh"
    tau_student: float = 0.1
    tau_teacher: float = 0.04
    ema_momentum: float = 0.996
    center_momentum: float = 0.9
    prototype_head: str = "teacher"

    def __post_init__(self) -> None:
        _require(len(self.hidden) == 2, "hidden must list exactly two widths")
        _require(all(width >= 1 for width in self.hidden), "hidden widths must be >= 1")
        _require(self.embed_dim >= 1 and self.head_hidden >= 1, "embed_dim and head_hidden must be >= 1")
        _require(self.out_dim >= 2, "out_dim must be >= 2")
        _choice(self.activation, ACTIVATIONS, "activation")
        _require(self.tau_student > 0 and self.tau_teacher > 0, "temperatures must be positive")
        _require(self.tau_teacher <= self.tau_student, "tau_teacher must not exceed tau_student")
        _require(0.0 <= self.ema_momentum <= 1.0, "ema_momentum must lie in [0, 1]")
        _require(0.0 <= self.center_momentum <= 1.0, "center_momentum must lie in [0, 1]")
        _choice(self.prototype_head, PROTOTYPE_HEADS, "prototype_head")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "ModelConfig":
        return cls(
            hidden=_get(data, "hidden", (64, 64), lambda value: tuple(int(v) for v in value)),
            embed_dim=_get(data, "embed_dim", 16, int),
            head_hidden=_get(data, "head_hidden", 32, int),
            out_dim=_get(data, "out_dim", 32, int),
            activation=_get(data, "activation", "tanh", str),
            tau_student=_get(data, "tau_student", 0.1, float),
            tau_teacher=_get(data, "tau_teacher", 0.04, float),
            ema_momentum=_get(data, "ema_momentum", 0.996, float),
            center_momentum=_get(data, "center_momentum", 0.9, float),
            prototype_head=_get(data, "prototype_head", "teacher", str),
        )


@dataclass(frozen=True)
class TrainConfig:
    """Parameters of one SLPD training run."""

    M: int = 2
    K: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.01
    lr_momentum: float = 0.9
    seed: int = 0
    clustering_source: str = "teacher"
    inter_mode: str = "prototype"
    intra_mode: str = "slide"
    augment_noise_sigma: float = 0.2
    augment_dropout_p: float = 0.1
    sampling: str = "uniform"
    kmeans_max_iters: int = 100
    kmeans_rel_tol: float = 1e-6
    kmeans_restarts: int = 5
    cluster_metric: str = "sqeuclidean"
    record_wall_time: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self) -> None:
        _require(self.M >= 1, "M must be >= 1")
        _require(self.K >= 1 or self.inter_mode != "prototype", "K must be >= 1 when inter_mode=prototype")
        _require(self.epochs >= 0, "epochs must be >= 0")
        _require(self.batch_size >= 1, "batch_size must be >= 1")
        _require(self.lr >= 0, "lr must be >= 0")
        _require(0.0 <= self.lr_momentum < 1.0, "lr_momentum must lie in [0, 1)")
        _choice(self.clustering_source, CLUSTERING_SOURCES, "clustering_source")
        _choice(self.inter_mode, INTER_MODES, "inter_mode")
        _choice(self.intra_mode, INTRA_MODES, "intra_mode")
        _choice(self.sampling, SAMPLING_POLICIES, "sampling")
        _require(self.augment_noise_sigma >= 0, "augment_noise_sigma must be >= 0")
        _require(0.0 <= self.augment_dropout_p < 1.0, "augment_dropout_p must lie in [0, 1)")
        # Delegates the remaining checks to KMeansConfig.
        self.kmeans_config(epoch=0)

    def kmeans_config(self, *, epoch: int, M: Optional[int] = None) -> KMeansConfig:
        """Clustering parameters for ``epoch``; the seed advances once per epoch."""

        return KMeansConfig(
            M=self.M if M is None else M,
            max_iters=self.kmeans_max_iters,
            rel_tol=self.kmeans_rel_tol,
            restarts=self.kmeans_restarts,
            seed=self.seed + epoch,
            metric=self.cluster_metric,
        )

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "TrainConfig":
        defaults = cls()
        return cls(
            M=_get(data, "M", defaults.M, int),
            K=_get(data, "K", defaults.K, int),
            weights=LossWeights.from_mapping(_section(data, "weights")),
            epochs=_get(data, "epochs", defaults.epochs, int),
            batch_size=_get(data, "batch_size", defaults.batch_size, int),
            lr=_get(data, "lr", defaults.lr, float),
            lr_momentum=_get(data, "lr_momentum", defaults.lr_momentum, float),
            seed=_get(data, "seed", defaults.seed, int),
            clustering_source=_get(data, "clustering_source", defaults.clustering_source, str),
            inter_mode=_get(data, "inter_mode", defaults.inter_mode, str),
            intra_mode=_get(data, "intra_mode", defaults.intra_mode, str),
            augment_noise_sigma=_get(data, "augment_noise_sigma", defaults.augment_noise_sigma, float),
            augment_dropout_p=_get(data, "augment_dropout_p", defaults.augment_dropout_p, float),
            sampling=_get(data, "sampling", defaults.sampling, str),
            kmeans_max_iters=_get(data, "kmeans_max_iters", defaults.kmeans_max_iters, int),
            kmeans_rel_tol=_get(data, "kmeans_rel_tol", defaults.kmeans_rel_tol, float),
            kmeans_restarts=_get(data, "kmeans_restarts", defaults.kmeans_restarts, int),
            cluster_metric=_get(data, "cluster_metric", defaults.cluster_metric, str),
            record_wall_time=_get(data, "record_wall_time", defaults.record_wall_time, _as_bool),
            model=ModelConfig.from_mapping(_section(data, "model")),
        )


@dataclass(frozen=True)
class EvalConfig:
    """KNN cross-validation parameters."""

    folds: int = 5
    k_eval: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        _require(self.folds >= 2, "folds must be >= 2")
        _require(self.k_eval >= 1, "k_eval must be >= 1")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "EvalConfig":
        return cls(
            folds=_get(data, "folds", 5, int),
            k_eval=_get(data, "k_eval", 5, int),
            seed=_get(data, "seed", 0, int),
        )


@dataclass(frozen=True)
class SyntheticConfig:
    """Arguments of ``generate_synthetic``."""

    num_slides: int = 40
    regions_per_slide: int = 30
    d_in: int = 32
    num_classes: int = 2
    class_separation: float = 3.0
    within_slide_clusters: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("num_slides", "regions_per_slide", "d_in", "num_classes", "within_slide_clusters"):
            _require(getattr(self, name) >= 1, f"{name} must be >= 1")
        _require(self.class_separation >= 0, "class_separation must be >= 0")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "SyntheticConfig":
        defaults = cls()
        return cls(
            num_slides=_get(data, "num_slides", defaults.num_slides, int),
            regions_per_slide=_get(data, "regions_per_slide", defaults.regions_per_slide, int),
            d_in=_get(data, "d_in", defaults.d_in, int),
            num_classes=_get(data, "num_classes", defaults.num_classes, int),
            class_separation=_get(data, "class_separation", defaults.class_separation, float),
            within_slide_clusters=_get(data, "within_slide_clusters", defaults.within_slide_clusters, int),
            seed=_get(data, "seed", defaults.seed, int),
        )


@dataclass(frozen=True)
class Settings:
    """All runtime settings for the toolkit."""

    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    workers: Optional[int] = None

    def __post_init__(self) -> None:
        _require(self.workers is None or self.workers >= 1, "workers must be >= 1")

    @property
    def effective_workers(self) -> int:
        return self.workers or os.cpu_count() or 1

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "Settings":
        return cls(
            train=TrainConfig.from_mapping(_section(data, "train")),
            eval=EvalConfig.from_mapping(_section(data, "eval")),
            synthetic=SyntheticConfig.from_mapping(_section(data, "synthetic")),
            workers=_get(data, "workers", None, int),
        )

    def to_mapping(self) -> Dict[str, Any]:
        return asdict(self)


def _read_json_config(path: Path) -> Mapping[str, Any]:
    with path.open("r", encoding="utf-8") as file:
        try:
            data = json.load(file)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"Configuration file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, Mapping):
        raise ConfigurationError(f"Configuration file {path} must contain a JSON object")
    return data


def load_settings(config_path: Optional[Path] = None) -> Settings:
    """Load settings from JSON, falling back to built-in defaults."""

    if config_path is not None:
        chosen_path = Path(config_path).expanduser().resolve()
        if not chosen_path.exists():
            raise ConfigurationError(f"Configuration file not found: {chosen_path}")
        return Settings.from_mapping(_read_json_config(chosen_path))

    env_path = os.getenv(_CONFIG_ENV_VAR)
    if env_path:
        return load_settings(Path(env_path))

    for filename in _DEFAULT_CONFIG_FILENAMES:
        candidate = Path.cwd() / filename
        if candidate.exists():
            return Settings.from_mapping(_read_json_config(candidate))

    return Settings()


__all__ = [
    "KMeansConfig",
    "LossWeights",
    "ModelConfig",
    "TrainConfig",
    "EvalConfig",
    "SyntheticConfig",
    "Settings",
    "load_settings",
]
