"""This module handles smartfeat.yaml files: the run configuration every subcommand starts from.

All keys are optional::

    seed: 0
    jobs: 4
    attributes: [5_raw, 187_raw, 197_raw]
    features: all,-smooth
    edge_kernel: [-1, 1]
    window: {window_length: 30, horizon: 0, turn_on_cutoff: 30}
    model: {n1: 32, k1: 3, n2: 32, k2: 3, pool: 2, fc: 32, n_class: 2, full_scale: false}
    train: {epochs: 30, batch_size: 32, learning_rate: 0.001, optimizer: adam, patience: 5, min_delta: 0.0001}
    cusum: {init_period: null, slack: 0.0}
    ensemble: {k: 25}
    evaluate: {repeats: 5, test_fraction: 0.25, horizons: [1, 10, 15]}

Unknown keys are errors. Command-line flags override whatever the file says.
"""
from typing import Any, Callable, Dict, List, Optional, Tuple, Union
from dataclasses import dataclass, field, replace
from pathlib import Path
import logging
import os

import yaml

from .dataset import WindowSpec
from .evaluation import ExperimentConfig
from .featurize import EDGE_KERNEL, CusumParams, parse_feature_set
from .ingest import DEFAULT_ATTRIBUTES
from .nn.model import ModelConfig, TrainConfig

l = logging.getLogger(__name__)

__all__ = (
    "CONFIG_NAME",
    "CONFIG_ENV",
    "RunConfig",
    "make_typeddict_constructor",
    "find_config",
    "parse_config",
    "load_config",
)

CONFIG_NAME = "smartfeat.yaml"
CONFIG_ENV = "SMARTFEAT_YAML"


def make_typeddict_constructor(name: str, schema: Dict[str, Callable[[Any], Any]]) -> Callable[[Any], Dict[str, Any]]:
    """Generate a dict constructor function, or a function which will take a dict of parameters, validate and
    transform them according to a schema, and return that dict.

    A converter raising TypeError is reported as an invalid value for ``name.key``. ValueErrors pass through untouched,
    so a nested constructor's message keeps naming the innermost bad key."""

    def inner(thing):
        if thing is None:
            return {}
        if not isinstance(thing, dict):
            raise ValueError(f"{name} must be followed by a mapping")

        kwargs = {}
        for k, v in thing.items():
            if k not in schema:
                raise ValueError(f"Invalid argument to {name}: {k}")
            try:
                kwargs[k] = schema[k](v)
            except TypeError as e:
                raise ValueError(f"Invalid value for {name}.{k}: {v!r}") from e
        return kwargs

    return inner


def _int(thing: Any) -> int:
    if isinstance(thing, bool) or not isinstance(thing, int):
        raise TypeError(f"expected an integer, got {thing!r}")
    return thing


def _float(thing: Any) -> float:
    if isinstance(thing, bool) or not isinstance(thing, (int, float)):
        raise TypeError(f"expected a number, got {thing!r}")
    return float(thing)


def _bool(thing: Any) -> bool:
    if not isinstance(thing, bool):
        raise TypeError(f"expected true or false, got {thing!r}")
    return thing


def _str(thing: Any) -> str:
    if not isinstance(thing, (str, int, float)) or isinstance(thing, bool):
        raise TypeError(f"expected a string, got {thing!r}")
    return str(thing)


def _optional(inner: Callable[[Any], Any]) -> Callable[[Any], Any]:
    return lambda thing: None if thing is None else inner(thing)


def _list_of(inner: Callable[[Any], Any]) -> Callable[[Any], List[Any]]:
    def parse(thing):
        if not isinstance(thing, list):
            raise TypeError(f"expected a list, got {thing!r}")
        return [inner(x) for x in thing]

    return parse


_window = make_typeddict_constructor(
    "window", {"window_length": _int, "horizon": _int, "turn_on_cutoff": _int}
)
_model = make_typeddict_constructor(
    "model",
    {
        "n1": _int,
        "k1": _int,
        "n2": _int,
        "k2": _int,
        "pool": _int,
        "fc": _int,
        "n_class": _int,
        "full_scale": _bool,
    },
)
_train = make_typeddict_constructor(
    "train",
    {
        "epochs": _int,
        "batch_size": _int,
        "learning_rate": _float,
        "optimizer": _str,
        "patience": _int,
        "min_delta": _float,
    },
)
_cusum = make_typeddict_constructor("cusum", {"init_period": _optional(_int), "slack": _float})
_ensemble = make_typeddict_constructor("ensemble", {"k": _int})
_evaluate = make_typeddict_constructor(
    "evaluate", {"repeats": _int, "test_fraction": _float, "horizons": _list_of(_int)}
)
_toplevel = make_typeddict_constructor(
    "smartfeat.yaml",
    {
        "seed": _int,
        "jobs": _optional(_int),
        "attributes": _list_of(_str),
        "features": _str,
        "edge_kernel": _list_of(_float),
        "window": _window,
        "model": _model,
        "train": _train,
        "cusum": _cusum,
        "ensemble": _ensemble,
        "evaluate": _evaluate,
    },
)


@dataclass
class RunConfig:
    """The fully resolved settings of one invocation."""

    seed: int = 0
    jobs: Optional[int] = None
    attributes: List[str] = field(default_factory=lambda: list(DEFAULT_ATTRIBUTES))
    features: str = "all"
    edge_kernel: Tuple[float, ...] = EDGE_KERNEL
    window: WindowSpec = field(default_factory=WindowSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    full_scale: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    cusum: CusumParams = field(default_factory=CusumParams)
    ensemble_k: int = 25
    repeats: int = 5
    test_fraction: float = 0.25
    horizons: List[int] = field(default_factory=lambda: [1, 10, 15])
    source: Optional[str] = None

    def __post_init__(self):
        parse_feature_set(self.features)
        if len(self.edge_kernel) < 2:
            raise ValueError(f"edge_kernel must have at least 2 taps, got {list(self.edge_kernel)}")
        if self.ensemble_k < 1:
            raise ValueError(f"ensemble.k must be at least 1, got {self.ensemble_k}")
        if self.repeats < 1:
            raise ValueError(f"evaluate.repeats must be at least 1, got {self.repeats}")
        if not 0 < self.test_fraction < 1:
            raise ValueError(f"evaluate.test_fraction must be strictly between 0 and 1, got {self.test_fraction}")
        if self.jobs is not None and self.jobs < 1:
            raise ValueError(f"jobs must be at least 1, got {self.jobs}")
        self.train.validate()

    def override(self, **kwargs: Any) -> "RunConfig":
        """Replace top-level fields with every keyword that isn't None."""
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})

    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig(
            spec=self.window,
            model=self.model,
            train=self.train,
            repeats=self.repeats,
            test_fraction=self.test_fraction,
            cusum_params=self.cusum,
            edge_kernel=tuple(self.edge_kernel),
            ensemble_k=self.ensemble_k,
        )

    def to_dict(self) -> Dict[str, Any]:
        """The structured-text form, in the same layout the config file uses."""
        model = self.model.to_dict()
        model.pop("in_channels")
        model.pop("length")
        train = self.train.to_dict()
        train.pop("seed")
        return {
            "seed": self.seed,
            "jobs": self.jobs,
            "attributes": list(self.attributes),
            "features": self.features,
            "edge_kernel": [float(x) for x in self.edge_kernel],
            "window": self.window.to_dict(),
            "model": {**model, "full_scale": self.full_scale},
            "train": train,
            "cusum": {"init_period": self.cusum.init_period, "slack": float(self.cusum.slack)},
            "ensemble": {"k": self.ensemble_k},
            "evaluate": {
                "repeats": self.repeats,
                "test_fraction": self.test_fraction,
                "horizons": list(self.horizons),
            },
        }


def parse_config(data: Any, source: Optional[str] = None) -> RunConfig:
    """Build a `RunConfig` from the parsed contents of a config file."""
    top = _toplevel(data)
    model = top.get("model", {})
    full_scale = model.pop("full_scale", False)
    evaluate = top.get("evaluate", {})
    kwargs: Dict[str, Any] = {
        "window": WindowSpec(**top.get("window", {})),
        "model": ModelConfig.full(**model) if full_scale else ModelConfig(**model),
        "full_scale": full_scale,
        "train": TrainConfig(**top.get("train", {})),
        "cusum": CusumParams(**top.get("cusum", {})),
        "source": source,
    }
    for key in ("seed", "jobs", "attributes", "features"):
        if key in top:
            kwargs[key] = top[key]
    if "edge_kernel" in top:
        kwargs["edge_kernel"] = tuple(top["edge_kernel"])
    if "k" in top.get("ensemble", {}):
        kwargs["ensemble_k"] = top["ensemble"]["k"]
    for key in ("repeats", "test_fraction", "horizons"):
        if key in evaluate:
            kwargs[key] = evaluate[key]
    return RunConfig(**kwargs)


def find_config(explicit: Union[str, Path, None] = None) -> Optional[Path]:
    """Locate the config file: an explicit path, else $SMARTFEAT_YAML, else smartfeat.yaml in the current directory's
    ancestry."""
    if explicit is not None:
        path = Path(explicit)
        if not path.exists():
            raise FileNotFoundError(f"config: no such file {path}")
        return path

    thing = os.getenv(CONFIG_ENV)
    if thing is not None:
        return Path(thing)

    root = Path.cwd()
    while True:
        pth = root / CONFIG_NAME
        if pth.exists():
            return pth
        newroot = root.parent
        if newroot == root:
            return None
        root = newroot


def load_config(path: Union[str, Path, None] = None) -> RunConfig:
    """Read the config file at ``path`` (or wherever `find_config` points); built-in defaults if there is none."""
    found = find_config(path)
    if found is None:
        l.debug("No %s found, using built-in defaults", CONFIG_NAME)
        return RunConfig()
    with open(found, "r", encoding="utf-8") as fp:
        data = yaml.safe_load(fp)
    l.info("Loaded config from %s", found)
    return parse_config(data, str(found))
