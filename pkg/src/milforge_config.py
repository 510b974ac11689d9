"""
milforge project configuration
==============================

A project is described by one TOML file:

    schema_version = 1

    [paths]
    slides = "slides"          # relative paths resolve against the file
    manifests = "manifests"
    features = "features"
    labels = "labels.csv"      # columns: slide_id, label (class name)
    output = "runs"

    [labels]
    classes = ["low", "intermediate", "high"]

    [segmentation]  ... SegmentationConfig fields
    [train]         ... TrainConfig fields
    [heatmap]       ... HeatmapSpec fields

Every section is optional; missing keys take the dataclass defaults.
"""

import logging
import tomllib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Union

import pandas as pd
from dataclasses_json import dataclass_json

from .milforge_errors import ConfigurationError, FormatError, ParameterError
from .milforge_features import LabelSpace
from .milforge_heatmap import HeatmapSpec
from .milforge_tiling import SegmentationConfig
from .milforge_trainer import TrainConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass_json
@dataclass
class ProjectPaths:
    slides: str = "slides"
    manifests: str = "manifests"
    features: str = "features"
    labels: str = "labels.csv"
    output: str = "runs"

    def resolved(self, base: Path) -> "ProjectPaths":
        return ProjectPaths(**{f.name: str((base / getattr(self, f.name)).resolve()) for f in fields(self)})


@dataclass_json
@dataclass
class ProjectConfig:
    schema_version: int = SCHEMA_VERSION
    paths: ProjectPaths = field(default_factory=ProjectPaths)
    labels: LabelSpace = field(default_factory=LabelSpace)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    heatmap: HeatmapSpec = field(default_factory=HeatmapSpec)

    def train_config(self, **overrides) -> TrainConfig:
        """Train section with the project's class list and any non-None overrides applied"""
        overrides = {k: v for k, v in overrides.items() if v is not None}
        overrides.setdefault("classes", list(self.labels.class_names))
        try:
            return replace(self.train, **overrides)
        except TypeError as e:
            raise ConfigurationError(f"invalid training override: {e}") from e

    def require_paths(self, *names: str):
        """Fail when any named path does not exist"""
        missing = [f"{name}={getattr(self.paths, name)}" for name in names
                   if not Path(getattr(self.paths, name)).exists()]
        if missing:
            raise ConfigurationError(f"missing project paths: {', '.join(missing)}")


_SECTIONS = {
    "paths": ProjectPaths,
    "labels": LabelSpace,
    "segmentation": SegmentationConfig,
    "train": TrainConfig,
    "heatmap": HeatmapSpec,
}


def _build_section(name: str, cls, values: Mapping):
    if not isinstance(values, Mapping):
        raise ConfigurationError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    try:
        return cls(**dict(values))
    except (ParameterError, TypeError, ValueError) as e:
        raise ConfigurationError(f"invalid [{name}] section: {e}") from e


def config_from_dict(data: Mapping, base: Optional[Path] = None) -> ProjectConfig:
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigurationError(f"unsupported config schema_version {version}, expected {SCHEMA_VERSION}")
    unknown = sorted(set(data) - set(_SECTIONS) - {"schema_version"})
    if unknown:
        raise ConfigurationError(f"unknown config section(s): {', '.join(unknown)}")
    sections = {name: _build_section(name, cls, data.get(name, {})) for name, cls in _SECTIONS.items()}
    if base is not None:
        sections["paths"] = sections["paths"].resolved(base)
    config = ProjectConfig(schema_version=version, **sections)
    config.train = config.train_config()
    return config


def load_config(path: Optional[Union[str, Path]] = None) -> ProjectConfig:
    """
    Load a project TOML file

    Args:
        path: config file; None gives all defaults relative to the working directory

    Returns:
        ProjectConfig with absolute paths
    """
    if path is None:
        return config_from_dict({}, Path.cwd())
    path = Path(path)
    try:
        with open(path, "rb") as handle:
            data = tomllib.load(handle)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"config file {path} is not valid TOML: {e}") from e
    logger.info(f"Loaded project config {path}")
    return config_from_dict(data, path.parent)


def read_labels(path: Union[str, Path], label_space: LabelSpace,
                known_classes: Optional[Iterable[str]] = None) -> Dict[str, int]:
    """
    Read slide labels from a CSV with ``slide_id`` and ``label`` columns

    Slides whose class is in ``known_classes`` but outside ``label_space``
    (for example the intermediate group of a two-class task) are dropped.

    Returns:
        slide id -> class id
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise FormatError(f"cannot read label file {path}: {e}") from e
    if not {"slide_id", "label"} <= set(frame.columns):
        raise FormatError(f"label file {path} needs 'slide_id' and 'label' columns, has {list(frame.columns)}")
    if frame["slide_id"].duplicated().any():
        duplicates = sorted(frame.loc[frame["slide_id"].duplicated(), "slide_id"].unique())
        raise FormatError(f"label file {path} lists slides more than once: {duplicates}")

    known = set(known_classes or label_space.class_names)
    labels, dropped = {}, 0
    for slide_id, name in zip(frame["slide_id"].str.strip(), frame["label"].str.strip()):
        if name in label_space.class_names:
            labels[slide_id] = label_space.id_of(name)
        elif name in known:
            dropped += 1
        else:
            raise FormatError(f"slide '{slide_id}' has unknown label '{name}'")
    if dropped:
        logger.info(f"Dropped {dropped} slide(s) whose class is not in {label_space.class_names}")
    return labels
