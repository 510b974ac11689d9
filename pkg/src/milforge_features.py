"""
milforge features: instance embeddings and the MILF file format
================================================================

A slide becomes a ``FeatureBag``: a K x d matrix of patch embeddings in
manifest order plus the slide label. Embeddings either come from an
external CNN (imported from a raw float32 stream with a JSON sidecar) or
from the built-in statistical extractor ``baseline_extract``.

MILF layout (little-endian):

    magic "MILF" | version u16 | flags u16 | d u32 | K u32
    | slide-id length u16 + UTF-8 bytes | label i16 (-1 unlabeled) | mag u8
    | payload K*d float32 row-major | CRC32(payload) u32
"""

import json
import logging
import os
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from dataclasses_json import dataclass_json

from .milforge_errors import (
    AlignmentError,
    ChecksumError,
    ConfigurationError,
    DimensionError,
    EmptyBagError,
    FormatError,
    MissingEmbeddingsError,
    ShapeError,
)
from .milforge_tiling import Magnification, PatchGrid, SlidePyramid, extract_patch_pixels

logger = logging.getLogger(__name__)

MAGIC = b"MILF"
FORMAT_VERSION = 1
UNLABELED = -1
BASELINE_DIM = 64
HISTOGRAM_BINS = 16
FOREGROUND_SATURATION = 8 / 255.0
FEATURE_SUFFIX = ".milf"

_FIXED_HEAD = struct.Struct("<4sHHII")
_SLIDE_LEN = struct.Struct("<H")
_TAIL_HEAD = struct.Struct("<hB")
_CRC = struct.Struct("<I")
_PAYLOAD_DTYPE = np.dtype("<f4")

MagnificationTag = Union[str, Magnification]


@dataclass_json
@dataclass
class LabelSpace:
    """Ordered class names; class ids are list positions"""
    class_names: List[str] = field(default_factory=lambda: ["low", "intermediate", "high"])

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise ConfigurationError(f"need at least two classes, got {self.class_names}")
        if len(set(self.class_names)) != len(self.class_names):
            raise ConfigurationError(f"duplicate class names in {self.class_names}")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def id_of(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise ConfigurationError(f"unknown class '{name}', expected one of {self.class_names}") from None

    def name_of(self, class_id: int) -> str:
        return self.class_names[class_id]

    def restrict(self, n_classes: int) -> "LabelSpace":
        """
        Reduce to ``n_classes`` classes

        Two classes keeps the extremes (first and last), dropping the
        intermediate group(s).
        """
        if n_classes == self.n_classes:
            return LabelSpace(list(self.class_names))
        if n_classes == 2:
            return LabelSpace([self.class_names[0], self.class_names[-1]])
        raise ConfigurationError(f"cannot restrict {self.n_classes} classes to {n_classes}")


@dataclass
class FeatureBag:
    """One slide's instance embeddings (row order == manifest order)"""
    slide_id: str
    magnification: Magnification
    features: np.ndarray
    label: int = UNLABELED

    def __post_init__(self):
        self.magnification = Magnification.parse(self.magnification)
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise ShapeError(f"bag '{self.slide_id}' features must be a K x d matrix", features.shape)
        if features.shape[0] == 0:
            raise EmptyBagError(f"bag '{self.slide_id}' has no instances")
        if features.shape[1] == 0:
            raise ShapeError(f"bag '{self.slide_id}' has zero-width embeddings", features.shape)
        if not np.all(np.isfinite(features)):
            raise FormatError(f"bag '{self.slide_id}' contains non-finite embedding values")
        self.features = np.ascontiguousarray(features)
        self.label = int(self.label)

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_labeled(self) -> bool:
        return self.label >= 0

    def with_label(self, label: int) -> "FeatureBag":
        return FeatureBag(self.slide_id, self.magnification, self.features, label)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureBag):
            return NotImplemented
        return (self.slide_id == other.slide_id and self.magnification == other.magnification
                and self.label == other.label and self.features.shape == other.features.shape
                and self.features.tobytes() == other.features.tobytes())


# -- baseline extractor ------------------------------------------------------

def baseline_extract(patch: np.ndarray) -> np.ndarray:
    """
    Deterministic 64-d colour/texture descriptor of one 256x256 RGB patch

    Layout: channel means (3), channel variances (3), 16-bin histograms per
    channel (48), gradient-magnitude mean/variance (2), saturation
    mean/variance (2), foreground fraction (1), zero padding (5). Every
    value lies in [0, 1].
    """
    patch = np.asarray(patch)
    if patch.shape != (256, 256, 3):
        raise ShapeError("baseline_extract expects a 256x256x3 patch", patch.shape)
    if patch.dtype == np.uint8:
        rgb8 = np.ascontiguousarray(patch)
    else:
        rgb8 = np.rint(np.clip(patch.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    rgb = rgb8.astype(np.float64) / 255.0

    means = rgb.mean(axis=(0, 1))
    variances = rgb.var(axis=(0, 1))
    histograms = [np.histogram(rgb[:, :, c], bins=HISTOGRAM_BINS, range=(0.0, 1.0))[0] / rgb[:, :, c].size
                  for c in range(3)]

    gray = cv2.cvtColor(rgb8, cv2.COLOR_RGB2GRAY).astype(np.float64) / 255.0
    gx = cv2.Sobel(gray, cv2.CV_64F, 1, 0, ksize=3)
    gy = cv2.Sobel(gray, cv2.CV_64F, 0, 1, ksize=3)
    # a 3x3 Sobel on [0, 1] input is bounded by 4 per axis
    gradient = np.sqrt(gx * gx + gy * gy) / (4.0 * np.sqrt(2.0))

    saturation = cv2.cvtColor(rgb8, cv2.COLOR_RGB2HSV)[:, :, 1].astype(np.float64) / 255.0
    foreground = float(np.mean(saturation > FOREGROUND_SATURATION))

    vector = np.concatenate([
        means, variances, *histograms,
        [gradient.mean(), gradient.var()],
        [saturation.mean(), saturation.var()],
        [foreground],
    ])
    return np.pad(vector, (0, BASELINE_DIM - vector.size))


def extract_bag(slide: SlidePyramid, grid: PatchGrid, label: int = UNLABELED, jobs: int = 1) -> FeatureBag:
    """
    Run ``baseline_extract`` over every patch of a grid

    Patches are processed in parallel when ``jobs > 1``; rows keep manifest order.
    """
    if not grid.anchors:
        raise EmptyBagError(f"slide '{grid.slide_id}' has no tissue patches at {grid.magnification.value}")

    def featurize(anchor):
        return baseline_extract(extract_patch_pixels(slide, anchor, grid.magnification, grid.patch_size))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            rows = list(executor.map(featurize, grid.anchors))
    else:
        rows = [featurize(anchor) for anchor in grid.anchors]
    logger.info(f"Featurized '{grid.slide_id}': {len(rows)} patches x {BASELINE_DIM} dims")
    return FeatureBag(grid.slide_id, grid.magnification, np.vstack(rows), label)


# -- MILF codec --------------------------------------------------------------

def encode_bag(bag: FeatureBag) -> bytes:
    slide_bytes = bag.slide_id.encode("utf-8")
    if len(slide_bytes) > 0xFFFF:
        raise FormatError(f"slide id of {len(slide_bytes)} bytes does not fit the header")
    if not -1 <= bag.label <= 0x7FFF:
        raise FormatError(f"label id {bag.label} does not fit the header")
    with np.errstate(over="ignore"):
        payload_array = bag.features.astype(_PAYLOAD_DTYPE)
    if not np.all(np.isfinite(payload_array)):
        raise FormatError(f"bag '{bag.slide_id}' has values outside the float32 range")
    payload = payload_array.tobytes(order="C")
    return b"".join([
        _FIXED_HEAD.pack(MAGIC, FORMAT_VERSION, 0, bag.dim, bag.n_instances),
        _SLIDE_LEN.pack(len(slide_bytes)),
        slide_bytes,
        _TAIL_HEAD.pack(bag.label, bag.magnification.code),
        payload,
        _CRC.pack(zlib.crc32(payload)),
    ])


def decode_bag(data: bytes, source: str = "<bytes>", expected_dim: Optional[int] = None) -> FeatureBag:
    view = memoryview(data)
    if len(view) < _FIXED_HEAD.size:
        raise ChecksumError(f"{source}: truncated header ({len(view)} bytes)")
    magic, version, _flags, dim, count = _FIXED_HEAD.unpack_from(view, 0)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {bytes(magic)!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported MILF version {version}")
    offset = _FIXED_HEAD.size

    if len(view) < offset + _SLIDE_LEN.size:
        raise ChecksumError(f"{source}: truncated header")
    (id_len,) = _SLIDE_LEN.unpack_from(view, offset)
    offset += _SLIDE_LEN.size
    if len(view) < offset + id_len + _TAIL_HEAD.size:
        raise ChecksumError(f"{source}: truncated header")
    try:
        slide_id = bytes(view[offset:offset + id_len]).decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{source}: slide id is not UTF-8") from e
    offset += id_len
    label, mag_code = _TAIL_HEAD.unpack_from(view, offset)
    offset += _TAIL_HEAD.size
    try:
        magnification = Magnification.parse(mag_code)
    except ConfigurationError as e:
        raise FormatError(f"{source}: unknown magnification code {mag_code}") from e

    if expected_dim is not None and dim != expected_dim:
        raise DimensionError(f"{source}: embedding dimension {dim} disagrees with configured {expected_dim}")

    payload_len = dim * count * _PAYLOAD_DTYPE.itemsize
    expected_total = offset + payload_len + _CRC.size
    if len(view) < expected_total:
        raise ChecksumError(f"{source}: truncated payload ({len(view)} of {expected_total} bytes)")
    if len(view) > expected_total:
        raise FormatError(f"{source}: {len(view) - expected_total} trailing bytes after checksum")
    payload = view[offset:offset + payload_len]
    (stored_crc,) = _CRC.unpack_from(view, offset + payload_len)
    if zlib.crc32(payload) != stored_crc:
        raise ChecksumError(f"{source}: payload checksum mismatch")

    features = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE).reshape(count, dim).astype(np.float64)
    return FeatureBag(slide_id, magnification, features, label)


def write_embeddings(bag: FeatureBag, path: Union[str, Path]) -> Path:
    """
    Write a bag as a MILF file

    The payload is stored as float32; bags whose values are float32
    representable round-trip bit-exactly.
    """
    path = Path(path)
    data = encode_bag(bag)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as handle:
        handle.write(data)
    os.replace(tmp, path)
    return path


def read_embeddings(path: Union[str, Path], expected_dim: Optional[int] = None) -> FeatureBag:
    """
    Read and validate a MILF file

    Args:
        path: file to read
        expected_dim: dataset embedding dimension, checked when given

    Returns:
        FeatureBag with float64 features
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise MissingEmbeddingsError([path.stem], str(path.parent)) from e
    return decode_bag(data, str(path), expected_dim)


def import_embeddings(stream_path: Union[str, Path], descriptor: Union[str, Path, Mapping],
                      expected_dim: Optional[int] = None) -> FeatureBag:
    """
    Import an externally computed embedding stream

    The stream holds K*d raw float32 values, row-major. The JSON sidecar
    names ``slide_id``, ``dim`` and ``magnification`` and may add
    ``count``, ``label`` (class id), ``byte_order`` ("little"/"big").
    """
    stream_path = Path(stream_path)
    if not isinstance(descriptor, Mapping):
        try:
            descriptor = json.loads(Path(descriptor).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise FormatError(f"cannot read embedding descriptor {descriptor}: {e}") from e
    for key in ("slide_id", "dim", "magnification"):
        if key not in descriptor:
            raise FormatError(f"embedding descriptor for {stream_path} is missing '{key}'")
    if str(descriptor.get("dtype", "float32")) != "float32":
        raise FormatError(f"{stream_path}: only float32 streams are supported")
    dim = int(descriptor["dim"])
    if expected_dim is not None and dim != expected_dim:
        raise DimensionError(f"{stream_path}: embedding dimension {dim} disagrees with configured {expected_dim}")

    byte_order = "<" if descriptor.get("byte_order", "little") == "little" else ">"
    try:
        raw = stream_path.read_bytes()
    except OSError as e:
        raise MissingEmbeddingsError([str(descriptor["slide_id"])], str(stream_path.parent)) from e
    if dim <= 0 or len(raw) % (4 * dim):
        raise FormatError(f"{stream_path}: {len(raw)} bytes is not a whole number of {dim}-d float32 rows")
    values = np.frombuffer(raw, dtype=np.dtype(f"{byte_order}f4")).reshape(-1, dim)
    if "count" in descriptor and int(descriptor["count"]) != values.shape[0]:
        raise FormatError(f"{stream_path}: descriptor count {descriptor['count']} != {values.shape[0]} rows")
    return FeatureBag(str(descriptor["slide_id"]), descriptor["magnification"],
                      values.astype(np.float64), int(descriptor.get("label", UNLABELED)))


def _check_bag_key(bag: FeatureBag, slide_id: str, magnification: MagnificationTag) -> FeatureBag:
    mag = Magnification.parse(magnification)
    if bag.slide_id != slide_id or bag.magnification is not mag:
        raise AlignmentError(f"embeddings for '{bag.slide_id}' at {bag.magnification.value} were requested "
                             f"as '{slide_id}' at {mag.value}")
    return bag


def check_manifest_alignment(bag: FeatureBag, grid: PatchGrid):
    _check_bag_key(bag, grid.slide_id, grid.magnification)
    if bag.n_instances != len(grid):
        raise AlignmentError(f"bag '{bag.slide_id}' has {bag.n_instances} rows but its manifest lists "
                             f"{len(grid)} patches")


# -- stores ------------------------------------------------------------------

class FeatureStore:
    """
    Directory of ``<slide_id>_<mag>.milf`` files

    One slide keeps a separate bag per magnification. Readers may load
    concurrently; each file has a single writer.
    """

    def __init__(self, root: Union[str, Path], expected_dim: Optional[int] = None):
        self.root = Path(root)
        self.expected_dim = expected_dim

    def path_for(self, slide_id: str, magnification: MagnificationTag) -> Path:
        mag = Magnification.parse(magnification)
        return self.root / f"{slide_id}_{mag.value}{FEATURE_SUFFIX}"

    def has(self, slide_id: str, magnification: MagnificationTag) -> bool:
        return self.path_for(slide_id, magnification).is_file()

    def missing(self, slide_ids: Iterable[str], magnification: MagnificationTag) -> List[str]:
        return sorted(s for s in slide_ids if not self.has(s, magnification))

    def require(self, slide_ids: Iterable[str], magnification: MagnificationTag):
        """Fail fast listing every slide without embeddings at this magnification"""
        absent = self.missing(slide_ids, magnification)
        if absent:
            raise MissingEmbeddingsError(absent, f"{self.root} at {Magnification.parse(magnification).value}")

    def load(self, slide_id: str, magnification: MagnificationTag) -> FeatureBag:
        self.require([slide_id], magnification)
        bag = read_embeddings(self.path_for(slide_id, magnification), self.expected_dim)
        return _check_bag_key(bag, slide_id, magnification)

    def _check_dim(self, bag: FeatureBag):
        if self.expected_dim is not None and bag.dim != self.expected_dim:
            raise DimensionError(f"bag '{bag.slide_id}' has dimension {bag.dim}, store expects {self.expected_dim}")

    def save(self, bag: FeatureBag) -> Path:
        self._check_dim(bag)
        return write_embeddings(bag, self.path_for(bag.slide_id, bag.magnification))

    def slide_ids(self, magnification: MagnificationTag) -> List[str]:
        tail = f"_{Magnification.parse(magnification).value}{FEATURE_SUFFIX}"
        return sorted(p.name[:-len(tail)] for p in self.root.glob(f"*{tail}"))


class InMemoryFeatureStore(FeatureStore):
    """Feature store over bags already in memory (synthetic benchmarks, tests)"""

    def __init__(self, bags: Sequence[FeatureBag], expected_dim: Optional[int] = None):
        super().__init__(Path("<memory>"), expected_dim)
        self._bags: Dict[Tuple[str, Magnification], FeatureBag] = {}
        for bag in bags:
            self.save(bag)

    def has(self, slide_id: str, magnification: MagnificationTag) -> bool:
        return (slide_id, Magnification.parse(magnification)) in self._bags

    def load(self, slide_id: str, magnification: MagnificationTag) -> FeatureBag:
        key = (slide_id, Magnification.parse(magnification))
        if key not in self._bags:
            raise MissingEmbeddingsError([slide_id], f"memory at {key[1].value}")
        return self._bags[key]

    def save(self, bag: FeatureBag) -> Path:
        self._check_dim(bag)
        self._bags[(bag.slide_id, bag.magnification)] = bag
        return self.path_for(bag.slide_id, bag.magnification)

    def slide_ids(self, magnification: MagnificationTag) -> List[str]:
        mag = Magnification.parse(magnification)
        return sorted(s for s, m in self._bags if m is mag)
