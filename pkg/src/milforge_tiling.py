"""
milforge tiling: tissue segmentation and patch grids
====================================================

Segments tissue from background on a low-resolution pyramid level
(HSV saturation → median blur → threshold → closing → contours) and lays a
non-overlapping 256x256 patch lattice over the tissue at 10x, 20x or 40x.
Patch anchors are always reported in level-0 pixel coordinates.

Slides are read through ``SlidePyramid``: ``ArraySlide`` wraps a single
in-memory RGB raster (PNG / single-page TIFF), ``OpenSlideSlide`` wraps a
pyramidal file through openslide with serialized region reads.
"""

import hashlib
import json
import logging
import math
import threading
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from dataclasses_json import dataclass_json
from PIL import Image

from .milforge_errors import (
    BoundsError,
    ConfigurationError,
    FormatError,
    ParameterError,
    SlideReadError,
)

logger = logging.getLogger(__name__)

PATCH_SIZE = 256
NATIVE_MPP = 0.25
MANIFEST_SCHEMA_VERSION = 1
MANIFEST_KIND = "milforge.patch-manifest"

PYRAMID_SUFFIXES = {".svs", ".tif", ".tiff", ".ndpi", ".mrxs", ".scn", ".bif", ".vms"}
RASTER_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}

# Large scans exceed Pillow's decompression-bomb guard
Image.MAX_IMAGE_PIXELS = None


class Magnification(Enum):
    """Objective magnification a patch grid is cut at"""
    X10 = "10x"
    X20 = "20x"
    X40 = "40x"

    @property
    def objective(self) -> int:
        return int(self.value[:-1])

    @property
    def code(self) -> int:
        return self.objective

    @classmethod
    def parse(cls, tag: Union[str, int, "Magnification"]) -> "Magnification":
        if isinstance(tag, Magnification):
            return tag
        text = str(tag).strip().lower()
        if not text.endswith("x"):
            text = f"{text}x"
        for member in cls:
            if member.value == text:
                return member
        raise ConfigurationError(f"unknown magnification '{tag}', expected one of 10x, 20x, 40x")


@dataclass_json
@dataclass
class SegmentationConfig:
    """Tissue segmentation and tiling parameters (areas in working-level pixels)"""
    working_downsample: float = 64.0
    median_kernel: int = 7
    saturation_threshold: int = 8
    use_otsu: bool = False
    close_kernel: int = 4
    min_contour_area: float = 100.0
    max_hole_area: float = 16.0
    min_tissue_fraction: float = 0.5
    patch_size: int = PATCH_SIZE

    def __post_init__(self):
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise ParameterError(f"median_kernel must be a positive odd integer, got {self.median_kernel}")
        if not 0 <= self.saturation_threshold <= 255:
            raise ParameterError(f"saturation_threshold must be in [0, 255], got {self.saturation_threshold}")
        if not 0.0 <= self.min_tissue_fraction <= 1.0:
            raise ParameterError(f"min_tissue_fraction must be in [0, 1], got {self.min_tissue_fraction}")
        if self.working_downsample < 1:
            raise ParameterError(f"working_downsample must be >= 1, got {self.working_downsample}")
        if self.patch_size < 1:
            raise ParameterError(f"patch_size must be positive, got {self.patch_size}")

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form"""
        canonical = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PyramidLevel:
    width: int
    height: int
    downsample: float


class SlidePyramid:
    """
    Multi-resolution slide with level-0 coordinate addressing

    Subclasses implement ``_read`` for an in-bounds region.
    """

    def __init__(self, slide_id: str, levels: Sequence[PyramidLevel], mpp: float = NATIVE_MPP):
        if not levels:
            raise SlideReadError(f"slide '{slide_id}' has no pyramid levels")
        if levels[0].downsample != 1:
            raise SlideReadError(f"slide '{slide_id}': level-0 downsample must be 1, got {levels[0].downsample}")
        for lower, upper in zip(levels, levels[1:]):
            if not upper.downsample > lower.downsample:
                raise SlideReadError(f"slide '{slide_id}': level downsamples must strictly increase")
        self.slide_id = slide_id
        self.levels = list(levels)
        self.mpp = float(mpp)

    @property
    def level_count(self) -> int:
        return len(self.levels)

    @property
    def dimensions(self) -> Tuple[int, int]:
        return self.levels[0].width, self.levels[0].height

    def best_level_for_downsample(self, downsample: float) -> int:
        """Deepest level whose downsample does not exceed the request"""
        best = 0
        for index, level in enumerate(self.levels):
            if level.downsample <= downsample * (1 + 1e-6):
                best = index
        return best

    def downsample_for(self, magnification: Union[str, Magnification]) -> float:
        """Level-0 pixels per patch pixel at a magnification"""
        mag = Magnification.parse(magnification)
        native_objective = 40.0 * NATIVE_MPP / self.mpp
        downsample = native_objective / mag.objective
        if downsample < 1 - 1e-6:
            raise ConfigurationError(
                f"slide '{self.slide_id}' is {native_objective:g}x native; {mag.value} is not available")
        return downsample

    def read_region(self, location: Tuple[int, int], level: int, size: Tuple[int, int]) -> np.ndarray:
        """
        Read an RGB region

        Args:
            location: (x, y) of the top-left corner in level-0 pixels
            level: pyramid level to read from
            size: (width, height) in pixels of that level

        Returns:
            uint8 array of shape (height, width, 3)
        """
        if not 0 <= level < self.level_count:
            raise BoundsError(f"slide '{self.slide_id}' has no level {level}")
        x, y = int(location[0]), int(location[1])
        width, height = int(size[0]), int(size[1])
        spec = self.levels[level]
        level_x, level_y = int(x // spec.downsample), int(y // spec.downsample)
        if (x < 0 or y < 0 or width <= 0 or height <= 0
                or level_x + width > spec.width or level_y + height > spec.height):
            raise BoundsError(
                f"region at ({x}, {y}) size {width}x{height} on level {level} is outside slide "
                f"'{self.slide_id}' ({spec.width}x{spec.height} at that level)")
        return self._read((x, y), level, (width, height))

    def read_level(self, level: int) -> np.ndarray:
        spec = self.levels[level]
        return self.read_region((0, 0), level, (spec.width, spec.height))

    def _read(self, location: Tuple[int, int], level: int, size: Tuple[int, int]) -> np.ndarray:
        raise NotImplementedError

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ArraySlide(SlidePyramid):
    """A single-level slide held in memory (PNG, JPEG, single-page TIFF, or test rasters)"""

    def __init__(self, slide_id: str, rgb: np.ndarray, mpp: float = NATIVE_MPP):
        rgb = np.asarray(rgb)
        if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
            raise SlideReadError(f"slide '{slide_id}': expected uint8 HxWx3 RGB raster, got {rgb.dtype} {rgb.shape}")
        super().__init__(slide_id, [PyramidLevel(rgb.shape[1], rgb.shape[0], 1.0)], mpp)
        self._rgb = rgb

    def _read(self, location, level, size):
        x, y = location
        width, height = size
        return self._rgb[y:y + height, x:x + width].copy()


class OpenSlideSlide(SlidePyramid):
    """Pyramidal slide read through openslide; region reads are serialized"""

    def __init__(self, path: Union[str, Path], slide_id: str):
        try:
            import openslide
        except ImportError as e:
            raise SlideReadError(f"openslide is required to read pyramidal slide {path}") from e
        try:
            self._osr = openslide.OpenSlide(str(path))
        except Exception as e:
            raise SlideReadError(f"cannot open slide {path}: {e}") from e
        levels = [PyramidLevel(int(w), int(h), float(ds))
                  for (w, h), ds in zip(self._osr.level_dimensions, self._osr.level_downsamples)]
        levels[0] = PyramidLevel(levels[0].width, levels[0].height, 1.0)
        mpp = float(self._osr.properties.get(openslide.PROPERTY_NAME_MPP_X, NATIVE_MPP) or NATIVE_MPP)
        super().__init__(slide_id, levels, mpp)
        self._lock = threading.Lock()

    def _read(self, location, level, size):
        with self._lock:
            region = self._osr.read_region(location, level, size)
        return np.asarray(region.convert("RGB"))

    def close(self):
        self._osr.close()


def open_slide(path: Union[str, Path], slide_id: Optional[str] = None, mpp: float = NATIVE_MPP) -> SlidePyramid:
    """
    Open a slide file as a pyramid

    Multi-level files go through openslide when it is installed; plain
    rasters are loaded with Pillow as a one-level pyramid.
    """
    path = Path(path)
    slide_id = slide_id or path.stem
    if not path.is_file():
        raise SlideReadError(f"slide file not found: {path}")
    suffix = path.suffix.lower()

    if suffix in PYRAMID_SUFFIXES:
        try:
            return OpenSlideSlide(path, slide_id)
        except SlideReadError:
            # plain strip TIFFs are not openslide-readable; load them as one level
            if suffix not in RASTER_SUFFIXES:
                raise
    elif suffix not in RASTER_SUFFIXES:
        raise SlideReadError(f"unsupported slide format '{suffix}': {path}")

    try:
        with Image.open(path) as image:
            rgb = np.asarray(image.convert("RGB"))
    except Exception as e:
        raise SlideReadError(f"cannot read slide image {path}: {e}") from e
    return ArraySlide(slide_id, rgb, mpp)


# -- segmentation ------------------------------------------------------------

@dataclass
class TissueContour:
    """One retained tissue region (coordinates in working-level pixels)"""
    points: np.ndarray
    area: float
    holes: List[np.ndarray] = field(default_factory=list)

    def bounding_box(self) -> Tuple[int, int, int, int]:
        x, y, w, h = cv2.boundingRect(self.points)
        return x, y, w, h


@dataclass
class TissueMask:
    """Binary tissue raster at the working level plus the retained contours"""
    slide_id: str
    mask: np.ndarray
    downsample: float
    contours: List[TissueContour]
    warning: Optional[str] = None

    @property
    def is_empty(self) -> bool:
        return not self.contours

    @property
    def tissue_pixels(self) -> int:
        return int(np.count_nonzero(self.mask))


def segment_tissue(slide: SlidePyramid, params: Optional[SegmentationConfig] = None) -> TissueMask:
    """
    Separate tissue from background

    Args:
        slide: slide pyramid
        params: segmentation configuration

    Returns:
        TissueMask; an empty mask carries a warning instead of raising
    """
    params = params or SegmentationConfig()
    level = slide.best_level_for_downsample(params.working_downsample)
    downsample = slide.levels[level].downsample
    image = slide.read_level(level)

    hsv = cv2.cvtColor(image, cv2.COLOR_RGB2HSV)
    saturation = cv2.medianBlur(np.ascontiguousarray(hsv[:, :, 1]), params.median_kernel)
    if params.use_otsu:
        _, binary = cv2.threshold(saturation, 0, 255, cv2.THRESH_OTSU + cv2.THRESH_BINARY)
    else:
        _, binary = cv2.threshold(saturation, params.saturation_threshold, 255, cv2.THRESH_BINARY)
    if params.close_kernel > 0:
        kernel = np.ones((params.close_kernel, params.close_kernel), np.uint8)
        binary = cv2.morphologyEx(binary, cv2.MORPH_CLOSE, kernel)

    contours = _filter_contours(binary, params)
    mask = np.zeros(binary.shape, dtype=np.uint8)
    for contour in contours:
        cv2.drawContours(mask, [contour.points], -1, 1, thickness=cv2.FILLED)
    for contour in contours:
        if contour.holes:
            cv2.drawContours(mask, contour.holes, -1, 0, thickness=cv2.FILLED)

    warning = None
    if not contours:
        warning = f"no tissue found on slide '{slide.slide_id}'"
        logger.warning(warning)
    else:
        logger.info(f"Segmented '{slide.slide_id}': {len(contours)} tissue region(s) "
                    f"at level {level} (downsample {downsample:g})")
    return TissueMask(slide.slide_id, mask, downsample, contours, warning)


def _filter_contours(binary: np.ndarray, params: SegmentationConfig) -> List[TissueContour]:
    found, hierarchy = cv2.findContours(binary, cv2.RETR_CCOMP, cv2.CHAIN_APPROX_NONE)
    if hierarchy is None or not found:
        return []
    hierarchy = hierarchy.reshape(-1, 4)

    retained = []
    for index, contour in enumerate(found):
        if hierarchy[index][3] != -1:
            continue
        holes = [found[child] for child in range(len(found)) if hierarchy[child][3] == index]
        area = cv2.contourArea(contour) - sum(cv2.contourArea(h) for h in holes)
        if area < params.min_contour_area:
            continue
        kept_holes = [h for h in holes if cv2.contourArea(h) > params.max_hole_area]
        retained.append(TissueContour(points=contour, area=float(area), holes=kept_holes))

    # outer contours ordered by top-left corner so manifests are stable
    retained.sort(key=lambda c: (c.bounding_box()[1], c.bounding_box()[0]))
    return retained


def save_mask_preview(slide: SlidePyramid, mask: TissueMask, path: Union[str, Path]) -> Path:
    """Write the working-level image with tissue (green) and hole (blue) outlines"""
    level = slide.best_level_for_downsample(mask.downsample)
    image = np.array(slide.read_level(level), copy=True)
    for contour in mask.contours:
        cv2.drawContours(image, [contour.points], -1, (0, 255, 0), 2)
        if contour.holes:
            cv2.drawContours(image, contour.holes, -1, (0, 0, 255), 1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(path, format="PNG")
    return path


# -- patch grids -------------------------------------------------------------

@dataclass(frozen=True)
class PatchAnchor:
    x: int
    y: int
    tissue_fraction: float


@dataclass
class PatchGrid:
    """Tissue patches of one slide at one magnification (anchors in level-0 pixels)"""
    slide_id: str
    magnification: Magnification
    patch_size: int
    footprint: int
    anchors: List[PatchAnchor]

    def __len__(self) -> int:
        return len(self.anchors)

    def coordinates(self) -> np.ndarray:
        return np.array([(a.x, a.y) for a in self.anchors], dtype=np.int64).reshape(-1, 2)


def build_patch_grid(mask: TissueMask, slide: SlidePyramid, magnification: Union[str, Magnification],
                     min_tissue_fraction: float = 0.5, patch_size: int = PATCH_SIZE) -> PatchGrid:
    """
    Tile tissue bounding boxes with a non-overlapping lattice

    Args:
        mask: tissue mask of the slide
        slide: the slide pyramid (for geometry)
        magnification: 10x, 20x or 40x
        min_tissue_fraction: minimum mask overlap for a patch to be kept
        patch_size: patch edge in output pixels

    Returns:
        PatchGrid with anchors sorted row-major (y, then x)
    """
    mag = Magnification.parse(magnification)
    if not 0.0 <= min_tissue_fraction <= 1.0:
        raise ParameterError(f"min_tissue_fraction must be in [0, 1], got {min_tissue_fraction}")
    footprint = int(round(patch_size * slide.downsample_for(mag)))
    full_w, full_h = slide.dimensions

    cells = set()
    for contour in mask.contours:
        bx, by, bw, bh = contour.bounding_box()
        x0, y0 = bx * mask.downsample, by * mask.downsample
        x1, y1 = (bx + bw) * mask.downsample, (by + bh) * mask.downsample
        for row in range(int(y0 // footprint), int(math.ceil(y1 / footprint))):
            for col in range(int(x0 // footprint), int(math.ceil(x1 / footprint))):
                cells.add((row, col))

    integral = cv2.integral(mask.mask, sdepth=cv2.CV_64F) if cells else None
    anchors = []
    for row, col in sorted(cells):
        x, y = col * footprint, row * footprint
        if x + footprint > full_w or y + footprint > full_h:
            continue
        fraction = _mask_fraction(integral, mask, x, y, footprint)
        if fraction >= min_tissue_fraction:
            anchors.append(PatchAnchor(x, y, fraction))

    logger.info(f"Patch grid '{slide.slide_id}' @ {mag.value}: {len(anchors)} patches "
                f"(footprint {footprint}px, {len(cells)} candidate cells)")
    return PatchGrid(slide.slide_id, mag, patch_size, footprint, anchors)


def _mask_fraction(integral: np.ndarray, mask: TissueMask, x: int, y: int, footprint: int) -> float:
    height, width = mask.mask.shape
    ds = mask.downsample
    mx0 = min(int(math.floor(x / ds)), width)
    my0 = min(int(math.floor(y / ds)), height)
    mx1 = min(max(int(math.ceil((x + footprint) / ds)), mx0 + 1), width)
    my1 = min(max(int(math.ceil((y + footprint) / ds)), my0 + 1), height)
    area = (mx1 - mx0) * (my1 - my0)
    if area <= 0:
        return 0.0
    total = integral[my1, mx1] - integral[my0, mx1] - integral[my1, mx0] + integral[my0, mx0]
    return float(total) / area


def extract_patch_pixels(slide: SlidePyramid, anchor: Union[PatchAnchor, Tuple[int, int]],
                         magnification: Union[str, Magnification], patch_size: int = PATCH_SIZE) -> np.ndarray:
    """
    Crop one patch at a magnification

    Args:
        slide: slide pyramid
        anchor: level-0 top-left corner
        magnification: 10x, 20x or 40x
        patch_size: output edge length

    Returns:
        uint8 array of shape (patch_size, patch_size, 3)
    """
    x, y = (anchor.x, anchor.y) if isinstance(anchor, PatchAnchor) else (int(anchor[0]), int(anchor[1]))
    downsample = slide.downsample_for(magnification)
    footprint = int(round(patch_size * downsample))
    full_w, full_h = slide.dimensions
    if x < 0 or y < 0 or x + footprint > full_w or y + footprint > full_h:
        raise BoundsError(f"patch at ({x}, {y}) with footprint {footprint} is outside slide "
                          f"'{slide.slide_id}' ({full_w}x{full_h})")

    level = slide.best_level_for_downsample(downsample)
    level_ds = slide.levels[level].downsample
    read_size = max(1, int(round(footprint / level_ds)))
    region = slide.read_region((x, y), level, (read_size, read_size))
    if read_size != patch_size:
        region = cv2.resize(region, (patch_size, patch_size), interpolation=cv2.INTER_AREA)
    return np.ascontiguousarray(region)


# -- manifests ---------------------------------------------------------------

def write_manifest(grid: PatchGrid, path: Union[str, Path], config: Optional[SegmentationConfig] = None) -> Path:
    """Write a patch grid as JSON lines: one header record, then one record per patch"""
    config = config or SegmentationConfig()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "kind": MANIFEST_KIND,
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "slide_id": grid.slide_id,
        "mag": grid.magnification.value,
        "patch_size": grid.patch_size,
        "footprint": grid.footprint,
        "n_patches": len(grid),
        "segmentation_config_hash": config.config_hash(),
    }
    lines = [json.dumps(header)]
    for anchor in grid.anchors:
        lines.append(json.dumps({
            "slide_id": grid.slide_id,
            "mag": grid.magnification.value,
            "x": anchor.x,
            "y": anchor.y,
            "size": grid.patch_size,
            "tissue_fraction": anchor.tissue_fraction,
        }))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path: Union[str, Path]) -> PatchGrid:
    """Load a patch manifest written by ``write_manifest``"""
    path = Path(path)
    try:
        lines = [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    except OSError as e:
        raise FormatError(f"cannot read manifest {path}: {e}") from e
    if not lines:
        raise FormatError(f"manifest {path} is empty")
    try:
        header = json.loads(lines[0])
        records = [json.loads(line) for line in lines[1:]]
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest {path} is not valid JSON lines: {e}") from e
    if header.get("kind") != MANIFEST_KIND or header.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise FormatError(f"manifest {path} has an unsupported header")
    if header.get("n_patches") != len(records):
        raise FormatError(f"manifest {path} declares {header.get('n_patches')} patches, found {len(records)}")
    anchors = [PatchAnchor(int(r["x"]), int(r["y"]), float(r["tissue_fraction"])) for r in records]
    return PatchGrid(header["slide_id"], Magnification.parse(header["mag"]), int(header["patch_size"]),
                     int(header["footprint"]), anchors)


def manifest_path(manifest_dir: Union[str, Path], slide_id: str, magnification: Union[str, Magnification]) -> Path:
    mag = Magnification.parse(magnification)
    return Path(manifest_dir) / f"{slide_id}_{mag.value}.jsonl"
