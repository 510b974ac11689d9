"""
milforge heatmap: attention overlays and top-patch export
=========================================================

Per-instance attention weights are turned into percent ranks (highest
patch 1.0, lowest 0.0), mapped through a 256-entry diverging lookup table
(blue = low, red = high) and alpha-blended over a downsampled slide
raster. The most attended patches are exported at full patch resolution
alongside a JSON sidecar listing every patch's score.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import cv2
import matplotlib
import numpy as np
from dataclasses_json import dataclass_json
from PIL import Image
from scipy.stats import rankdata

from .milforge_errors import AlignmentError, ConfigurationError, EmptyBagError, ParameterError
from .milforge_features import FeatureBag, check_manifest_alignment
from .milforge_models import MilModel
from .milforge_tiling import Magnification, PatchGrid, SlidePyramid, extract_patch_pixels

logger = logging.getLogger(__name__)

NORMALIZATION_MODES = ("percentile", "minmax")
LUT_SIZE = 256


@dataclass_json
@dataclass
class HeatmapSpec:
    """How one slide's heatmap is rendered"""
    slide_id: str = ""
    magnification: str = "20x"
    normalization: str = "percentile"
    colormap: str = "coolwarm"
    opacity: float = 0.5
    downsample: float = 32.0
    top_k: int = 5
    class_index: Optional[int] = None

    def __post_init__(self):
        self.magnification = Magnification.parse(self.magnification).value
        if self.normalization not in NORMALIZATION_MODES:
            raise ParameterError(f"normalization must be one of {NORMALIZATION_MODES}, got '{self.normalization}'")
        if not 0.0 <= self.opacity <= 1.0:
            raise ParameterError(f"opacity must be in [0, 1], got {self.opacity}")
        if self.downsample < 1:
            raise ParameterError(f"downsample must be >= 1, got {self.downsample}")
        if self.top_k < 0:
            raise ParameterError(f"top_k must be non-negative, got {self.top_k}")


def colormap_lut(name: str = "coolwarm") -> np.ndarray:
    """256 x 3 uint8 lookup table sampled from a matplotlib colormap"""
    try:
        cmap = matplotlib.colormaps[name].resampled(LUT_SIZE)
    except KeyError:
        raise ConfigurationError(f"unknown colormap '{name}'") from None
    rgba = cmap(np.arange(LUT_SIZE))
    return np.rint(rgba[:, :3] * 255.0).astype(np.uint8)


def lut_index(scores: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(scores, dtype=np.float64) * (LUT_SIZE - 1)), 0, LUT_SIZE - 1).astype(np.intp)


def normalize_scores(attention: Sequence[float], mode: str = "percentile") -> np.ndarray:
    """
    Map attention weights to [0, 1]

    ``percentile``: rank / (K - 1) with ranks 0..K-1, ties sharing their
    mean rank. ``minmax``: linear rescale, constant input maps to 0.5.
    A single patch scores 1.0 in either mode.
    """
    values = np.asarray(attention, dtype=np.float64).ravel()
    if values.size == 0:
        raise EmptyBagError("cannot normalize an empty attention vector")
    if mode not in NORMALIZATION_MODES:
        raise ParameterError(f"normalization must be one of {NORMALIZATION_MODES}, got '{mode}'")
    if values.size == 1:
        return np.ones(1)
    if mode == "percentile":
        return (rankdata(values, method="average") - 1.0) / (values.size - 1)
    span = values.max() - values.min()
    if span == 0:
        return np.full(values.size, 0.5)
    return (values - values.min()) / span


def slide_thumbnail(slide: SlidePyramid, downsample: float) -> np.ndarray:
    """Slide raster at ``downsample`` relative to level 0"""
    full_w, full_h = slide.dimensions
    out_w = max(1, int(math.ceil(full_w / downsample)))
    out_h = max(1, int(math.ceil(full_h / downsample)))
    level = slide.best_level_for_downsample(downsample)
    raster = slide.read_level(level)
    if raster.shape[1] != out_w or raster.shape[0] != out_h:
        raster = cv2.resize(raster, (out_w, out_h), interpolation=cv2.INTER_AREA)
    return np.ascontiguousarray(raster)


def _tile_box(x: int, y: int, footprint: int, downsample: float, shape) -> tuple:
    height, width = shape[:2]
    x0 = min(int(math.floor(x / downsample)), width)
    y0 = min(int(math.floor(y / downsample)), height)
    x1 = min(max(int(math.floor((x + footprint) / downsample)), x0 + 1), width)
    y1 = min(max(int(math.floor((y + footprint) / downsample)), y0 + 1), height)
    return x0, y0, x1, y1


def _blend(base: np.ndarray, colour: np.ndarray, covered: np.ndarray, opacity: float) -> np.ndarray:
    blended = cv2.addWeighted(colour, opacity, base, 1.0 - opacity, 0.0)
    out = base.copy()
    out[covered] = blended[covered]
    return out


def render_overlay(grid: PatchGrid, scores: Sequence[float], slide: SlidePyramid,
                   spec: HeatmapSpec) -> np.ndarray:
    """
    Colour every patch footprint by its score and blend it over the slide

    Args:
        grid: patch grid of the slide
        scores: one value in [0, 1] per grid patch (manifest order)
        slide: slide pyramid providing the background raster
        spec: opacity, downsample and colormap

    Returns:
        uint8 RGB raster; pixels outside all footprints equal the slide raster
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size != len(grid):
        raise AlignmentError(f"{scores.size} scores for {len(grid)} patches of '{grid.slide_id}'")
    base = slide_thumbnail(slide, spec.downsample)
    colour = base.copy()
    covered = np.zeros(base.shape[:2], dtype=bool)
    lut = colormap_lut(spec.colormap)
    for anchor, index in zip(grid.anchors, lut_index(scores)):
        x0, y0, x1, y1 = _tile_box(anchor.x, anchor.y, grid.footprint, spec.downsample, base.shape)
        colour[y0:y1, x0:x1] = lut[index]
        covered[y0:y1, x0:x1] = True
    return _blend(base, colour, covered, spec.opacity)


def render_marker_overlay(grid: PatchGrid, instance_index: int, slide: SlidePyramid,
                          spec: HeatmapSpec) -> np.ndarray:
    """Highlight only the deciding instance of a max-pooling head"""
    if not 0 <= instance_index < len(grid):
        raise AlignmentError(f"instance {instance_index} is outside the {len(grid)} patches of '{grid.slide_id}'")
    base = slide_thumbnail(slide, spec.downsample)
    anchor = grid.anchors[instance_index]
    x0, y0, x1, y1 = _tile_box(anchor.x, anchor.y, grid.footprint, spec.downsample, base.shape)
    colour = base.copy()
    colour[y0:y1, x0:x1] = colormap_lut(spec.colormap)[LUT_SIZE - 1]
    covered = np.zeros(base.shape[:2], dtype=bool)
    covered[y0:y1, x0:x1] = True
    return _blend(base, colour, covered, spec.opacity)


@dataclass
class TopPatch:
    rank: int
    x: int
    y: int
    score: float
    pixels: np.ndarray = field(repr=False)
    path: Optional[Path] = None


def export_top_patches(grid: PatchGrid, scores: Sequence[float], slide: SlidePyramid, k: int = 5,
                       out_dir: Optional[Union[str, Path]] = None) -> List[TopPatch]:
    """
    Crop the k highest-scoring patches

    Ties are broken by (x, y). ``k`` larger than the bag is clamped. When
    ``out_dir`` is given each patch is written as
    ``<slide>_rank<r>_x<x>_y<y>_s<score>.png``.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size != len(grid):
        raise AlignmentError(f"{scores.size} scores for {len(grid)} patches of '{grid.slide_id}'")
    if k > len(grid):
        logger.warning(f"Requested top {k} patches but '{grid.slide_id}' has {len(grid)}; clamping")
        k = len(grid)
    order = sorted(range(len(grid)), key=lambda i: (-scores[i], grid.anchors[i].x, grid.anchors[i].y))[:k]

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    patches = []
    for rank, i in enumerate(order, start=1):
        anchor = grid.anchors[i]
        pixels = extract_patch_pixels(slide, anchor, grid.magnification, grid.patch_size)
        patch = TopPatch(rank, anchor.x, anchor.y, float(scores[i]), pixels)
        if out_path is not None:
            name = f"{grid.slide_id}_rank{rank:02d}_x{anchor.x}_y{anchor.y}_s{scores[i]:.4f}.png"
            patch.path = save_png(pixels, out_path / name)
        patches.append(patch)
    return patches


def save_png(image: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format="PNG")
    return path


def write_sidecar(path: Union[str, Path], grid: PatchGrid, raw: Sequence[float], scores: Sequence[float],
                  spec: HeatmapSpec, **extra) -> Path:
    """JSON listing (x, y, raw attention, percent rank) per patch"""
    path = Path(path)
    record = {
        "slide_id": grid.slide_id,
        "magnification": grid.magnification.value,
        "patch_size": grid.patch_size,
        "footprint": grid.footprint,
        "spec": spec.to_dict(),
        **extra,
        "patches": [
            {"x": a.x, "y": a.y, "attention": float(r), "percent_rank": float(s)}
            for a, r, s in zip(grid.anchors, raw, scores)
        ],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


@dataclass
class HeatmapArtifacts:
    overlay_path: Path
    sidecar_path: Path
    patches: List[TopPatch]
    class_index: int
    marker_only: bool


def build_heatmap(model: MilModel, bag: FeatureBag, grid: PatchGrid, slide: SlidePyramid,
                  spec: HeatmapSpec, out_dir: Union[str, Path]) -> HeatmapArtifacts:
    """
    Render one slide's heatmap, sidecar and top patches from a trained head

    Attention heads render the selected class's branch (predicted class by
    default). Max-pooling heads have no attention; they get a single-tile
    marker on the deciding instance and patches ranked by that class's
    instance probability.
    """
    check_manifest_alignment(bag, grid)
    out_dir = Path(out_dir)
    stem = f"{grid.slide_id}_{grid.magnification.value}"

    output = model.forward(bag)
    class_index = output.predicted if spec.class_index is None else spec.class_index
    if not 0 <= class_index < model.config.n_classes:
        raise ParameterError(f"class index {class_index} is outside {model.config.n_classes} classes")

    if model.variant.has_attention:
        raw = output.attention[class_index]
        scores = normalize_scores(raw, spec.normalization)
        image = render_overlay(grid, scores, slide, spec)
        marker = False
    else:
        raw = output.instance_probabilities[:, class_index]
        scores = normalize_scores(raw, spec.normalization)
        image = render_marker_overlay(grid, output.max_instance, slide, spec)
        marker = True
        logger.info(f"Max-pooling head: marking instance {output.max_instance} of '{grid.slide_id}'")

    overlay_path = save_png(image, out_dir / f"{stem}_heatmap.png")
    sidecar_path = write_sidecar(out_dir / f"{stem}_heatmap.json", grid, raw, scores, spec,
                                 variant=model.variant.value, class_index=int(class_index),
                                 probabilities=[float(p) for p in output.probabilities])
    patches = export_top_patches(grid, scores, slide, spec.top_k, out_dir / f"{stem}_top")
    logger.info(f"Heatmap for '{grid.slide_id}' written to {overlay_path} with {len(patches)} top patches")
    return HeatmapArtifacts(overlay_path, sidecar_path, patches, int(class_index), marker)
