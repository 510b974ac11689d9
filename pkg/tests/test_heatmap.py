"""
Heatmap tests
=============

Score normalization, overlay geometry and colour, top-patch export and the
end-to-end heatmap build for attention and max-pooling heads.
"""

import json

import numpy as np
import pytest

from conftest import make_tissue_raster
from src.milforge_errors import AlignmentError, EmptyBagError, ParameterError
from src.milforge_features import FeatureBag
from src.milforge_heatmap import (
    HeatmapSpec,
    build_heatmap,
    colormap_lut,
    export_top_patches,
    normalize_scores,
    render_marker_overlay,
    render_overlay,
    save_png,
    slide_thumbnail,
)
from src.milforge_tiling import ArraySlide, Magnification, PatchAnchor, PatchGrid

TILE = 8  # 256-pixel footprint at downsample 32


def _lattice(slide_id="grid", cells=None, n=4):
    cells = cells if cells is not None else [(i, j) for j in range(n) for i in range(n)]
    anchors = [PatchAnchor(256 * i, 256 * j, 1.0) for i, j in cells]
    return PatchGrid(slide_id, Magnification.X40, 256, 256, anchors)


@pytest.fixture
def white_slide():
    return ArraySlide("grid", make_tissue_raster(1024, 1024, []))


@pytest.fixture
def tissue_slide():
    return ArraySlide("grid", make_tissue_raster(1024, 1024, [(0, 0, 512, 512), (700, 600, 1000, 900)]))


@pytest.mark.parametrize("weights,expected", [
    ([0.1, 0.4, 0.2], [0.0, 1.0, 0.5]),
    ([0.3, 0.3, 0.3, 0.3], [0.5, 0.5, 0.5, 0.5]),
    ([0.7], [1.0]),
])
def test_percent_ranks(weights, expected):
    np.testing.assert_allclose(normalize_scores(weights), expected, rtol=0, atol=1e-15)


def test_percent_ranks_ignore_monotone_transforms():
    rng = np.random.default_rng(0)
    weights = rng.random(50)
    np.testing.assert_array_equal(normalize_scores(weights), normalize_scores(np.log(weights) * 7 + 3))


def test_minmax_normalization():
    np.testing.assert_allclose(normalize_scores([1.0, 3.0, 2.0], "minmax"), [0.0, 1.0, 0.5])
    np.testing.assert_array_equal(normalize_scores([2.0, 2.0], "minmax"), [0.5, 0.5])
    with pytest.raises(ParameterError):
        normalize_scores([1.0, 2.0], "zscore")
    with pytest.raises(EmptyBagError):
        normalize_scores([])


def test_heatmap_spec_validation():
    with pytest.raises(ParameterError):
        HeatmapSpec(opacity=1.5)
    with pytest.raises(ParameterError):
        HeatmapSpec(downsample=0.5)


def test_lut_runs_from_blue_to_red():
    lut = colormap_lut("coolwarm")
    assert lut.shape == (256, 3) and lut.dtype == np.uint8
    assert lut[0, 2] > lut[0, 0]
    assert lut[255, 0] > lut[255, 2]


def test_top_score_at_full_opacity_is_exact_lut_red(white_slide):
    grid = _lattice()
    scores = np.zeros(len(grid))
    scores[5] = 1.0
    image = render_overlay(grid, scores, white_slide, HeatmapSpec(opacity=1.0))
    assert image.shape == (32, 32, 3)
    x, y = grid.anchors[5].x // 32, grid.anchors[5].y // 32
    np.testing.assert_array_equal(image[y:y + TILE, x:x + TILE], np.broadcast_to(colormap_lut()[255], (TILE, TILE, 3)))


def test_zero_opacity_returns_plain_slide(tissue_slide):
    grid = _lattice()
    image = render_overlay(grid, np.linspace(0, 1, len(grid)), tissue_slide, HeatmapSpec(opacity=0.0))
    np.testing.assert_array_equal(image, slide_thumbnail(tissue_slide, 32.0))


def test_checkerboard_tiles_have_exact_boundaries(white_slide):
    grid = _lattice()
    scores = [float((a.x // 256 + a.y // 256) % 2) for a in grid.anchors]
    image = render_overlay(grid, scores, white_slide, HeatmapSpec(opacity=1.0))
    lut = colormap_lut()
    for row in range(4):
        for col in range(4):
            expected = lut[255] if (row + col) % 2 else lut[0]
            tile = image[row * TILE:(row + 1) * TILE, col * TILE:(col + 1) * TILE]
            assert np.all(tile == expected), (row, col)


def test_no_colour_outside_patch_footprints(tissue_slide):
    grid = _lattice(cells=[(0, 0), (1, 0), (3, 2)])
    spec = HeatmapSpec(opacity=0.6)
    image = render_overlay(grid, [0.0, 1.0, 0.5], tissue_slide, spec)
    base = slide_thumbnail(tissue_slide, spec.downsample)
    covered = np.zeros(base.shape[:2], dtype=bool)
    for a in grid.anchors:
        covered[a.y // 32:a.y // 32 + TILE, a.x // 32:a.x // 32 + TILE] = True
    np.testing.assert_array_equal(image[~covered], base[~covered])
    assert np.any(image[covered] != base[covered])


def test_misaligned_scores_are_rejected(white_slide):
    with pytest.raises(AlignmentError):
        render_overlay(_lattice(), [0.5] * 3, white_slide, HeatmapSpec())


def test_marker_overlay_colours_one_tile(white_slide):
    grid = _lattice()
    image = render_marker_overlay(grid, 6, white_slide, HeatmapSpec(opacity=1.0))
    changed = np.argwhere(np.any(image != 255, axis=2))
    a = grid.anchors[6]
    assert changed[:, 0].min() == a.y // 32 and changed[:, 0].max() == a.y // 32 + TILE - 1
    assert changed[:, 1].min() == a.x // 32 and changed[:, 1].max() == a.x // 32 + TILE - 1
    with pytest.raises(AlignmentError):
        render_marker_overlay(grid, 16, white_slide, HeatmapSpec())


def test_top_one_is_the_argmax_patch(tissue_slide):
    grid = _lattice()
    scores = np.random.default_rng(1).random(len(grid))
    top = export_top_patches(grid, scores, tissue_slide, k=1)
    best = grid.anchors[int(np.argmax(scores))]
    assert (top[0].x, top[0].y, top[0].rank) == (best.x, best.y, 1)
    assert top[0].pixels.shape == (256, 256, 3)


def test_tied_scores_follow_coordinate_order(white_slide):
    grid = _lattice()
    patches = export_top_patches(grid, np.full(len(grid), 0.5), white_slide, k=4)
    coords = [(p.x, p.y) for p in patches]
    assert coords == sorted((a.x, a.y) for a in grid.anchors)[:4]


def test_top_k_is_clamped_and_exports_grid_patches(tissue_slide, tmp_path, caplog):
    grid = _lattice(cells=[(0, 0), (2, 1), (3, 3)])
    with caplog.at_level("WARNING"):
        patches = export_top_patches(grid, [0.2, 0.9, 0.5], tissue_slide, k=5, out_dir=tmp_path)
    assert len(patches) == 3
    assert "clamping" in caplog.text
    assert {(p.x, p.y) for p in patches} <= {(a.x, a.y) for a in grid.anchors}
    assert patches[0].path.name == "grid_rank01_x512_y256_s0.9000.png"
    assert all(p.path.is_file() for p in patches)


def test_rendering_is_byte_identical(tissue_slide, tmp_path):
    grid = _lattice()
    scores = normalize_scores(np.random.default_rng(2).random(len(grid)))
    first = save_png(render_overlay(grid, scores, tissue_slide, HeatmapSpec()), tmp_path / "a.png")
    second = save_png(render_overlay(grid, scores, tissue_slide, HeatmapSpec()), tmp_path / "b.png")
    assert first.read_bytes() == second.read_bytes()


def _bag_for(grid, rng, d=6):
    return FeatureBag(grid.slide_id, "40x", rng.standard_normal((len(grid), d)))


def test_build_heatmap_for_attention_head(random_model, tissue_slide, tmp_path):
    rng = np.random.default_rng(3)
    model = random_model(rng, variant="gated")
    grid = _lattice()
    artifacts = build_heatmap(model, _bag_for(grid, rng), grid, tissue_slide, HeatmapSpec(), tmp_path)

    assert artifacts.overlay_path.name == "grid_40x_heatmap.png"
    assert not artifacts.marker_only
    assert len(artifacts.patches) == 5
    assert len(list((tmp_path / "grid_40x_top").glob("*.png"))) == 5

    sidecar = json.loads(artifacts.sidecar_path.read_text())
    assert sidecar["slide_id"] == "grid" and sidecar["variant"] == "gated"
    assert len(sidecar["patches"]) == len(grid)
    ranks = sorted(p["percent_rank"] for p in sidecar["patches"])
    assert ranks[0] == 0.0 and ranks[-1] == 1.0
    assert sum(p["attention"] for p in sidecar["patches"]) == pytest.approx(1.0)


def test_build_heatmap_selects_class_branch(random_model, tissue_slide, tmp_path):
    rng = np.random.default_rng(4)
    model = random_model(rng, variant="attn", n_classes=3)
    grid = _lattice()
    bag = _bag_for(grid, rng)
    artifacts = build_heatmap(model, bag, grid, tissue_slide, HeatmapSpec(class_index=2), tmp_path)
    assert artifacts.class_index == 2
    with pytest.raises(ParameterError):
        build_heatmap(model, bag, grid, tissue_slide, HeatmapSpec(class_index=3), tmp_path)


def test_build_heatmap_for_max_pooling_head(random_model, tissue_slide, tmp_path):
    rng = np.random.default_rng(5)
    model = random_model(rng, variant="maxpool")
    grid = _lattice()
    bag = _bag_for(grid, rng)
    artifacts = build_heatmap(model, bag, grid, tissue_slide, HeatmapSpec(opacity=1.0), tmp_path)
    assert artifacts.marker_only
    deciding = model.forward(bag).max_instance
    assert (artifacts.patches[0].x, artifacts.patches[0].y) == (grid.anchors[deciding].x, grid.anchors[deciding].y)


def test_build_heatmap_rejects_mismatched_bag(random_model, tissue_slide, tmp_path):
    rng = np.random.default_rng(6)
    grid = _lattice()
    with pytest.raises(AlignmentError):
        build_heatmap(random_model(rng), FeatureBag("grid", "40x", rng.standard_normal((3, 6))),
                      grid, tissue_slide, HeatmapSpec(), tmp_path)


def test_build_heatmap_rejects_bag_from_another_magnification(random_model, tissue_slide, tmp_path):
    rng = np.random.default_rng(7)
    grid = _lattice()
    bag = FeatureBag(grid.slide_id, "20x", rng.standard_normal((len(grid), 6)))
    with pytest.raises(AlignmentError, match="20x"):
        build_heatmap(random_model(rng), bag, grid, tissue_slide, HeatmapSpec(), tmp_path)
    assert not list(tmp_path.glob("*.png"))
