"""
Feature store tests
===================

Bag validation, the baseline extractor, MILF encoding, external imports
and the directory store.
"""

import json

import numpy as np
import pytest

from conftest import make_tissue_raster
from src.milforge_errors import (
    AlignmentError,
    ChecksumError,
    ConfigurationError,
    DimensionError,
    EmptyBagError,
    FormatError,
    MissingEmbeddingsError,
    ShapeError,
)
from src.milforge_features import (
    BASELINE_DIM,
    FeatureBag,
    FeatureStore,
    InMemoryFeatureStore,
    LabelSpace,
    baseline_extract,
    check_manifest_alignment,
    decode_bag,
    encode_bag,
    extract_bag,
    import_embeddings,
    read_embeddings,
    write_embeddings,
)
from src.milforge_tiling import ArraySlide, Magnification, build_patch_grid, segment_tissue


def _float32_bag(rng, slide_id="s", k=None, d=None, label=None, mag=None):
    k = k or int(rng.integers(1, 40))
    d = d or int(rng.integers(1, 20))
    values = rng.standard_normal((k, d)).astype(np.float32).astype(np.float64)
    label = int(rng.integers(-1, 3)) if label is None else label
    mag = mag or ["10x", "20x", "40x"][int(rng.integers(3))]
    return FeatureBag(slide_id, mag, values, label)


def test_bag_validation():
    with pytest.raises(EmptyBagError):
        FeatureBag("empty", "20x", np.zeros((0, 4)))
    with pytest.raises(ShapeError):
        FeatureBag("flat", "20x", np.zeros(4))
    with pytest.raises(FormatError):
        FeatureBag("nan", "20x", np.array([[1.0, np.nan]]))
    bag = FeatureBag("ok", 20, np.ones((3, 2)))
    assert bag.magnification is Magnification.X20
    assert not bag.is_labeled and bag.with_label(1).is_labeled


def test_label_space_restrict_keeps_extremes():
    space = LabelSpace(["low", "intermediate", "high"])
    assert space.restrict(2).class_names == ["low", "high"]
    assert space.restrict(3).class_names == space.class_names
    assert space.id_of("high") == 2 and space.name_of(0) == "low"
    with pytest.raises(ConfigurationError):
        space.id_of("medium")
    with pytest.raises(ConfigurationError):
        LabelSpace(["only"])


def test_milf_round_trip_is_bit_exact():
    rng = np.random.default_rng(11)
    for case in range(1000):
        bag = _float32_bag(rng, slide_id=f"slide-{case}-é")
        decoded = decode_bag(encode_bag(bag))
        assert decoded == bag
        assert decoded.features.tobytes() == bag.features.tobytes()


def test_milf_round_trip_keeps_signed_zeros_and_subnormals():
    tiny = np.finfo(np.float32).smallest_subnormal
    values = np.array([[0.0, -0.0, float(tiny), -float(tiny)],
                       [float(tiny) * 1000, 1e-40, -1e-39, float(np.finfo(np.float32).max)]],
                      dtype=np.float32).astype(np.float64)
    bag = FeatureBag("edge", "10x", values, 0)
    decoded = decode_bag(encode_bag(bag))
    assert decoded.features.tobytes() == values.tobytes()
    assert np.signbit(decoded.features[0, 1]) and not np.signbit(decoded.features[0, 0])
    assert decoded.features[0, 2] > 0.0


def test_milf_file_round_trip(tmp_path):
    bag = _float32_bag(np.random.default_rng(2), slide_id="T-001", k=7, d=5, label=2)
    path = write_embeddings(bag, tmp_path / "T-001.milf")
    assert read_embeddings(path) == bag
    assert read_embeddings(path, expected_dim=5) == bag
    with pytest.raises(DimensionError):
        read_embeddings(path, expected_dim=6)


def test_corrupted_milf_files_are_rejected():
    data = encode_bag(_float32_bag(np.random.default_rng(3), k=6, d=4))
    with pytest.raises(ChecksumError):
        decode_bag(data[:-3])
    with pytest.raises(ChecksumError):
        decode_bag(data[:10])
    flipped = bytearray(data)
    flipped[-10] ^= 0xFF
    with pytest.raises(ChecksumError):
        decode_bag(bytes(flipped))
    with pytest.raises(FormatError) as bad_magic:
        decode_bag(b"MILX" + data[4:])
    assert not isinstance(bad_magic.value, ChecksumError)
    with pytest.raises(FormatError) as trailing:
        decode_bag(data + b"\x00")
    assert not isinstance(trailing.value, ChecksumError)


def test_values_outside_float32_range_are_refused():
    bag = FeatureBag("huge", "20x", np.array([[1e300]]))
    with pytest.raises(FormatError):
        encode_bag(bag)


def test_missing_file_lists_slide(tmp_path):
    with pytest.raises(MissingEmbeddingsError, match="ghost"):
        read_embeddings(tmp_path / "ghost.milf")


def _textured_patch(kind):
    patch = np.full((256, 256, 3), 200, dtype=np.uint8)
    if kind == "checker":
        yy, xx = np.indices((256, 256))
        patch[((yy // 8 + xx // 8) % 2) == 0] = (90, 30, 120)
    return patch


@pytest.mark.parametrize("level", [0, 255])
def test_baseline_extract_on_uniform_patches(level):
    patch = np.full((256, 256, 3), level, dtype=np.uint8)
    vector = baseline_extract(patch)
    assert np.all(np.isfinite(vector))
    np.testing.assert_array_equal(vector, baseline_extract(patch.copy()))
    np.testing.assert_array_equal(vector[:3], [level / 255.0] * 3)
    np.testing.assert_array_equal(vector[3:6], [0.0] * 3)
    bin_index = 0 if level == 0 else 15
    for c in range(3):
        histogram = vector[6 + 16 * c:22 + 16 * c]
        assert histogram[bin_index] == 1.0 and histogram.sum() == 1.0


def test_baseline_extract_is_deterministic_and_bounded():
    patch = _textured_patch("checker")
    first, second = baseline_extract(patch), baseline_extract(patch.copy())
    assert first.shape == (BASELINE_DIM,)
    assert first.tobytes() == second.tobytes()
    assert np.all(first >= 0.0) and np.all(first <= 1.0)
    np.testing.assert_array_equal(first[59:], 0.0)
    for channel in range(3):
        assert first[6 + 16 * channel:6 + 16 * (channel + 1)].sum() == pytest.approx(1.0)


def test_baseline_extract_separates_textures():
    flat, checker = baseline_extract(_textured_patch("flat")), baseline_extract(_textured_patch("checker"))
    assert np.linalg.norm(flat - checker) > 0.1


def test_baseline_extract_accepts_unit_floats_and_rejects_bad_shapes():
    patch = _textured_patch("checker")
    np.testing.assert_allclose(baseline_extract(patch / 255.0), baseline_extract(patch))
    with pytest.raises(ShapeError):
        baseline_extract(np.zeros((128, 128, 3), dtype=np.uint8))


def test_extract_bag_follows_manifest_order(square_slide):
    grid = build_patch_grid(segment_tissue(square_slide), square_slide, "20x")
    bag = extract_bag(square_slide, grid, label=1, jobs=2)
    serial = extract_bag(square_slide, grid, label=1, jobs=1)
    assert bag == serial
    assert bag.n_instances == len(grid) == 4
    check_manifest_alignment(bag, grid)
    with pytest.raises(AlignmentError):
        check_manifest_alignment(FeatureBag("square", "20x", bag.features[:3]), grid)


def test_extract_bag_refuses_empty_grids():
    slide = ArraySlide("blank", make_tissue_raster(512, 512, []))
    grid = build_patch_grid(segment_tissue(slide), slide, "20x")
    with pytest.raises(EmptyBagError):
        extract_bag(slide, grid)


def _write_stream(tmp_path, values, **descriptor):
    stream = tmp_path / "emb.f32"
    stream.write_bytes(np.asarray(values, dtype="<f4").tobytes())
    sidecar = tmp_path / "emb.json"
    sidecar.write_text(json.dumps(descriptor))
    return stream, sidecar


def test_import_embeddings(tmp_path):
    values = np.arange(12, dtype=np.float32).reshape(4, 3)
    stream, sidecar = _write_stream(tmp_path, values, slide_id="EXT-1", dim=3, magnification="40x",
                                    count=4, label=1)
    bag = import_embeddings(stream, sidecar, expected_dim=3)
    assert bag.slide_id == "EXT-1" and bag.label == 1 and bag.magnification is Magnification.X40
    np.testing.assert_array_equal(bag.features, values)


def test_import_full_width_embeddings(tmp_path):
    values = np.random.default_rng(13).standard_normal((37, 1024)).astype(np.float32)
    stream, sidecar = _write_stream(tmp_path, values, slide_id="EXT-W", dim=1024, magnification="20x")
    bag = import_embeddings(stream, sidecar, expected_dim=1024)
    assert (bag.n_instances, bag.dim) == (37, 1024)
    np.testing.assert_array_equal(bag.features, values.astype(np.float64))
    with pytest.raises(DimensionError):
        import_embeddings(stream, sidecar, expected_dim=512)
    with pytest.raises(DimensionError):
        import_embeddings(stream, sidecar, expected_dim=4)


def test_import_embeddings_validation(tmp_path):
    stream, sidecar = _write_stream(tmp_path, np.ones(10), slide_id="EXT-2", dim=3, magnification="20x")
    with pytest.raises(FormatError):
        import_embeddings(stream, sidecar)
    stream, sidecar = _write_stream(tmp_path, np.ones(9), slide_id="EXT-2", dim=3, magnification="20x", count=2)
    with pytest.raises(FormatError):
        import_embeddings(stream, sidecar)
    with pytest.raises(FormatError):
        import_embeddings(stream, {"slide_id": "EXT-2", "dim": 3})


def test_feature_store(tmp_path):
    store = FeatureStore(tmp_path / "features", expected_dim=4)
    rng = np.random.default_rng(5)
    for name in ("b", "a"):
        store.save(_float32_bag(rng, slide_id=name, d=4, label=0, mag="20x"))
    assert store.path_for("a", "20x").name == "a_20x.milf"
    assert store.slide_ids("20x") == ["a", "b"]
    assert store.slide_ids("40x") == []
    assert store.has("a", "20x") and not store.has("c", "20x") and not store.has("a", "40x")
    assert store.missing(["a", "c", "d"], "20x") == ["c", "d"]
    with pytest.raises(MissingEmbeddingsError) as missing:
        store.require(["a", "c", "d"], "20x")
    assert missing.value.slide_ids == ["c", "d"]
    with pytest.raises(DimensionError):
        store.save(_float32_bag(rng, slide_id="wide", d=5))
    assert store.load("a", Magnification.X20).dim == 4


def test_feature_store_keeps_each_magnification(tmp_path):
    store = FeatureStore(tmp_path / "features")
    store.save(FeatureBag("s1", "20x", np.ones((4, 3))))
    store.save(FeatureBag("s1", "40x", np.zeros((16, 3))))
    low, high = store.load("s1", "20x"), store.load("s1", "40x")
    assert low.n_instances == 4 and low.magnification is Magnification.X20
    assert high.n_instances == 16 and high.magnification is Magnification.X40
    with pytest.raises(MissingEmbeddingsError):
        store.load("s1", "10x")


def test_feature_store_rejects_renamed_file(tmp_path):
    store = FeatureStore(tmp_path)
    store.save(FeatureBag("s1", "20x", np.ones((4, 3))))
    store.path_for("s1", "20x").rename(store.path_for("s1", "40x"))
    with pytest.raises(AlignmentError):
        store.load("s1", "40x")


def test_in_memory_store_matches_interface():
    rng = np.random.default_rng(6)
    bags = [_float32_bag(rng, slide_id=f"m{i}", mag="20x") for i in range(3)]
    store = InMemoryFeatureStore(bags + [FeatureBag("m1", "40x", np.ones((2, 2)))])
    assert store.slide_ids("20x") == ["m0", "m1", "m2"]
    assert store.slide_ids("40x") == ["m1"]
    assert store.load("m1", "20x") is bags[1]
    assert store.load("m1", "40x").n_instances == 2
    with pytest.raises(MissingEmbeddingsError):
        store.load("nope", "20x")
    with pytest.raises(MissingEmbeddingsError):
        store.load("m0", "10x")
