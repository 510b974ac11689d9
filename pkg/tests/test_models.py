"""
MIL head tests
==============

Forward contracts of the five heads, the clustering objective, loss
gradients against finite differences, and the checkpoint format.
"""

import math

import numpy as np
import pytest

from src.milforge_autodiff import gradient_check
from src.milforge_errors import ChecksumError, ContractError, DimensionError, EmptyBagError, FormatError, ParameterError
from src.milforge_features import FeatureBag
from src.milforge_models import (
    MilModel,
    MilVariant,
    ModelConfig,
    clustering_loss,
    decode_checkpoint,
    encode_checkpoint,
    init_params,
    load_checkpoint,
    loss_and_gradients,
    parameter_shapes,
    save_checkpoint,
    total_loss,
)

ATTENTION_HEADS = ["attn", "gated", "attn-cluster", "gated-cluster"]


def test_scalar_world_matches_direct_evaluation():
    """d=1, one hidden unit, one class, unit weights: a = softmax(tanh(h)), z = sum a*h"""
    config = ModelConfig("attn", d_in=1, n_classes=1, embed_dim=1, attn_dim=1, dropout=0.0)
    params = {"V": np.ones((1, 1)), "bV": np.zeros((1, 1)), "Wa": np.ones((1, 1)),
              "Wc": np.ones((1, 1)), "bc": np.zeros((1, 1))}
    model = MilModel(config, params)
    out = model.forward(FeatureBag("scalar", "20x", [[1.0], [2.0]], 0))

    e1, e2 = math.tanh(1.0), math.tanh(2.0)
    a1 = math.exp(e1) / (math.exp(e1) + math.exp(e2))
    a2 = math.exp(e2) / (math.exp(e1) + math.exp(e2))
    assert out.attention[0, 0] == pytest.approx(a1, abs=1e-12)
    assert out.attention[0, 1] == pytest.approx(a2, abs=1e-12)
    assert out.bag_representations[0, 0] == pytest.approx(a1 * 1.0 + a2 * 2.0, abs=1e-12)
    assert out.probabilities[0] == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("variant", ATTENTION_HEADS)
def test_single_instance_gets_all_attention(variant, random_model, random_bag):
    rng = np.random.default_rng(1)
    model = random_model(rng, variant=variant, n_classes=3)
    out = model.forward(random_bag(rng, k=1))
    np.testing.assert_array_equal(out.attention, np.ones((3, 1)))


def test_duplicate_instances_share_attention(random_model, random_bag):
    rng = np.random.default_rng(2)
    model = random_model(rng, variant="gated")
    bag = random_bag(rng, k=4)
    features = bag.features.copy()
    features[3] = features[1]
    out = model.forward(FeatureBag("dup", "20x", features, 0))
    np.testing.assert_allclose(out.attention[:, 1], out.attention[:, 3], rtol=0, atol=1e-15)


@pytest.mark.parametrize("variant", ["attn", "gated"])
def test_attention_is_normalized_and_permutation_invariant(variant, random_model):
    rng = np.random.default_rng(3)
    model = random_model(rng, variant=variant, n_classes=3)
    for case in range(1000):
        k = int(rng.integers(1, 30))
        features = rng.standard_normal((k, 6)) * rng.uniform(0.1, 5.0)
        perm = rng.permutation(k)
        out = model.forward(FeatureBag(f"b{case}", "20x", features))
        shuffled = model.forward(FeatureBag(f"b{case}", "20x", features[perm]))

        np.testing.assert_allclose(out.attention.sum(axis=1), 1.0, rtol=0, atol=1e-9)
        assert np.all(out.attention >= 0.0) and np.all(out.attention <= 1.0)
        assert out.probabilities.sum() == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(shuffled.probabilities, out.probabilities, rtol=0, atol=1e-9)
        np.testing.assert_allclose(shuffled.attention, out.attention[:, perm], rtol=0, atol=1e-9)


def test_maxpool_probabilities_are_permutation_invariant(random_model):
    rng = np.random.default_rng(4)
    model = random_model(rng, variant="maxpool", n_classes=3)
    for case in range(200):
        k = int(rng.integers(1, 20))
        features = rng.standard_normal((k, 6))
        perm = rng.permutation(k)
        out = model.forward(FeatureBag("m", "20x", features))
        shuffled = model.forward(FeatureBag("m", "20x", features[perm]))
        np.testing.assert_allclose(shuffled.probabilities, out.probabilities, rtol=0, atol=1e-9)
        assert perm[shuffled.max_instance] == out.max_instance


def _identity_maxpool():
    config = ModelConfig("maxpool", d_in=2, n_classes=2, embed_dim=2, attn_dim=1, dropout=0.0)
    return MilModel(config, {"Winst": np.eye(2), "binst": np.zeros((1, 2))})


def test_maxpool_dominant_instance_decides():
    features = np.zeros((5, 2))
    features[2] = [10.0, -10.0]
    out = _identity_maxpool().forward(FeatureBag("dominant", "20x", features))
    assert out.predicted == 0
    assert out.max_instance == 2
    assert out.probabilities[0] == pytest.approx(1.0 / (1.0 + math.exp(-20.0)))


def test_maxpool_identical_instances_give_shared_distribution():
    features = np.tile([[0.3, 1.2]], (4, 1))
    out = _identity_maxpool().forward(FeatureBag("same", "20x", features))
    np.testing.assert_allclose(out.probabilities, out.instance_probabilities[0], rtol=0, atol=1e-15)
    assert out.predicted == 1


def test_maxpool_matches_exhaustive_instance_scoring(random_model):
    rng = np.random.default_rng(5)
    for case in range(100):
        model = random_model(rng, variant="maxpool", n_classes=3)
        features = rng.standard_normal((int(rng.integers(1, 9)), 6))
        out = model.forward(FeatureBag("bf", "20x", features))

        p = model.params
        best = (-1.0, None, None)
        for k, row in enumerate(features):
            hidden = np.maximum(row @ p["W1"] + p["b1"][0], 0.0)
            logits = hidden @ p["Winst"] + p["binst"][0]
            probs = np.exp(logits - logits.max())
            probs /= probs.sum()
            for value in probs:
                if value > best[0]:
                    best = (value, k, probs)
        assert out.max_instance == best[1]
        np.testing.assert_allclose(out.probabilities, best[2], rtol=0, atol=1e-12)


def test_forward_errors(random_model, random_bag):
    rng = np.random.default_rng(6)
    model = random_model(rng)
    with pytest.raises(DimensionError):
        model.forward(random_bag(rng, d=7))
    with pytest.raises(EmptyBagError):
        FeatureBag("none", "20x", np.zeros((0, 6)))
    with pytest.raises(ContractError):
        model.forward_maxpool(random_bag(rng))


def test_parameter_layout_depends_only_on_architecture():
    base = ModelConfig("gated-cluster", d_in=1024, n_classes=3)
    shapes = parameter_shapes(base)
    assert shapes["W1"] == (1024, 512) and shapes["V"] == (512, 256) and shapes["U"] == (512, 256)
    assert shapes["Wa"] == (256, 3) and shapes["inst_W2"] == (512, 2)
    assert "W1" not in parameter_shapes(ModelConfig("attn", d_in=512))
    assert "U" not in parameter_shapes(ModelConfig("attn", d_in=1024))
    params = init_params(ModelConfig("gated", d_in=8, embed_dim=6, attn_dim=4), np.random.default_rng(0))
    assert all(np.all(np.isfinite(v)) for v in params.values())
    np.testing.assert_array_equal(params["bV"], 0.0)


def _separable_cluster_model(inst_weight):
    """Attention on the true class follows feature 0; the instance classifier reads feature 0 too"""
    config = ModelConfig("attn-cluster", d_in=2, n_classes=2, embed_dim=2, attn_dim=1, dropout=0.0)
    params = init_params(config, np.random.default_rng(0))
    params.update(V=np.array([[1.0], [0.0]]), bV=np.zeros((1, 1)), Wa=np.ones((1, 2)))
    for c in range(2):
        params[f"inst_W{c}"] = np.array([[-inst_weight, inst_weight], [0.0, 0.0]])
        params[f"inst_b{c}"] = np.zeros((1, 2))
    return MilModel(config, params)


SEPARABLE_BAG = FeatureBag("sep", "20x", [[3.0, 0.0], [-2.0, 0.0], [2.0, 0.0], [-3.0, 0.0]], 1)


def test_clustering_loss_zero_when_separated_beyond_margin():
    model = _separable_cluster_model(1.0)
    loss, batch = clustering_loss(model.forward(SEPARABLE_BAG), SEPARABLE_BAG, model, n_cluster=2)
    assert loss.value[0, 0] == 0.0
    assert sorted(batch.high_indices) == [0, 2] and sorted(batch.low_indices) == [1, 3]
    assert batch.accuracy == 1.0


def test_clustering_loss_at_decision_boundary():
    model = _separable_cluster_model(0.0)
    loss, batch = clustering_loss(model.forward(SEPARABLE_BAG), SEPARABLE_BAG, model, n_cluster=2)
    assert loss.value[0, 0] == pytest.approx(0.5, abs=1e-15)
    np.testing.assert_array_equal(batch.pseudolabels, [1, 1, 0, 0])


def test_cluster_size_is_clamped(random_model, random_bag):
    rng = np.random.default_rng(7)
    model = random_model(rng, variant="gated-cluster")
    bag = random_bag(rng, k=5, label=1)
    _, batch = clustering_loss(model.forward(bag), bag, model, n_cluster=8)
    assert len(batch.high_indices) == len(batch.low_indices) == 2
    assert not set(batch.high_indices) & set(batch.low_indices)


def test_clustering_skipped_for_single_instance(random_model, random_bag):
    rng = np.random.default_rng(8)
    model = random_model(rng, variant="attn-cluster")
    result = total_loss(random_bag(rng, k=1), model, c2=0.3)
    assert result.pseudo_batch.skipped
    assert result.clustering == 0.0
    assert result.total == pytest.approx(0.7 * result.cross_entropy)


def test_uniform_prediction_costs_ln_m(random_model, random_bag):
    rng = np.random.default_rng(9)
    for n_classes in (2, 3):
        model = random_model(rng, n_classes=n_classes)
        params = dict(model.params, Wc=np.zeros_like(model.params["Wc"]), bc=np.zeros_like(model.params["bc"]))
        result = total_loss(random_bag(rng), model.with_params(params))
        assert result.total == pytest.approx(math.log(n_classes), abs=1e-12)


def test_confident_prediction_costs_nothing(random_model, random_bag):
    rng = np.random.default_rng(10)
    model = random_model(rng)
    bc = np.array([[50.0, -50.0]])
    result = total_loss(random_bag(rng, label=0), model.with_params(dict(model.params, bc=bc)))
    assert result.total < 1e-12


def test_zero_cluster_weight_equals_plain_attention(small_config, random_bag):
    rng = np.random.default_rng(11)
    bag = random_bag(rng, label=1)
    plain = MilModel.initialize(small_config("attn"), np.random.default_rng(42))
    clustered = MilModel.initialize(small_config("attn-cluster"), np.random.default_rng(42))
    for name in plain.params:
        assert plain.params[name].tobytes() == clustered.params[name].tobytes()

    r_plain, g_plain = loss_and_gradients(bag, plain)
    r_clustered, g_clustered = loss_and_gradients(bag, clustered, c2=0.0)
    assert r_clustered.total == r_plain.total == r_plain.cross_entropy
    for name in plain.params:
        assert g_plain[name].tobytes() == g_clustered[name].tobytes()


def test_loss_contracts(random_model, random_bag):
    rng = np.random.default_rng(12)
    model = random_model(rng)
    with pytest.raises(ContractError):
        total_loss(random_bag(rng, label=-1), model)
    with pytest.raises(ContractError):
        total_loss(random_bag(rng, label=2), model)


@pytest.mark.parametrize("variant", [v.value for v in MilVariant])
def test_loss_gradients_match_finite_differences(variant, random_model, random_bag):
    rng = np.random.default_rng(13)
    model = random_model(rng, variant=variant, n_classes=3)
    bag = random_bag(rng, k=6, label=2)
    kwargs = dict(c2=0.3, n_cluster=2)

    def loss_fn(params):
        return total_loss(bag, model.with_params(params), **kwargs).total

    def grad_fn(params):
        return loss_and_gradients(bag, model.with_params(params), **kwargs)[1]

    errors = gradient_check(loss_fn, grad_fn, model.params)
    assert set(errors) == set(model.params)
    worst = max(errors, key=errors.get)
    assert errors[worst] <= 1e-5, f"{variant}/{worst}: {errors[worst]:.2e}"


def test_training_dropout_is_seeded(random_model, random_bag):
    rng = np.random.default_rng(14)
    model = random_model(rng, variant="gated", dropout=0.25)
    bag = random_bag(rng, k=8)
    a = model.forward(bag, training=True, rng=np.random.default_rng(1))
    b = model.forward(bag, training=True, rng=np.random.default_rng(1))
    assert a.probabilities.tobytes() == b.probabilities.tobytes()
    with pytest.raises(ContractError):
        model.forward(bag, training=True)


def test_eval_mode_is_bit_deterministic(random_model, random_bag):
    rng = np.random.default_rng(15)
    model = random_model(rng, variant="gated-cluster", dropout=0.25)
    bag = random_bag(rng, k=12)
    a, b = model.forward(bag), model.forward(bag)
    assert a.attention.tobytes() == b.attention.tobytes()
    assert a.probabilities.tobytes() == b.probabilities.tobytes()


def test_large_bags_stay_finite(random_model):
    rng = np.random.default_rng(16)
    model = random_model(rng, variant="gated", n_classes=3)
    out = model.forward(FeatureBag("huge", "40x", rng.standard_normal((25_000, 6)) * 3.0))
    assert np.all(np.isfinite(out.attention)) and np.all(np.isfinite(out.probabilities))
    np.testing.assert_allclose(out.attention.sum(axis=1), 1.0, rtol=0, atol=1e-9)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(17)
    variants = [v.value for v in MilVariant]
    for case in range(1000):
        config = ModelConfig(variants[case % len(variants)], d_in=int(rng.integers(1, 9)),
                             n_classes=int(rng.integers(2, 4)), embed_dim=int(rng.integers(1, 6)),
                             attn_dim=int(rng.integers(1, 5)), dropout=float(rng.uniform(0, 0.5)))
        model = MilModel.initialize(config, rng, seed=int(rng.integers(0, 2**62)))
        assert decode_checkpoint(encode_checkpoint(model)) == model

    path = save_checkpoint(model, tmp_path / "fold_00.milc")
    assert load_checkpoint(path) == model


def test_checkpoint_seed_covers_full_uint64_range():
    config = ModelConfig("attn", d_in=3, n_classes=2, embed_dim=2, attn_dim=2)
    model = MilModel.initialize(config, np.random.default_rng(19), seed=2**64 - 1)
    assert decode_checkpoint(encode_checkpoint(model)).seed == 2**64 - 1
    for seed in (-1, 2**64):
        with pytest.raises(ParameterError):
            MilModel.initialize(config, np.random.default_rng(19), seed=seed)


def test_corrupted_checkpoints_are_rejected(random_model, tmp_path):
    data = encode_checkpoint(random_model(np.random.default_rng(18), variant="gated"))
    with pytest.raises(ChecksumError):
        decode_checkpoint(data[:-1])
    with pytest.raises(ChecksumError):
        decode_checkpoint(data[:20])
    flipped = bytearray(data)
    flipped[-8] ^= 0x01
    with pytest.raises(ChecksumError):
        decode_checkpoint(bytes(flipped))
    with pytest.raises(FormatError) as bad_magic:
        decode_checkpoint(b"MILF" + data[4:])
    assert not isinstance(bad_magic.value, ChecksumError)
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "absent.milc")
