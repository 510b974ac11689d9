"""
milforge trainer: splits, sampling, training loop and metrics
=============================================================

Cross-validation is Monte Carlo style: each fold is an independent seeded
stratified 80/10/10 resample. Within a fold, an epoch draws as many bags
as there are training slides, with replacement, each slide weighted by the
inverse frequency of its class. Validation loss drives early stopping and
the best-validation parameters are restored before the test evaluation.
"""

import logging
import math
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dataclasses_json import dataclass_json
from scipy.stats import rankdata
from sklearn.metrics import confusion_matrix

from .milforge_autodiff import OptimizerState, adam_step
from .milforge_errors import (
    AggregationError,
    DimensionError,
    ParameterError,
    StratificationError,
    UndefinedMetricError,
)
from .milforge_features import FeatureBag, FeatureStore
from .milforge_models import (
    ATTENTION_DIM,
    DEFAULT_CLUSTER_SIZE,
    DEFAULT_DROPOUT,
    EMBED_DIM,
    MilModel,
    MilVariant,
    ModelConfig,
    loss_and_gradients,
    total_loss,
)
from .milforge_seeding import DROPOUT, INIT, SAMPLING, SPLIT, check_seed, substream
from .milforge_tiling import Magnification

logger = logging.getLogger(__name__)

TABLE_ORDER = [MilVariant.GATED, MilVariant.ATTN, MilVariant.GATED_CLUSTER,
               MilVariant.ATTN_CLUSTER, MilVariant.MAXPOOL]


@dataclass_json
@dataclass
class TrainConfig:
    """Everything that determines one training run"""
    variant: str = MilVariant.GATED.value
    lr: float = 2e-4
    weight_decay: float = 1e-5
    dropout: float = DEFAULT_DROPOUT
    min_epochs: int = 50
    max_epochs: int = 200
    patience: int = 2
    n_cluster: int = DEFAULT_CLUSTER_SIZE
    c1: Optional[float] = None
    c2: float = 0.3
    seed: int = 0
    classes: List[str] = field(default_factory=lambda: ["low", "intermediate", "high"])
    magnification: str = "20x"
    embedding_source: str = "baseline"
    embed_dim: int = EMBED_DIM
    attn_dim: int = ATTENTION_DIM
    n_folds: int = 10
    val_fraction: float = 0.1
    test_fraction: float = 0.1

    def __post_init__(self):
        self.variant = MilVariant.parse(self.variant).value
        self.magnification = Magnification.parse(self.magnification).value
        self.seed = check_seed(self.seed)
        if self.lr <= 0:
            raise ParameterError(f"lr must be positive, got {self.lr}")
        if self.min_epochs < 1:
            raise ParameterError(f"min_epochs must be >= 1, got {self.min_epochs}")
        if self.max_epochs < self.min_epochs:
            raise ParameterError(f"max_epochs ({self.max_epochs}) is below min_epochs ({self.min_epochs})")
        if self.patience < 1:
            raise ParameterError(f"patience must be >= 1, got {self.patience}")
        if self.n_folds < 1:
            raise ParameterError(f"n_folds must be >= 1, got {self.n_folds}")
        if self.c2 < 0 or (self.c1 is not None and self.c1 < 0):
            raise ParameterError("loss weights must be non-negative")
        if not (0 < self.val_fraction < 1 and 0 < self.test_fraction < 1
                and self.val_fraction + self.test_fraction < 1):
            raise ParameterError("validation and test fractions must be positive and sum below 1")

    @property
    def mil_variant(self) -> MilVariant:
        return MilVariant(self.variant)

    def model_config(self, d_in: int) -> ModelConfig:
        return ModelConfig(self.variant, d_in, len(self.classes), self.embed_dim, self.attn_dim, self.dropout)


# -- splits ------------------------------------------------------------------

@dataclass_json
@dataclass
class SplitSpec:
    """One stratified train/validation/test partition (slide ids per class id)"""
    seed: int
    fold: int
    train: Dict[int, List[str]]
    val: Dict[int, List[str]]
    test: Dict[int, List[str]]

    @staticmethod
    def _flatten(part: Mapping[int, List[str]]) -> List[str]:
        return sorted(s for ids in part.values() for s in ids)

    @property
    def train_ids(self) -> List[str]:
        return self._flatten(self.train)

    @property
    def val_ids(self) -> List[str]:
        return self._flatten(self.val)

    @property
    def test_ids(self) -> List[str]:
        return self._flatten(self.test)

    def labels(self) -> Dict[str, int]:
        """Slide id -> class id over all three partitions"""
        mapping = {}
        for part in (self.train, self.val, self.test):
            for class_id, ids in part.items():
                mapping.update({s: int(class_id) for s in ids})
        return mapping


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def _allocate(total: int, counts: Mapping[int, int], capacity: Mapping[int, int],
              rng: np.random.Generator) -> Dict[int, int]:
    """
    Split ``total`` slots over classes in proportion to ``counts``

    Largest remainder with a seeded tie-break, then at least one slot per
    class when ``total`` covers every class.
    """
    classes = sorted(counts)
    n = sum(counts.values())
    ideal = {c: total * counts[c] / n for c in classes}
    quota = {c: min(int(math.floor(ideal[c])), capacity[c]) for c in classes}
    tie_break = {c: r for c, r in zip(classes, rng.permutation(len(classes)))}
    by_remainder = sorted(classes, key=lambda c: (-(ideal[c] - math.floor(ideal[c])), tie_break[c]))
    while sum(quota.values()) < total:
        open_classes = [c for c in by_remainder if quota[c] < capacity[c]]
        if not open_classes:
            break
        for c in open_classes:
            if sum(quota.values()) == total:
                break
            quota[c] += 1
    if total >= len(classes):
        for c in classes:
            if quota[c] == 0 and capacity[c] > 0:
                donor = max(classes, key=lambda d: (quota[d], -tie_break[d]))
                if quota[donor] > 1:
                    quota[donor] -= 1
                    quota[c] = 1
    return quota


def make_splits(labels: Mapping[str, int], seed: int, n_folds: int = 10,
                val_fraction: float = 0.1, test_fraction: float = 0.1) -> List[SplitSpec]:
    """
    Seeded stratified train/validation/test resamples

    Args:
        labels: slide id -> class id
        seed: run seed
        n_folds: number of independent resamples
        val_fraction: share of slides held out for validation
        test_fraction: share of slides held out for testing

    Returns:
        One SplitSpec per fold
    """
    by_class: Dict[int, List[str]] = {}
    for slide_id, class_id in labels.items():
        by_class.setdefault(int(class_id), []).append(slide_id)
    if not by_class:
        raise StratificationError("no labelled slides to split")
    for class_id, ids in sorted(by_class.items()):
        ids.sort()
        if len(ids) < 3:
            raise StratificationError(f"class {class_id} has {len(ids)} slide(s); at least 3 are needed")
        if len(ids) < n_folds:
            logger.warning(f"Class {class_id} has only {len(ids)} slides for {n_folds} folds")

    counts = {c: len(ids) for c, ids in by_class.items()}
    n_total = sum(counts.values())
    n_test = _round_half_up(test_fraction * n_total)
    n_val = _round_half_up(val_fraction * n_total)

    splits = []
    for fold in range(n_folds):
        rng = substream(seed, SPLIT, fold)
        test_quota = _allocate(n_test, counts, {c: counts[c] - 2 for c in counts}, rng)
        val_quota = _allocate(n_val, counts, {c: counts[c] - 1 - test_quota[c] for c in counts}, rng)
        train, val, test = {}, {}, {}
        for class_id in sorted(by_class):
            ids = by_class[class_id]
            shuffled = [ids[i] for i in rng.permutation(len(ids))]
            t, v = test_quota[class_id], val_quota[class_id]
            test[class_id] = sorted(shuffled[:t])
            val[class_id] = sorted(shuffled[t:t + v])
            train[class_id] = sorted(shuffled[t + v:])
        splits.append(SplitSpec(seed, fold, train, val, test))
    logger.info(f"Built {n_folds} splits over {n_total} slides: "
                f"{n_total - n_val - n_test}/{n_val}/{n_test} train/val/test")
    return splits


# -- sampling ----------------------------------------------------------------

class InverseFrequencySampler:
    """Draws slides with probability proportional to 1 / count(class of slide)"""

    def __init__(self, slide_ids: Sequence[str], labels: Mapping[str, int]):
        if not slide_ids:
            raise ParameterError("cannot sample from an empty training set")
        self.slide_ids = list(slide_ids)
        class_counts = Counter(labels[s] for s in self.slide_ids)
        weights = np.array([1.0 / class_counts[labels[s]] for s in self.slide_ids])
        self.weights = weights / weights.sum()

    def draw(self, rng: np.random.Generator, n: int) -> List[str]:
        picks = rng.choice(len(self.slide_ids), size=n, replace=True, p=self.weights)
        return [self.slide_ids[i] for i in picks]


def sample_bag(train_ids: Sequence[str], labels: Mapping[str, int], rng: np.random.Generator) -> str:
    return InverseFrequencySampler(train_ids, labels).draw(rng, 1)[0]


# -- early stopping ----------------------------------------------------------

class EarlyStopping:
    """
    Stops once validation loss has not improved for ``patience`` epochs in a row

    Never stops before ``min_epochs``; always stops at ``max_epochs``.
    Epochs are counted from 1.
    """

    def __init__(self, min_epochs: int = 50, patience: int = 2, max_epochs: int = 200):
        self.min_epochs = min_epochs
        self.patience = patience
        self.max_epochs = max_epochs
        self.epoch = 0
        self.best_loss = math.inf
        self.best_epoch = 0
        self.stale_epochs = 0
        self.reason = ""

    def update(self, val_loss: float) -> bool:
        """
        Record one epoch's validation loss

        Returns:
            True when training should stop after this epoch
        """
        self.epoch += 1
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = self.epoch
            self.stale_epochs = 0
        else:
            self.stale_epochs += 1

        if self.epoch >= self.min_epochs and self.stale_epochs >= self.patience:
            self.reason = f"no improvement for {self.stale_epochs} epochs"
            return True
        if self.epoch >= self.max_epochs:
            self.reason = f"reached max_epochs={self.max_epochs}"
            return True
        return False

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


# -- metrics -----------------------------------------------------------------

def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Exact ROC AUC via mid-ranks: P(pos > neg) + 0.5 P(tie)

    Args:
        scores: positive-class score per slide
        labels: 0/1 labels

    Returns:
        AUC in [0, 1]
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auc(probabilities: np.ndarray, labels: Sequence[int], n_classes: int) -> float:
    """Binary AUC on the class-1 column, or the macro one-vs-rest mean for more classes"""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if n_classes == 2:
        return auc(probabilities[:, 1], labels == 1)
    return float(np.mean([auc(probabilities[:, c], labels == c) for c in range(n_classes)]))


# -- reports -----------------------------------------------------------------

@dataclass_json
@dataclass
class FoldReport:
    fold: int
    variant: str
    method: str
    embedding_source: str
    magnification: str
    n_train: int
    n_val: int
    n_test: int
    train_losses: List[float]
    val_losses: List[float]
    pseudo_accuracy: List[float]
    test_auc: Optional[float]
    test_accuracy: float
    confusion: List[List[int]]
    stopping_epoch: int
    best_epoch: int
    stop_reason: str
    test_probabilities: Dict[str, List[float]]
    wall_clock: float = field(default=0.0, compare=False)


@dataclass
class Evaluation:
    probabilities: np.ndarray
    labels: np.ndarray
    predictions: np.ndarray
    loss: float


def evaluate(model: MilModel, bags: Sequence[FeatureBag], config: TrainConfig) -> Evaluation:
    """Eval-mode forward over labelled bags"""
    probabilities, labels, losses = [], [], []
    for bag in bags:
        result = total_loss(bag, model, config.c1, config.c2, config.n_cluster)
        probabilities.append(result.output.probabilities)
        labels.append(bag.label)
        losses.append(result.total)
    probabilities = np.vstack(probabilities)
    return Evaluation(probabilities, np.asarray(labels), np.argmax(probabilities, axis=1), float(np.mean(losses)))


def _load_labelled(store: FeatureStore, labels: Mapping[str, int], slide_ids: Sequence[str],
                   magnification: str) -> Dict[str, FeatureBag]:
    bags = {}
    for slide_id in slide_ids:
        bag = store.load(slide_id, magnification)
        bags[slide_id] = bag if bag.label == labels[slide_id] else bag.with_label(labels[slide_id])
    return bags


def train_fold(split: SplitSpec, config: TrainConfig, store: FeatureStore) -> Tuple[FoldReport, MilModel]:
    """
    Train one head on one split

    Args:
        split: partition of labelled slides
        config: run configuration (variant, optimizer, stopping rule)
        store: embeddings for every slide in the split at config.magnification

    Returns:
        (FoldReport, model restored to the best validation epoch)
    """
    started = time.perf_counter()
    labels = split.labels()
    all_ids = split.train_ids + split.val_ids + split.test_ids
    store.require(all_ids, config.magnification)
    bags = _load_labelled(store, labels, all_ids, config.magnification)
    dims = {bag.dim for bag in bags.values()}
    if len(dims) != 1:
        raise DimensionError(f"split {split.fold} mixes embedding dimensions {sorted(dims)}")
    d_in = dims.pop()

    variant = config.mil_variant
    model = MilModel.initialize(config.model_config(d_in), substream(config.seed, INIT, split.fold), config.seed)
    sampling_rng = substream(config.seed, SAMPLING, split.fold)
    dropout_rng = substream(config.seed, DROPOUT, split.fold)
    optimizer = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    stopper = EarlyStopping(config.min_epochs, config.patience, config.max_epochs)
    sampler = InverseFrequencySampler(split.train_ids, labels)
    val_bags = [bags[s] for s in split.val_ids]

    train_losses, val_losses, pseudo_accuracy = [], [], []
    best_params = model.params
    while True:
        epoch_losses, epoch_pseudo = [], []
        for slide_id in sampler.draw(sampling_rng, len(split.train_ids)):
            result, grads = loss_and_gradients(bags[slide_id], model, c1=config.c1, c2=config.c2,
                                               n_cluster=config.n_cluster, training=True, rng=dropout_rng)
            model = model.with_params(adam_step(model.params, grads, optimizer))
            epoch_losses.append(result.total)
            if result.pseudo_batch is not None and not result.pseudo_batch.skipped:
                epoch_pseudo.append(result.pseudo_batch.accuracy)
        train_losses.append(float(np.mean(epoch_losses)))
        if variant.clustering:
            pseudo_accuracy.append(float(np.mean(epoch_pseudo)) if epoch_pseudo else 0.0)

        val_loss = evaluate(model, val_bags, config).loss
        val_losses.append(val_loss)
        stop = stopper.update(val_loss)
        if stopper.improved:
            best_params = model.params
        logger.debug(f"[{variant.value} fold {split.fold}] epoch {stopper.epoch}: "
                     f"train {train_losses[-1]:.4f} val {val_loss:.4f}")
        if stop:
            break

    model = model.with_params(best_params)
    test_bags = [bags[s] for s in split.test_ids]
    result = evaluate(model, test_bags, config)
    n_classes = len(config.classes)
    try:
        test_auc = macro_auc(result.probabilities, result.labels, n_classes)
    except UndefinedMetricError as e:
        logger.warning(f"[{variant.value} fold {split.fold}] test AUC undefined: {e}")
        test_auc = None
    matrix = confusion_matrix(result.labels, result.predictions, labels=list(range(n_classes)))

    report = FoldReport(
        fold=split.fold,
        variant=variant.value,
        method=variant.method_label,
        embedding_source=config.embedding_source,
        magnification=config.magnification,
        n_train=len(split.train_ids),
        n_val=len(split.val_ids),
        n_test=len(test_bags),
        train_losses=train_losses,
        val_losses=val_losses,
        pseudo_accuracy=pseudo_accuracy,
        test_auc=test_auc,
        test_accuracy=float(np.mean(result.predictions == result.labels)),
        confusion=matrix.astype(int).tolist(),
        stopping_epoch=stopper.epoch,
        best_epoch=stopper.best_epoch,
        stop_reason=stopper.reason,
        test_probabilities={s: result.probabilities[i].tolist() for i, s in enumerate(split.test_ids)},
        wall_clock=time.perf_counter() - started,
    )
    auc_text = "n/a" if test_auc is None else f"{test_auc:.3f}"
    logger.info(f"[{variant.value} fold {split.fold}] stopped at epoch {stopper.epoch} ({stopper.reason}), "
                f"best {stopper.best_epoch}; test AUC {auc_text}, accuracy {report.test_accuracy:.3f}")
    return report, model


def cross_validate(labels: Mapping[str, int], config: TrainConfig, store: FeatureStore,
                   jobs: int = 1) -> List[Tuple[FoldReport, MilModel]]:
    """Run every fold of one configuration; folds may run concurrently with identical results"""
    splits = make_splits(labels, config.seed, config.n_folds, config.val_fraction, config.test_fraction)
    store.require(labels.keys(), config.magnification)
    if jobs > 1 and len(splits) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            return list(executor.map(lambda s: train_fold(s, config, store), splits))
    return [train_fold(split, config, store) for split in splits]


@dataclass
class MetricSummary:
    mean: float
    sd: float

    def __str__(self) -> str:
        return f"{self.mean:.2f} ± {self.sd:.2f}"


def aggregate(reports: Sequence[FoldReport]) -> Dict[str, MetricSummary]:
    """
    Mean and sample standard deviation of test AUC and accuracy

    Folds with an undefined AUC are left out of the AUC summary.
    """
    if len(reports) < 2:
        raise AggregationError(f"need at least 2 fold reports to aggregate, got {len(reports)}")
    frame = pd.DataFrame({
        "auc": [np.nan if r.test_auc is None else r.test_auc for r in reports],
        "accuracy": [r.test_accuracy for r in reports],
    })
    if frame["auc"].count() < 2:
        raise AggregationError("fewer than 2 folds have a defined AUC")
    means, sds = frame.mean(), frame.std(ddof=1)
    return {name: MetricSummary(float(means[name]), float(sds[name])) for name in frame.columns}


def aggregate_table(runs: Mapping[str, Sequence[FoldReport]]) -> pd.DataFrame:
    """
    One row per (method, embedding source, magnification), in result-table order

    Args:
        runs: variant tag -> fold reports of that variant

    Returns:
        DataFrame with mean/SD columns for AUC and accuracy
    """
    rows = []
    order = {v.value: i for i, v in enumerate(TABLE_ORDER)}
    for variant in sorted(runs, key=lambda v: order[MilVariant.parse(v).value]):
        reports = runs[variant]
        summary = aggregate(reports)
        rows.append({
            "method": MilVariant.parse(variant).method_label,
            "embedding": reports[0].embedding_source,
            "magnification": reports[0].magnification,
            "folds": len(reports),
            "auc_mean": summary["auc"].mean,
            "auc_sd": summary["auc"].sd,
            "accuracy_mean": summary["accuracy"].mean,
            "accuracy_sd": summary["accuracy"].sd,
        })
    return pd.DataFrame(rows, columns=["method", "embedding", "magnification", "folds",
                                       "auc_mean", "auc_sd", "accuracy_mean", "accuracy_sd"])


def write_aggregate_csv(table: pd.DataFrame, path) -> None:
    table.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")


def with_overrides(config: TrainConfig, **overrides) -> TrainConfig:
    """Apply non-None overrides and re-validate"""
    return replace(config, **{k: v for k, v in overrides.items() if v is not None})


# -- synthetic benchmark -----------------------------------------------------

@dataclass
class SyntheticBenchmark:
    bags: List[FeatureBag]
    witnesses: Dict[str, np.ndarray]

    @property
    def labels(self) -> Dict[str, int]:
        return {bag.slide_id: bag.label for bag in self.bags}


def make_synthetic_bags(n_bags: int = 300, dim: int = 64, k_range: Tuple[int, int] = (50, 200),
                        witness_fraction: float = 0.05, shift: float = 1.0, n_signal: int = 8,
                        positive_fraction: float = 0.5, seed: int = 0,
                        magnification: str = "20x") -> SyntheticBenchmark:
    """
    Gaussian MIL benchmark with planted witness instances

    Negative bags hold N(0, I) instances. Positive bags additionally shift
    a ``witness_fraction`` of their instances by ``shift`` in the first
    ``n_signal`` coordinates.
    """
    if not 0 < witness_fraction <= 1 or n_signal > dim:
        raise ParameterError("witness_fraction must be in (0, 1] and n_signal <= dim")
    rng = substream(seed, "synthetic")
    n_positive = _round_half_up(positive_fraction * n_bags)
    labels = np.array([1] * n_positive + [0] * (n_bags - n_positive))
    labels = labels[rng.permutation(n_bags)]

    bags, witnesses = [], {}
    for i, label in enumerate(labels):
        k = int(rng.integers(k_range[0], k_range[1] + 1))
        features = rng.standard_normal((k, dim))
        slide_id = f"synthetic-{i:04d}"
        if label == 1:
            n_witness = max(1, _round_half_up(witness_fraction * k))
            chosen = np.sort(rng.choice(k, size=n_witness, replace=False))
            features[chosen, :n_signal] += shift
            witnesses[slide_id] = chosen
        else:
            witnesses[slide_id] = np.zeros(0, dtype=np.int64)
        bags.append(FeatureBag(slide_id, magnification, features, int(label)))
    return SyntheticBenchmark(bags, witnesses)


def witness_attention_mass(attention: np.ndarray, witness_indices: np.ndarray) -> float:
    """Share of one attention vector that lands on witness instances"""
    return float(np.asarray(attention)[np.asarray(witness_indices, dtype=np.intp)].sum())
