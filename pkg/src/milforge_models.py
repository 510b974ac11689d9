"""
milforge models: MIL aggregation heads
======================================

Five heads map a FeatureBag to slide-level class probabilities:

- ``maxpool``: instance classifier, slide prediction from the single most
  confident instance
- ``attn`` / ``gated``: per-class attention pooling (tanh, or tanh gated by
  a sigmoid branch)
- ``attn-cluster`` / ``gated-cluster``: attention pooling plus an auxiliary
  instance-clustering objective on the most and least attended instances

Every forward pass records onto a fresh ``Tape`` so losses can be
differentiated with respect to the parameter dict.
"""

import logging
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from dataclasses_json import dataclass_json

from .milforge_autodiff import (
    Node,
    Tape,
    add,
    dropout,
    elem_mul,
    log_softmax_rows,
    matmul,
    mean_all,
    pick,
    relu_elem,
    scale,
    sigm_elem,
    smooth_hinge,
    softmax_rows,
    take_rows,
    tanh_elem,
    transpose,
)
from .milforge_errors import (
    ChecksumError,
    ConfigurationError,
    ContractError,
    DimensionError,
    FormatError,
    ParameterError,
)
from .milforge_features import FeatureBag
from .milforge_seeding import check_seed

logger = logging.getLogger(__name__)

EMBED_DIM = 512
ATTENTION_DIM = 256
DEFAULT_DROPOUT = 0.25
DEFAULT_CLUSTER_SIZE = 8

CHECKPOINT_MAGIC = b"MILC"
CHECKPOINT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHHIIIIdQH")
_PARAM_HEAD = struct.Struct("<II")
_NAME_LEN = struct.Struct("<H")
_CRC = struct.Struct("<I")
_PARAM_DTYPE = np.dtype("<f8")


class MilVariant(Enum):
    """Aggregation head"""
    MAXPOOL = "maxpool"
    ATTN = "attn"
    GATED = "gated"
    ATTN_CLUSTER = "attn-cluster"
    GATED_CLUSTER = "gated-cluster"

    @property
    def has_attention(self) -> bool:
        return self is not MilVariant.MAXPOOL

    @property
    def gated(self) -> bool:
        return self in (MilVariant.GATED, MilVariant.GATED_CLUSTER)

    @property
    def clustering(self) -> bool:
        return self in (MilVariant.ATTN_CLUSTER, MilVariant.GATED_CLUSTER)

    @property
    def code(self) -> int:
        return list(MilVariant).index(self)

    @property
    def method_label(self) -> str:
        """Row label used in result tables"""
        return _METHOD_LABELS[self]

    @classmethod
    def parse(cls, tag: Union[str, "MilVariant"]) -> "MilVariant":
        if isinstance(tag, MilVariant):
            return tag
        try:
            return cls(str(tag).strip().lower())
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise ConfigurationError(f"unknown variant '{tag}', expected one of {names}") from None


_METHOD_LABELS = {
    MilVariant.GATED: "Gated-Attention",
    MilVariant.ATTN: "Attention",
    MilVariant.GATED_CLUSTER: "Gated-attention with clustering",
    MilVariant.ATTN_CLUSTER: "Attention with clustering",
    MilVariant.MAXPOOL: "Max-pooling MIL",
}


@dataclass_json
@dataclass
class ModelConfig:
    """Architecture of one head; the parameter layout is a pure function of it"""
    variant: str = MilVariant.GATED.value
    d_in: int = 1024
    n_classes: int = 3
    embed_dim: int = EMBED_DIM
    attn_dim: int = ATTENTION_DIM
    dropout: float = DEFAULT_DROPOUT

    def __post_init__(self):
        self.variant = MilVariant.parse(self.variant).value
        for name in ("d_in", "n_classes", "embed_dim", "attn_dim"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def mil_variant(self) -> MilVariant:
        return MilVariant(self.variant)

    @property
    def compresses(self) -> bool:
        return self.d_in != self.embed_dim


def parameter_shapes(config: ModelConfig) -> Dict[str, tuple]:
    """
    Ordered parameter layout

    Shared layers come first so heads that differ only by extra branches
    draw identical initial values for the shared weights.
    """
    variant = config.mil_variant
    E, A, M = config.embed_dim, config.attn_dim, config.n_classes
    shapes: Dict[str, tuple] = {}
    if config.compresses:
        shapes["W1"] = (config.d_in, E)
        shapes["b1"] = (1, E)
    if not variant.has_attention:
        shapes["Winst"] = (E, M)
        shapes["binst"] = (1, M)
        return shapes
    shapes["V"] = (E, A)
    shapes["bV"] = (1, A)
    if variant.gated:
        shapes["U"] = (E, A)
        shapes["bU"] = (1, A)
    shapes["Wa"] = (A, M)
    shapes["Wc"] = (M, E)
    shapes["bc"] = (1, M)
    if variant.clustering:
        for c in range(M):
            shapes[f"inst_W{c}"] = (E, 2)
            shapes[f"inst_b{c}"] = (1, 2)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Xavier-uniform weights, zero biases"""
    params = {}
    for name, (fan_in, fan_out) in parameter_shapes(config).items():
        if name.startswith("b") or name.startswith("inst_b"):
            params[name] = np.zeros((fan_in, fan_out))
            continue
        # per-class rows of Wc each map E -> 1
        if name == "Wc":
            limit = np.sqrt(6.0 / (fan_out + 1))
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    return params


@dataclass
class InstancePseudoBatch:
    """Top-B / bottom-B instances picked for the clustering objective"""
    high_indices: np.ndarray
    low_indices: np.ndarray
    pseudolabels: np.ndarray
    instance_logits: np.ndarray
    skipped: bool = False

    @property
    def accuracy(self) -> float:
        """Fraction of picked instances whose instance-classifier argmax matches the pseudolabel"""
        if self.skipped or self.pseudolabels.size == 0:
            return float("nan")
        return float(np.mean(np.argmax(self.instance_logits, axis=1) == self.pseudolabels))


@dataclass
class AttentionOutput:
    attention: np.ndarray
    bag_representations: np.ndarray
    probabilities: np.ndarray
    predicted: int
    tape: Tape = field(repr=False, compare=False)
    nodes: Dict[str, Node] = field(repr=False, compare=False)


@dataclass
class MaxPoolOutput:
    probabilities: np.ndarray
    predicted: int
    max_instance: int
    instance_probabilities: np.ndarray
    tape: Tape = field(repr=False, compare=False)
    nodes: Dict[str, Node] = field(repr=False, compare=False)


@dataclass
class LossResult:
    total: float
    cross_entropy: float
    clustering: float
    output: Union[AttentionOutput, MaxPoolOutput] = field(repr=False)
    node: Node = field(repr=False)
    pseudo_batch: Optional[InstancePseudoBatch] = None


class MilModel:
    """A head configuration plus its parameters"""

    def __init__(self, config: ModelConfig, params: Dict[str, np.ndarray], seed: int = 0):
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            raise ContractError(f"parameter names {sorted(params)} do not match layout {sorted(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"parameter '{name}' has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = {name: np.ascontiguousarray(params[name], dtype=np.float64) for name in expected}
        self.seed = check_seed(seed)

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator, seed: int = 0) -> "MilModel":
        return cls(config, init_params(config, rng), seed)

    @property
    def variant(self) -> MilVariant:
        return self.config.mil_variant

    @property
    def n_parameters(self) -> int:
        return int(sum(value.size for value in self.params.values()))

    def with_params(self, params: Dict[str, np.ndarray]) -> "MilModel":
        return MilModel(self.config, params, self.seed)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MilModel):
            return NotImplemented
        return (self.config == other.config and self.seed == other.seed
                and list(self.params) == list(other.params)
                and all(self.params[k].tobytes() == other.params[k].tobytes() for k in self.params))

    def _embed(self, tape: Tape, nodes: Dict[str, Node], bag: FeatureBag,
               training: bool, rng: Optional[np.random.Generator]) -> Node:
        if bag.dim != self.config.d_in:
            raise DimensionError(f"bag '{bag.slide_id}' has {bag.dim}-d embeddings, model expects {self.config.d_in}")
        for name, value in self.params.items():
            nodes[name] = tape.variable(value, name)
        hidden = tape.constant(bag.features, "X")
        if self.config.compresses:
            hidden = relu_elem(add(matmul(hidden, nodes["W1"]), nodes["b1"]))
        return dropout(hidden, self.config.dropout, training, rng)

    def forward(self, bag: FeatureBag, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Union[AttentionOutput, MaxPoolOutput]:
        if self.variant.has_attention:
            return self.forward_attention(bag, training, rng)
        return self.forward_maxpool(bag, training, rng)

    def forward_attention(self, bag: FeatureBag, training: bool = False,
                          rng: Optional[np.random.Generator] = None) -> AttentionOutput:
        """
        Per-class attention pooling

        Args:
            bag: input bag (K x d_in)
            training: enable dropout
            rng: dropout generator, required when training

        Returns:
            AttentionOutput with an M x K attention matrix (rows sum to 1)
        """
        if not self.variant.has_attention:
            raise ContractError("forward_attention called on a max-pooling head")
        tape, nodes = Tape(), {}
        p = self.config.dropout
        hidden = self._embed(tape, nodes, bag, training, rng)

        gate = dropout(tanh_elem(add(matmul(hidden, nodes["V"]), nodes["bV"])), p, training, rng)
        if self.variant.gated:
            sig = dropout(sigm_elem(add(matmul(hidden, nodes["U"]), nodes["bU"])), p, training, rng)
            gate = elem_mul(gate, sig)
        scores = matmul(gate, nodes["Wa"])
        attention = softmax_rows(transpose(scores))
        pooled = matmul(attention, hidden)

        ones = tape.constant(np.ones((self.config.embed_dim, 1)))
        logits = add(transpose(matmul(elem_mul(pooled, nodes["Wc"]), ones)), nodes["bc"])
        probs = softmax_rows(logits)

        nodes.update(hidden=hidden, attention=attention, pooled=pooled, logits=logits, probs=probs)
        probabilities = probs.value[0].copy()
        return AttentionOutput(attention.value.copy(), pooled.value.copy(), probabilities,
                               int(np.argmax(probabilities)), tape, nodes)

    def forward_maxpool(self, bag: FeatureBag, training: bool = False,
                        rng: Optional[np.random.Generator] = None) -> MaxPoolOutput:
        """
        Instance-level classification, slide prediction from the most confident instance

        The (instance, class) pair with the highest instance probability
        decides; that instance's full distribution becomes the slide's.
        """
        if self.variant.has_attention:
            raise ContractError("forward_maxpool called on an attention head")
        tape, nodes = Tape(), {}
        hidden = self._embed(tape, nodes, bag, training, rng)
        instance_logits = add(matmul(hidden, nodes["Winst"]), nodes["binst"])
        instance_probs = np.exp(instance_logits.value - instance_logits.value.max(axis=1, keepdims=True))
        instance_probs /= instance_probs.sum(axis=1, keepdims=True)

        k, predicted = np.unravel_index(int(np.argmax(instance_probs)), instance_probs.shape)
        logits = take_rows(instance_logits, [int(k)])
        probs = softmax_rows(logits)
        nodes.update(hidden=hidden, instance_logits=instance_logits, logits=logits, probs=probs)
        return MaxPoolOutput(probs.value[0].copy(), int(predicted), int(k), instance_probs, tape, nodes)


def clustering_loss(output: AttentionOutput, bag: FeatureBag, model: MilModel,
                    n_cluster: int = DEFAULT_CLUSTER_SIZE):
    """
    Smooth-hinge instance clustering on the true class's attention branch

    The B most attended instances get pseudolabel 1 and the B least
    attended get 0; B is clamped to floor(K/2).

    Returns:
        (loss node or None when skipped, InstancePseudoBatch)
    """
    if not bag.is_labeled:
        raise ContractError(f"clustering loss needs a labelled bag, '{bag.slide_id}' is unlabelled")
    K = bag.n_instances
    empty = np.zeros(0, dtype=np.intp)
    if K < 2:
        logger.warning(f"Bag '{bag.slide_id}' has {K} instance(s); clustering loss skipped")
        return None, InstancePseudoBatch(empty, empty, empty, np.zeros((0, 2)), skipped=True)
    B = min(int(n_cluster), K // 2)
    if B < int(n_cluster):
        logger.warning(f"Bag '{bag.slide_id}': cluster size clamped from {n_cluster} to {B}")

    nodes, tape = output.nodes, output.tape
    order = np.argsort(-output.attention[bag.label], kind="stable")
    high, low = order[:B], order[K - B:]
    picked = take_rows(nodes["hidden"], np.concatenate([high, low]))
    logits = add(matmul(picked, nodes[f"inst_W{bag.label}"]), nodes[f"inst_b{bag.label}"])

    difference = matmul(logits, tape.constant([[-1.0], [1.0]]))
    signs = tape.constant(np.concatenate([np.ones(B), -np.ones(B)]).reshape(-1, 1))
    loss = mean_all(smooth_hinge(elem_mul(difference, signs)))

    pseudolabels = np.concatenate([np.ones(B, dtype=np.intp), np.zeros(B, dtype=np.intp)])
    return loss, InstancePseudoBatch(high, low, pseudolabels, logits.value.copy())


def total_loss(bag: FeatureBag, model: MilModel, c1: Optional[float] = None, c2: float = 0.3,
               n_cluster: int = DEFAULT_CLUSTER_SIZE, training: bool = False,
               rng: Optional[np.random.Generator] = None) -> LossResult:
    """
    Slide cross-entropy, plus weighted clustering loss for clustering heads

    ``c1`` defaults to ``1 - c2``. With ``c2 == 0`` the clustering branch is
    not evaluated and the loss equals plain cross-entropy.
    """
    if not bag.is_labeled:
        raise ContractError(f"bag '{bag.slide_id}' has no label")
    if not 0 <= bag.label < model.config.n_classes:
        raise ContractError(f"label {bag.label} of '{bag.slide_id}' is outside {model.config.n_classes} classes")
    output = model.forward(bag, training, rng)
    ce = scale(pick(log_softmax_rows(output.nodes["logits"]), 0, bag.label), -1.0)

    if not model.variant.clustering or c2 == 0:
        return LossResult(float(ce.value[0, 0]), float(ce.value[0, 0]), 0.0, output, ce)

    c1 = 1.0 - c2 if c1 is None else c1
    cluster, batch = clustering_loss(output, bag, model, n_cluster)
    if cluster is None:
        total = scale(ce, c1)
        cluster_value = 0.0
    else:
        total = add(scale(ce, c1), scale(cluster, c2))
        cluster_value = float(cluster.value[0, 0])
    return LossResult(float(total.value[0, 0]), float(ce.value[0, 0]), cluster_value, output, total, batch)


def loss_and_gradients(bag: FeatureBag, model: MilModel, **loss_kwargs):
    """Forward plus backward; returns (LossResult, gradients by parameter name)"""
    result = total_loss(bag, model, **loss_kwargs)
    grads = result.output.tape.backward(result.node)
    return result, {name: grads[result.output.nodes[name]] for name in model.params}


# -- checkpoints -------------------------------------------------------------

def encode_checkpoint(model: MilModel) -> bytes:
    cfg = model.config
    chunks = [_CKPT_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cfg.mil_variant.code, cfg.d_in,
                              cfg.n_classes, cfg.embed_dim, cfg.attn_dim, cfg.dropout,
                              model.seed, len(model.params))]
    payload: List[bytes] = []
    for name, value in model.params.items():
        encoded = name.encode("utf-8")
        chunks.append(_NAME_LEN.pack(len(encoded)) + encoded + _PARAM_HEAD.pack(*value.shape))
        payload.append(value.astype(_PARAM_DTYPE).tobytes(order="C"))
    body = b"".join(payload)
    return b"".join(chunks) + body + _CRC.pack(zlib.crc32(body))


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> MilModel:
    view = memoryview(data)
    if len(view) < _CKPT_HEAD.size:
        raise ChecksumError(f"{source}: truncated checkpoint header")
    (magic, version, variant_code, d_in, n_classes, embed_dim, attn_dim,
     p, seed, n_params) = _CKPT_HEAD.unpack_from(view, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{source}: bad magic {bytes(magic)!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    variants = list(MilVariant)
    if variant_code >= len(variants):
        raise FormatError(f"{source}: unknown variant code {variant_code}")

    offset = _CKPT_HEAD.size
    layout = []
    for _ in range(n_params):
        if len(view) < offset + _NAME_LEN.size:
            raise ChecksumError(f"{source}: truncated parameter table")
        (name_len,) = _NAME_LEN.unpack_from(view, offset)
        offset += _NAME_LEN.size
        if len(view) < offset + name_len + _PARAM_HEAD.size:
            raise ChecksumError(f"{source}: truncated parameter table")
        name = bytes(view[offset:offset + name_len]).decode("utf-8", errors="replace")
        offset += name_len
        rows, cols = _PARAM_HEAD.unpack_from(view, offset)
        offset += _PARAM_HEAD.size
        layout.append((name, rows, cols))

    payload_len = sum(rows * cols for _, rows, cols in layout) * _PARAM_DTYPE.itemsize
    expected_total = offset + payload_len + _CRC.size
    if len(view) < expected_total:
        raise ChecksumError(f"{source}: truncated payload ({len(view)} of {expected_total} bytes)")
    if len(view) > expected_total:
        raise FormatError(f"{source}: {len(view) - expected_total} trailing bytes after checksum")
    body = view[offset:offset + payload_len]
    (stored_crc,) = _CRC.unpack_from(view, offset + payload_len)
    if zlib.crc32(body) != stored_crc:
        raise ChecksumError(f"{source}: payload checksum mismatch")

    try:
        config = ModelConfig(variants[variant_code].value, d_in, n_classes, embed_dim, attn_dim, p)
    except ParameterError as e:
        raise FormatError(f"{source}: invalid architecture in header: {e}") from e
    params, cursor = {}, 0
    for name, rows, cols in layout:
        size = rows * cols * _PARAM_DTYPE.itemsize
        params[name] = np.frombuffer(body[cursor:cursor + size], dtype=_PARAM_DTYPE).reshape(rows, cols).astype(np.float64)
        cursor += size
    try:
        return MilModel(config, params, seed)
    except (ContractError, DimensionError) as e:
        raise FormatError(f"{source}: parameter table does not match the architecture: {e}") from e


def save_checkpoint(model: MilModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model))
    return path


def load_checkpoint(path: Union[str, Path]) -> MilModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(data, str(path))
