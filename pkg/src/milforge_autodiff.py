"""
milforge autodiff: dense reverse-mode differentiation
=====================================================

A deliberately small tape-based reverse-mode engine over 2-D float64
matrices. It supports exactly the primitives the MIL heads use (matrix
product, bias add, tanh, sigmoid, ReLU, row softmax / log-softmax,
Hadamard product, dropout, row gathering, reductions and the smooth hinge)
together with a decoupled-weight-decay Adam optimizer and a central
finite-difference gradient checker.

Nodes are appended to the tape in evaluation order, so replaying the tape
backwards is a valid reverse topological order.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .milforge_errors import ContractError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

Matrix = np.ndarray
VJP = Callable[[np.ndarray], Tuple[np.ndarray, ...]]


def as_matrix(value) -> Matrix:
    """
    Coerce a scalar, vector or 2-D array to a contiguous float64 matrix

    Scalars become 1x1 and 1-D arrays become a single row.
    """
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 0:
        array = array.reshape(1, 1)
    elif array.ndim == 1:
        array = array.reshape(1, -1)
    elif array.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {array.ndim} dimensions", array.shape)
    return np.ascontiguousarray(array)


class Node:
    """One recorded value on a tape"""

    __slots__ = ("tape", "id", "value", "name", "requires_grad")

    def __init__(self, tape: "Tape", node_id: int, value: Matrix, name: Optional[str], requires_grad: bool):
        self.tape = tape
        self.id = node_id
        self.value = value
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node(#{self.id}{label} {self.rows}x{self.cols})"


class GradientMap:
    """Gradients produced by one backward pass, indexed by node or variable name"""

    def __init__(self, tape: "Tape", grads: List[Optional[Matrix]]):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, node: Node) -> Matrix:
        if node.tape is not self._tape:
            raise ContractError(f"{node} belongs to a different tape")
        grad = self._grads[node.id] if node.id < len(self._grads) else None
        if grad is None:
            return np.zeros(node.shape)
        return grad

    def by_name(self) -> Dict[str, Matrix]:
        """Gradients of every named variable on the tape"""
        return {node.name: self[node] for node in self._tape.variables()}


class Tape:
    """
    Ordered record of primitive operations

    A tape belongs to one forward computation and one thread. Calling
    ``backward`` does not mutate the tape, so repeated calls reproduce the
    same gradients bit for bit.
    """

    def __init__(self):
        self._nodes: List[Node] = []
        self._parents: List[Tuple[int, ...]] = []
        self._vjps: List[Optional[VJP]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def variable(self, value, name: Optional[str] = None) -> Node:
        """Register a trainable leaf"""
        return self._append(as_matrix(value), (), None, name, True)

    def constant(self, value, name: Optional[str] = None) -> Node:
        """Register a leaf that never receives a gradient"""
        return self._append(as_matrix(value), (), None, name, False)

    def variables(self) -> List[Node]:
        return [n for n in self._nodes if n.requires_grad and not self._parents[n.id] and n.name]

    def record(self, value: Matrix, parents: Sequence[Node], vjp: VJP) -> Node:
        """Append the result of a primitive and its vector-Jacobian product"""
        for parent in parents:
            if parent.tape is not self:
                raise ContractError(f"{parent} was recorded on a different tape")
        requires_grad = any(p.requires_grad for p in parents)
        return self._append(value, tuple(p.id for p in parents), vjp if requires_grad else None, None, requires_grad)

    def _append(self, value, parents, vjp, name, requires_grad) -> Node:
        node = Node(self, len(self._nodes), value, name, requires_grad)
        self._nodes.append(node)
        self._parents.append(parents)
        self._vjps.append(vjp)
        return node

    def backward(self, loss: Node) -> GradientMap:
        """
        Reverse-mode sweep from a scalar loss

        Args:
            loss: 1x1 node recorded on this tape

        Returns:
            GradientMap; nodes the loss does not depend on get zero gradients
        """
        if loss.tape is not self:
            raise ContractError(f"{loss} was recorded on a different tape")
        if loss.shape != (1, 1):
            raise ContractError(f"backward() needs a scalar (1x1) loss, got {loss.rows}x{loss.cols}")

        grads: List[Optional[Matrix]] = [None] * len(self._nodes)
        grads[loss.id] = np.ones((1, 1))
        for node_id in range(loss.id, -1, -1):
            upstream = grads[node_id]
            vjp = self._vjps[node_id]
            if upstream is None or vjp is None:
                continue
            for parent_id, contribution in zip(self._parents[node_id], vjp(upstream)):
                if not self._nodes[parent_id].requires_grad:
                    continue
                current = grads[parent_id]
                grads[parent_id] = contribution.copy() if current is None else current + contribution
        return GradientMap(self, grads)


# -- primitives --------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    """Matrix product a·b"""
    if a.cols != b.rows:
        raise ShapeError("matmul dimension mismatch", a.shape, b.shape)
    av, bv = a.value, b.value
    return a.tape.record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Node, b: Node) -> Node:
    """Element-wise sum; ``b`` may be a single row broadcast over ``a``'s rows"""
    if a.shape == b.shape:
        return a.tape.record(a.value + b.value, (a, b), lambda g: (g, g))
    if b.rows == 1 and b.cols == a.cols:
        return a.tape.record(a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0, keepdims=True)))
    raise ShapeError("add shape mismatch", a.shape, b.shape)


def elem_mul(a: Node, b: Node) -> Node:
    """Hadamard product"""
    if a.shape != b.shape:
        raise ShapeError("elem_mul shape mismatch", a.shape, b.shape)
    av, bv = a.value, b.value
    return a.tape.record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(x: Node, factor: float) -> Node:
    factor = float(factor)
    return x.tape.record(x.value * factor, (x,), lambda g: (g * factor,))


def transpose(x: Node) -> Node:
    return x.tape.record(np.ascontiguousarray(x.value.T), (x,), lambda g: (g.T,))


def tanh_elem(x: Node) -> Node:
    """Element-wise tanh, gradient 1 - tanh²"""
    y = np.tanh(x.value)
    return x.tape.record(y, (x,), lambda g: (g * (1.0 - y * y),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    y = np.empty_like(x)
    positive = x >= 0
    y[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    ex = np.exp(x[~positive])
    y[~positive] = ex / (1.0 + ex)
    return y


def sigm_elem(x: Node) -> Node:
    """Element-wise logistic, branching on sign so |x| ~ 1e3 stays finite"""
    y = _stable_sigmoid(x.value)
    return x.tape.record(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu_elem(x: Node) -> Node:
    active = x.value > 0
    return x.tape.record(np.where(active, x.value, 0.0), (x,), lambda g: (g * active,))


def softmax_rows(x: Node) -> Node:
    """Row-wise softmax with max subtraction"""
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    return x.tape.record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def log_softmax_rows(x: Node) -> Node:
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - log_norm
    probs = np.exp(y)
    return x.tape.record(y, (x,), lambda g: (g - probs * g.sum(axis=1, keepdims=True),))


def dropout(x: Node, p: float, training: bool, rng: Optional[np.random.Generator]) -> Node:
    """
    Inverted dropout

    Args:
        x: input node
        p: drop probability, 0 <= p < 1
        training: when False the input node is returned unchanged
        rng: seeded generator, required in training mode when p > 0

    Returns:
        Node whose surviving entries are scaled by 1/(1-p)
    """
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x.tape.record(x.value * mask, (x,), lambda g: (g * mask,))


def take_rows(x: Node, indices: Sequence[int]) -> Node:
    """Gather rows (repeats allowed; gradients are scattered back with accumulation)"""
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return x.tape.record(x.value[idx], (x,), vjp)


def pick(x: Node, row: int, col: int) -> Node:
    """Select one entry as a 1x1 node"""
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[row, col] = g[0, 0]
        return (out,)

    return x.tape.record(x.value[row:row + 1, col:col + 1].copy(), (x,), vjp)


def sum_all(x: Node) -> Node:
    shape = x.shape
    return x.tape.record(np.array([[x.value.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(x: Node) -> Node:
    return scale(sum_all(x), 1.0 / x.value.size)


def smooth_hinge(x: Node, margin: float = 1.0, tau: float = 1.0) -> Node:
    """
    Quadratically smoothed hinge applied to margins

    0 for m >= margin, (margin - m)² / (2τ) inside the smoothing zone and
    margin - m - τ/2 below it. The function is C¹.
    """
    if tau <= 0:
        raise ParameterError(f"smoothing width must be positive, got {tau}")
    gap = margin - x.value
    quadratic = (gap > 0) & (gap < tau)
    linear = gap >= tau
    y = np.where(linear, gap - 0.5 * tau, np.where(quadratic, gap * gap / (2.0 * tau), 0.0))
    slope = np.where(linear, -1.0, np.where(quadratic, -gap / tau, 0.0))
    return x.tape.record(y, (x,), lambda g: (g * slope,))


# -- optimizer ---------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adam moments and hyperparameters for one parameter set"""
    lr: float = 2e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, Matrix] = field(default_factory=dict)
    second_moment: Dict[str, Matrix] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ParameterError(f"weight decay must be non-negative, got {self.weight_decay}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ParameterError(f"moment decay rates must be in [0, 1), got {self.beta1}, {self.beta2}")


def adam_step(params: Mapping[str, Matrix], grads: Mapping[str, Matrix], state: OptimizerState) -> Dict[str, Matrix]:
    """
    One Adam update with bias correction and decoupled weight decay

    Args:
        params: current parameters by name (not modified)
        grads: gradients by name; a missing entry counts as zero
        state: moments and hyperparameters, advanced in place

    Returns:
        New parameter dict
    """
    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    updated: Dict[str, Matrix] = {}

    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(value)
        elif grad.shape != value.shape:
            raise ShapeError(f"gradient for '{name}' does not match its parameter", grad.shape, value.shape)

        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        elif m.shape != value.shape:
            raise ShapeError(f"moment buffer for '{name}' does not match its parameter", m.shape, value.shape)

        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * (grad * grad)
        state.first_moment[name] = m
        state.second_moment[name] = v

        step = state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        new_value = value - step
        if state.weight_decay:
            new_value = new_value - state.lr * state.weight_decay * value
        updated[name] = new_value

    return updated


# -- gradient checking -------------------------------------------------------

def relative_error(analytic: Matrix, numeric: Matrix) -> float:
    """||a - n|| / max(||a||, ||n||), zero when both vanish"""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def numeric_gradient(loss_fn: Callable[[Dict[str, Matrix]], float], params: Mapping[str, Matrix],
                     name: str, h: float = 1e-6) -> Matrix:
    """Central finite differences of ``loss_fn`` with respect to one parameter"""
    base = {k: v.copy() for k, v in params.items()}
    target = base[name]
    grad = np.zeros_like(target)
    for index in np.ndindex(target.shape):
        original = target[index]
        target[index] = original + h
        plus = loss_fn(base)
        target[index] = original - h
        minus = loss_fn(base)
        target[index] = original
        grad[index] = (plus - minus) / (2.0 * h)
    return grad


def gradient_check(loss_fn: Callable[[Dict[str, Matrix]], float],
                   grad_fn: Callable[[Dict[str, Matrix]], Mapping[str, Matrix]],
                   params: Mapping[str, Matrix], h: float = 1e-6) -> Dict[str, float]:
    """
    Compare analytic and central-difference gradients for every parameter

    Args:
        loss_fn: maps a parameter dict to the scalar loss
        grad_fn: maps a parameter dict to analytic gradients by name
        params: parameters to check around
        h: finite-difference step

    Returns:
        Relative error per parameter name
    """
    analytic = grad_fn({k: v.copy() for k, v in params.items()})
    errors = {}
    for name in params:
        numeric = numeric_gradient(loss_fn, params, name, h)
        errors[name] = relative_error(analytic.get(name, np.zeros_like(numeric)), numeric)
        logger.debug(f"gradcheck {name}: rel err {errors[name]:.2e}")
    return errors
