"""Deterministic dense numerics: seeded random streams, checked tensor ops,
and a minimal reverse-mode tape sufficient for fully-connected networks with
sigmoid/softmax heads and cross-entropy loss.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

PROB_FLOOR = 1e-12  # clamp inside log so saturated predictions stay finite


# ---------------------------------------------------------------------------
# Random streams


class RngStream:
    """Counter-based (Philox) random stream with deterministic splitting.

    A stream is identified by a 64-bit root seed plus a path of labels.
    ``child(*labels)`` derives an independent stream; equal (seed, path)
    always produce the identical draw sequence, on any platform.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen: np.random.Generator | None = None

    def child(self, *labels) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(labels))

    @property
    def gen(self) -> np.random.Generator:
        if self._gen is None:
            h = hashlib.blake2b(digest_size=16)
            h.update(str(self.seed).encode())
            for label in self.path:
                h.update(b"/")
                h.update(str(label).encode())
            key = np.frombuffer(h.digest(), dtype=np.uint64)
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path})"


# ---------------------------------------------------------------------------
# Checked tensor helpers


def as_tensor2(x, name: str = "tensor") -> np.ndarray:
    """Coerce to a finite 2-D float64 C-order array or raise ShapeError."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name}: contains non-finite entries")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_tensor2(a, "a")
    b = as_tensor2(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ ({a.shape} x {b.shape})")
    return a @ b


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda z: z,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
}


def forward_fc(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None,
               activation: str = "identity") -> np.ndarray:
    """One fully-connected layer: activation(x @ weights + bias)."""
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    z = matmul(x, weights)
    if bias is not None:
        bias = as_tensor2(bias, "bias")
        if bias.shape != (1, weights.shape[1]):
            raise ShapeError(f"bias shape {bias.shape} != (1, {weights.shape[1]})")
        z = z + bias
    return ACTIVATIONS[activation](z)


def cross_entropy(pred_probs: np.ndarray, labels_onehot: np.ndarray) -> float:
    """Mean over the batch of -log p[true class], clamped at PROB_FLOOR."""
    p = as_tensor2(pred_probs, "pred_probs")
    y = as_tensor2(labels_onehot, "labels")
    if p.shape != y.shape:
        raise ShapeError(f"cross_entropy: shapes differ {p.shape} vs {y.shape}")
    return float(-np.sum(y * np.log(np.maximum(p, PROB_FLOOR))) / p.shape[0])


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ConfigError("labels outside [0, num_classes)")
    out = np.zeros((labels.shape[0], num_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def he_uniform(rng: RngStream, fan_in: int, shape: tuple[int, int]) -> np.ndarray:
    limit = np.sqrt(6.0 / max(fan_in, 1))
    return rng.gen.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# Reverse-mode tape
#
# A Node caches its forward value plus, per input, a vector-Jacobian-product
# closure.  Nodes are appended in creation order, which is a topological
# order, so backward() is a single reverse sweep visiting each node once.


class Node:
    __slots__ = ("value", "parents", "index")

    def __init__(self, value: np.ndarray, parents, index: int):
        self.value = value
        self.parents = parents  # tuple of (Node, vjp) pairs
        self.index = index


class Tape:
    """Computation graph rebuilt per batch; supports multi-root backward."""

    def __init__(self):
        self._nodes: list[Node] = []

    def _record(self, value, parents=()) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), tuple(parents), len(self._nodes))
        self._nodes.append(node)
        return node

    # -- leaves

    def leaf(self, value) -> Node:
        return self._record(value)

    # -- ops

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.shape[1] != b.value.shape[0]:
            raise ShapeError(f"matmul: inner dims differ ({a.value.shape} x {b.value.shape})")
        av, bv = a.value, b.value
        return self._record(av @ bv, [
            (a, lambda g: g @ bv.T),
            (b, lambda g: av.T @ g),
        ])

    def add(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ShapeError(f"add: shapes differ {a.value.shape} vs {b.value.shape}")
        return self._record(a.value + b.value, [(a, lambda g: g), (b, lambda g: g)])

    def sub(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ShapeError(f"sub: shapes differ {a.value.shape} vs {b.value.shape}")
        return self._record(a.value - b.value, [(a, lambda g: g), (b, lambda g: -g)])

    def add_bias(self, x: Node, bias: Node) -> Node:
        if bias.value.shape != (1, x.value.shape[1]):
            raise ShapeError(f"bias shape {bias.value.shape} != (1, {x.value.shape[1]})")
        return self._record(x.value + bias.value, [
            (x, lambda g: g),
            (bias, lambda g: g.sum(axis=0, keepdims=True)),
        ])

    def concat_cols(self, a: Node, b: Node) -> Node:
        if a.value.shape[0] != b.value.shape[0]:
            raise ShapeError("concat_cols: row counts differ")
        na = a.value.shape[1]
        return self._record(np.concatenate([a.value, b.value], axis=1), [
            (a, lambda g: g[:, :na]),
            (b, lambda g: g[:, na:]),
        ])

    def scale(self, x: Node, c: float) -> Node:
        return self._record(x.value * c, [(x, lambda g: g * c)])

    def slice_cols(self, x: Node, start: int, stop: int) -> Node:
        width = x.value.shape[1]

        def vjp(g):
            out = np.zeros((g.shape[0], width))
            out[:, start:stop] = g
            return out

        return self._record(x.value[:, start:stop], [(x, vjp)])

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        # np.maximum (not where) so NaN propagates instead of silently gating to 0
        return self._record(np.maximum(x.value, 0.0), [(x, lambda g: g * mask)])

    def sigmoid(self, x: Node) -> Node:
        s = sigmoid(x.value)
        return self._record(s, [(x, lambda g: g * s * (1.0 - s))])

    def softmax(self, x: Node) -> Node:
        p = softmax(x.value)

        def vjp(g):
            return p * (g - np.sum(g * p, axis=1, keepdims=True))

        return self._record(p, [(x, vjp)])

    def sum_all(self, x: Node) -> Node:
        shape = x.value.shape
        return self._record(x.value.sum(), [(x, lambda g: np.full(shape, g))])

    def frobenius_sq(self, x: Node) -> Node:
        xv = x.value
        return self._record(np.sum(xv * xv), [(x, lambda g: 2.0 * g * xv)])

    def cross_entropy(self, pred_probs: Node, labels_onehot: np.ndarray) -> Node:
        y = np.asarray(labels_onehot, dtype=np.float64)
        p = pred_probs.value
        if p.shape != y.shape:
            raise ShapeError(f"cross_entropy: shapes differ {p.shape} vs {y.shape}")
        b = p.shape[0]
        clamped = np.maximum(p, PROB_FLOOR)
        value = -np.sum(y * np.log(clamped)) / b
        return self._record(value, [(pred_probs, lambda g: g * (-y / clamped) / b)])

    def softmax_cross_entropy(self, logits: Node, labels_onehot: np.ndarray) -> Node:
        """Fused head: value is mean CE, gradient is exactly (p - y)/b."""
        y = np.asarray(labels_onehot, dtype=np.float64)
        if logits.value.shape != y.shape:
            raise ShapeError(f"softmax_cross_entropy: shapes differ {logits.value.shape} vs {y.shape}")
        p = softmax(logits.value)
        b = p.shape[0]
        value = -np.sum(y * np.log(np.maximum(p, PROB_FLOOR))) / b
        return self._record(value, [(logits, lambda g: g * (p - y) / b)])

    def sigmoid_cross_entropy(self, logits: Node, targets: np.ndarray) -> Node:
        """Fused binary head on a single-column logit; gradient (p - y)/b."""
        y = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
        if logits.value.shape != y.shape:
            raise ShapeError(f"sigmoid_cross_entropy: shapes differ {logits.value.shape} vs {y.shape}")
        p = sigmoid(logits.value)
        b = p.shape[0]
        value = float(-np.sum(y * np.log(np.maximum(p, PROB_FLOOR))
                              + (1.0 - y) * np.log(np.maximum(1.0 - p, PROB_FLOOR))) / b)
        return self._record(value, [(logits, lambda g: g * (p - y) / b)])

    def gauss_reparam(self, mu: Node, log_sigma: Node, zeta: np.ndarray) -> Node:
        """o = mu + exp(log_sigma) * zeta with zeta a fixed standard-normal draw."""
        if mu.value.shape != log_sigma.value.shape:
            raise ShapeError("gauss_reparam: mu/log_sigma shapes differ")
        s = np.exp(log_sigma.value)
        z = np.asarray(zeta, dtype=np.float64)
        return self._record(mu.value + s * z, [
            (mu, lambda g: g),
            (log_sigma, lambda g: g * s * z),
        ])

    def gaussian_kl(self, mu: Node, log_sigma: Node) -> Node:
        """Batch-mean KL(N(mu, sigma) || N(0, 1)), summed over units."""
        if mu.value.shape != log_sigma.value.shape:
            raise ShapeError("gaussian_kl: mu/log_sigma shapes differ")
        b = mu.value.shape[0]
        var = np.exp(2.0 * log_sigma.value)
        value = 0.5 * np.sum(mu.value ** 2 + var - 1.0 - 2.0 * log_sigma.value) / b
        return self._record(value, [
            (mu, lambda g: g * mu.value / b),
            (log_sigma, lambda g: g * (var - 1.0) / b),
        ])

    # -- backward

    def backward(self, roots: Sequence[tuple[Node, float | np.ndarray] | Node]) -> dict[Node, np.ndarray]:
        """Reverse sweep from one or more seeded roots.

        A root given without a seed must be scalar (seed 1.0); an array seed
        must match the root's shape.  Returns a dict node -> gradient for
        every node reached by the sweep.
        """
        grads: dict[int, np.ndarray] = {}
        for item in roots:
            node, seed = item if isinstance(item, tuple) else (item, 1.0)
            if np.isscalar(seed) or np.asarray(seed).ndim == 0:
                if node.value.ndim != 0 and node.value.size != 1:
                    raise ContractError("scalar seed on a non-scalar root node")
                seed_arr = np.asarray(seed, dtype=np.float64).reshape(node.value.shape)
            else:
                seed_arr = np.asarray(seed, dtype=np.float64)
                if seed_arr.shape != node.value.shape:
                    raise ShapeError(f"seed shape {seed_arr.shape} != root shape {node.value.shape}")
            grads[node.index] = grads.get(node.index, 0.0) + seed_arr

        by_node: dict[Node, np.ndarray] = {}
        for node in reversed(self._nodes):
            g = grads.pop(node.index, None)
            if g is None:
                continue
            by_node[node] = g
            for parent, vjp in node.parents:
                contribution = vjp(g)
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + contribution
                else:
                    grads[parent.index] = contribution
        return by_node
