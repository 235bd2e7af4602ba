"""Unified two-party joint training for VLR, VHNN and VSNN with a protection
hook on the transmitted cut-layer gradient and adversary-view logging of the
privacy vulnerability surfaces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datasets import VerticalDataset
from .errors import ConfigError, MetricError, ShapeError, TrainingError
from .numerics import RngStream, Tape, Node, as_tensor2, he_uniform, one_hot, sigmoid, softmax
from .protections import (NO_PROTECTION, PrecodeBottleneck, ProtectionBinding,
                          mixup_batch, protect_cut_gradient)

ALGORITHMS = ("vlr", "vhnn", "vsnn")


# ---------------------------------------------------------------------------
# Models


@dataclass
class FcLayer:
    weights: np.ndarray
    bias: np.ndarray | None
    activation: str  # "relu" or "identity"


class Mlp:
    """Stack of FC layers; hidden layers relu, output linear."""

    def __init__(self, layers: list[FcLayer]):
        self.layers = layers

    @staticmethod
    def make(rng: RngStream, in_dim: int, hidden: tuple[int, ...], out_dim: int,
             bias: bool = True) -> "Mlp":
        dims = [in_dim, *hidden, out_dim]
        layers = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            w = he_uniform(rng.child("w", i), d_in, (d_in, d_out))
            b = np.zeros((1, d_out)) if bias else None
            act = "relu" if i < len(dims) - 2 else "identity"
            layers.append(FcLayer(w, b, act))
        return Mlp(layers)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.weights)
            if layer.bias is not None:
                out.append(layer.bias)
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = x
        for layer in self.layers:
            h = h @ layer.weights
            if layer.bias is not None:
                h = h + layer.bias
            if layer.activation == "relu":
                h = np.maximum(h, 0.0)
        return h

    def build(self, tape: Tape, x: Node) -> tuple[Node, list[tuple[Node, np.ndarray]]]:
        """Record the forward pass; returns output node and (node, array) params."""
        params: list[tuple[Node, np.ndarray]] = []
        h = x
        for layer in self.layers:
            w = tape.leaf(layer.weights)
            params.append((w, layer.weights))
            h = tape.matmul(h, w)
            if layer.bias is not None:
                b = tape.leaf(layer.bias)
                params.append((b, layer.bias))
                h = tape.add_bias(h, b)
            if layer.activation == "relu":
                h = tape.relu(h)
        return h, params


@dataclass
class PartyState:
    """One party's models; the passive party never stores labels."""

    role: str  # "active" or "passive"
    bottom: Mlp | None = None
    top: Mlp | None = None
    head: str | None = None  # "sigmoid" or "softmax", active party only
    precode: PrecodeBottleneck | None = None


@dataclass
class Parties:
    algorithm: str
    active: PartyState
    passive: PartyState
    num_classes: int


# ---------------------------------------------------------------------------
# Configuration and logging


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 64
    learning_rate: float = 0.25
    optimizer: str = "sgd"  # or "sgd-momentum"
    momentum: float = 0.9
    seed: int = 0
    cut_dim: int = 8
    bottom_hidden: tuple[int, ...] = (16,)
    top_hidden: tuple[int, ...] = (8,)
    head: str = "auto"  # sigmoid | softmax | auto (softmax iff multiclass)
    protection: ProtectionBinding = NO_PROTECTION
    precode_beta: float = 1e-3
    record_cut_gradients: bool = True
    record_model_gradients: bool = False
    checkpoint_every: int = 0  # 0: final epoch only

    def resolve_head(self, algorithm: str, num_classes: int) -> str:
        if self.head != "auto":
            return self.head
        return "softmax" if num_classes > 2 else "sigmoid"


@dataclass
class CutLayerBatch:
    """Per-batch exchanged quantities, as observed by the respective adversary.

    d_b and grad_theta_b hold the protected values when a protection is
    active; plaintext originals never enter the log.
    """

    indices: np.ndarray
    u_b: np.ndarray
    d_b: np.ndarray | None = None
    grad_theta_b: np.ndarray | None = None
    theta_b: np.ndarray | None = None
    features_b: np.ndarray | None = None


@dataclass
class VulnerabilityLog:
    cut_batches: list[list[CutLayerBatch]] = field(default_factory=list)
    checkpoints: dict[int, list[np.ndarray]] = field(default_factory=dict)

    def epoch_count(self) -> int:
        return len(self.cut_batches)

    def final_checkpoint(self) -> list[np.ndarray]:
        return self.checkpoints[max(self.checkpoints)]


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)


class _Sgd:
    def __init__(self, lr: float, momentum: float | None):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[int, np.ndarray] = {}

    def step(self, param: np.ndarray, grad: np.ndarray) -> None:
        if self.momentum is None:
            param -= self.lr * grad
            return
        v = self.velocity.get(id(param))
        if v is None:
            v = np.zeros_like(param)
            self.velocity[id(param)] = v
        v *= self.momentum
        v += grad
        param -= self.lr * v


# ---------------------------------------------------------------------------
# Initialization


def init_parties(algorithm: str, data: VerticalDataset, cfg: TrainConfig,
                 rng: RngStream) -> Parties:
    dims_a = data.features_a.shape[1]
    dims_b = data.features_b.shape[1]
    head = cfg.resolve_head(algorithm, data.num_classes)
    if head not in ("sigmoid", "softmax"):
        raise ConfigError(f"unknown head {head!r}")
    if head == "sigmoid" and data.num_classes != 2:
        raise ConfigError("sigmoid head requires a binary task")
    out_dim = 1 if head == "sigmoid" else data.num_classes

    if algorithm == "vlr":
        if dims_a == 0:
            raise ConfigError("vlr: party A must hold features")
        # single bias-free FC per party so grad(theta_b) == x_b^T d_b exactly
        bottom_a = Mlp.make(rng.child("A"), dims_a, (), out_dim, bias=False)
        bottom_b = Mlp.make(rng.child("B"), dims_b, (), out_dim, bias=False)
        active = PartyState("active", bottom=bottom_a, top=None, head=head)
        passive = PartyState("passive", bottom=bottom_b)
    elif algorithm == "vhnn":
        if dims_a == 0:
            raise ConfigError("vhnn: party A must hold features")
        bottom_a = Mlp.make(rng.child("A"), dims_a, cfg.bottom_hidden, cfg.cut_dim)
        bottom_b = Mlp.make(rng.child("B"), dims_b, cfg.bottom_hidden, cfg.cut_dim)
        top = Mlp.make(rng.child("top"), 2 * cfg.cut_dim, cfg.top_hidden, out_dim)
        active = PartyState("active", bottom=bottom_a, top=top, head=head)
        passive = PartyState("passive", bottom=bottom_b)
    elif algorithm == "vsnn":
        if dims_a != 0:
            raise ConfigError("vsnn: party A features must have zero columns")
        bottom_b = Mlp.make(rng.child("B"), dims_b, cfg.bottom_hidden, cfg.cut_dim)
        top = Mlp.make(rng.child("top"), cfg.cut_dim, cfg.top_hidden, out_dim)
        active = PartyState("active", bottom=None, top=top, head=head)
        passive = PartyState("passive", bottom=bottom_b)
    else:
        raise ConfigError(f"unknown algorithm {algorithm!r}")

    if cfg.protection.kind == "precode":
        passive.precode = PrecodeBottleneck(cfg.cut_dim if algorithm != "vlr" else out_dim,
                                            rng.child("precode"))
    return Parties(algorithm, active, passive, data.num_classes)


# ---------------------------------------------------------------------------
# Training


def _validate(algorithm: str, data: VerticalDataset, cfg: TrainConfig) -> None:
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algorithm!r}")
    if cfg.batch_size < 1 or cfg.batch_size > data.n:
        raise ConfigError(f"batch_size {cfg.batch_size} outside [1, {data.n}]")
    if cfg.learning_rate < 0:
        raise ConfigError("learning_rate must be >= 0")
    if cfg.epochs < 1:
        raise ConfigError("epochs must be >= 1")
    if cfg.optimizer not in ("sgd", "sgd-momentum"):
        raise ConfigError(f"unknown optimizer {cfg.optimizer!r}")
    p = cfg.protection
    if p.kind == "marvell" and data.num_classes != 2:
        raise ConfigError("marvell supports binary classification only")
    if p.kind == "mixup" and int(p.strength) > cfg.batch_size:
        raise ConfigError("mixup sample count exceeds batch size")


def train_joint(algorithm: str, data: VerticalDataset, cfg: TrainConfig
                ) -> tuple[Parties, VulnerabilityLog, TrainHistory]:
    """Run the six-step batch procedure for cfg.epochs; returns the trained
    parties, the adversary-view vulnerability log, and the loss history."""
    _validate(algorithm, data, cfg)
    root = RngStream(cfg.seed, ("train", algorithm))
    parties = init_parties(algorithm, data, cfg, root.child("init"))
    head = parties.active.head
    binding = cfg.protection

    n = data.n
    y_all = one_hot(data.labels, data.num_classes) if head == "softmax" \
        else data.labels.reshape(-1, 1).astype(np.float64)

    opt = _Sgd(cfg.learning_rate,
               cfg.momentum if cfg.optimizer == "sgd-momentum" else None)
    log = VulnerabilityLog()
    history = TrainHistory()
    record_theta = cfg.record_model_gradients

    for epoch in range(cfg.epochs):
        perm = root.child("shuffle", epoch).gen.permutation(n)
        epoch_batches: list[CutLayerBatch] = []
        epoch_loss = 0.0
        n_batches = 0

        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            x_a = data.features_a[idx]
            x_b = data.features_b[idx]
            y = y_all[idx]
            labels_batch = data.labels[idx]

            if binding.kind == "mixup":
                soft = one_hot(labels_batch, data.num_classes) if head == "softmax" else y
                x_a, x_b, y = mixup_batch(x_a, x_b, soft, int(binding.strength),
                                          root.child("mixup", epoch, bi))

            # 1: passive forward on its own tape (protection hook splits the graph)
            tape_b = Tape()
            xb_node = tape_b.leaf(x_b)
            ub_node, params_b = parties.passive.bottom.build(tape_b, xb_node)
            kl_node = None
            if parties.passive.precode is not None:
                pc = parties.passive.precode
                pc_params = [tape_b.leaf(p) for p in pc.parameters()]
                zeta = root.child("precode", epoch, bi).gen.standard_normal(
                    (x_b.shape[0], pc.latent))
                ub_node, kl_node = pc.apply(tape_b, ub_node, zeta, pc_params)
                params_b = params_b + [(node, arr) for node, arr
                                       in zip(pc_params, pc.parameters())]
            u_b = ub_node.value

            # 2-3: transmit u^B; active aggregates, runs its top model, takes the loss
            tape_a = Tape()
            ub_leaf = tape_a.leaf(u_b)
            params_a: list[tuple[Node, np.ndarray]] = []
            if parties.active.bottom is not None:
                xa_node = tape_a.leaf(x_a)
                ua_node, params_a = parties.active.bottom.build(tape_a, xa_node)
                z = tape_a.add(ua_node, ub_leaf) if algorithm == "vlr" \
                    else tape_a.concat_cols(ua_node, ub_leaf)
            else:
                z = ub_leaf
            if parties.active.top is not None:
                logits, params_top = parties.active.top.build(tape_a, z)
                params_a = params_a + params_top
            else:
                logits = z
            loss = tape_a.softmax_cross_entropy(logits, y) if head == "softmax" \
                else tape_a.sigmoid_cross_entropy(logits, y)
            loss_value = float(loss.value)
            if not np.isfinite(loss_value):
                raise TrainingError(f"loss diverged at epoch {epoch}, batch {bi}")
            epoch_loss += loss_value
            n_batches += 1

            # 4: one backward pass on the active side yields phi/theta_a grads and d^B
            grads_a = tape_a.backward([(loss, 1.0)])
            d_b = grads_a[ub_leaf]

            # 5: protection applied to d^B before it crosses the cut
            d_b_sent = protect_cut_gradient(
                d_b, binding,
                labels_batch if binding.kind == "marvell" else None,
                root.child("protect", epoch, bi))

            # 6: passive party backpropagates the received gradient locally
            roots: list = [(ub_node, d_b_sent)]
            if kl_node is not None:
                roots.append((kl_node, cfg.precode_beta))
            grads_b = tape_b.backward(roots)

            theta_b_before = parties.passive.bottom.layers[0].weights.copy() \
                if record_theta else None
            grad_theta_b = None
            if record_theta:
                first_w_node = params_b[0][0]
                grad_theta_b = grads_b[first_w_node].copy()

            for node, arr in params_a:
                opt.step(arr, grads_a[node])
            for node, arr in params_b:
                if node in grads_b:
                    opt.step(arr, grads_b[node])

            if cfg.record_cut_gradients or record_theta:
                epoch_batches.append(CutLayerBatch(
                    indices=idx.copy(),
                    u_b=u_b.copy(),
                    d_b=d_b_sent.copy() if cfg.record_cut_gradients else None,
                    grad_theta_b=grad_theta_b,
                    theta_b=theta_b_before,
                    features_b=x_b.copy() if record_theta else None,
                ))

        log.cut_batches.append(epoch_batches)
        history.losses.append(epoch_loss / max(n_batches, 1))
        params = parties.passive.bottom.parameters()
        if not np.all([np.all(np.isfinite(p)) for p in params]):
            raise TrainingError(f"passive parameters diverged after epoch {epoch}")
        last = epoch == cfg.epochs - 1
        if last or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0):
            log.checkpoints[epoch] = [p.copy() for p in params]

    return parties, log, history


# ---------------------------------------------------------------------------
# Inference and utility


def _passive_forward(parties: Parties, features_b: np.ndarray,
                     sample_seed: int = 0) -> np.ndarray:
    u_b = parties.passive.bottom.forward(features_b)
    if parties.passive.precode is not None:
        # the bottleneck keeps sampling at inference: that stochastic channel
        # is the protection of the transmitted u^B; seeded for determinism
        pc = parties.passive.precode
        zeta = RngStream(sample_seed, ("precode-inference",)).gen.standard_normal(
            (u_b.shape[0], pc.latent))
        u_b, _ = pc.forward(u_b, zeta=zeta)
    return u_b


def inference_forward(parties: Parties, features_b: np.ndarray,
                      features_a: np.ndarray | None = None
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Inference-time pass; returns (u^B as transmitted, predicted probabilities)."""
    features_b = as_tensor2(features_b, "features_b")
    u_b = _passive_forward(parties, features_b)
    if parties.active.bottom is not None:
        if features_a is None:
            raise ShapeError("this algorithm needs party-A features at inference")
        u_a = parties.active.bottom.forward(as_tensor2(features_a, "features_a"))
        z = u_a + u_b if parties.algorithm == "vlr" \
            else np.concatenate([u_a, u_b], axis=1)
    else:
        z = u_b
    logits = parties.active.top.forward(z) if parties.active.top is not None else z
    probs = softmax(logits) if parties.active.head == "softmax" else sigmoid(logits)
    return u_b, probs


def positive_scores(probs: np.ndarray) -> np.ndarray:
    """Scalar per-row score for binary metrics (positive-class probability)."""
    return probs[:, -1]


def evaluate_utility(parties: Parties, data: VerticalDataset,
                     metric: str = "auto") -> float:
    """AUC (percent) for binary tasks, accuracy (percent) for multiclass."""
    from .evaluation import auc  # local import to avoid a cycle

    if metric == "auto":
        metric = "auc" if data.num_classes == 2 else "acc"
    if metric not in ("auc", "acc"):
        raise ConfigError(f"unknown metric {metric!r}")
    if metric == "auc" and data.num_classes != 2:
        raise ConfigError("AUC requires a binary task")
    features_a = data.features_a if parties.active.bottom is not None else None
    _, probs = inference_forward(parties, data.features_b, features_a)
    if metric == "auc":
        return auc(positive_scores(probs), data.labels)
    if probs.shape[1] == 1:
        predictions = (probs[:, 0] >= 0.5).astype(np.int64)
    else:
        predictions = probs.argmax(axis=1)
    return 100.0 * float(np.mean(predictions == data.labels))
