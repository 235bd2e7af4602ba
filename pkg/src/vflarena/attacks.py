"""The seven evaluated privacy attacks.  Each consumes logged vulnerability
surfaces or trained models and returns per-sample scores, predictions, or
reconstructions; ground-truth labels never enter except through the declared
auxiliary samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import CutLayerBatch, Mlp, PartyState
from .errors import ConfigError, ShapeError, TrainingError
from .numerics import RngStream, Tape, as_tensor2, sigmoid, softmax

UNDECIDED = -1


@dataclass
class LabelScoreSet:
    """Scores (higher = more likely positive) or hard predictions per sample."""

    indices: np.ndarray
    scores: np.ndarray | None = None
    predictions: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class Reconstruction:
    tensors: dict[str, np.ndarray]
    objective_trace: list[float] = field(default_factory=list)
    converged: bool = True
    flags: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Sign / norm / direction attacks on the cut-layer gradient


def direct_label_inference(epoch_batches: list[CutLayerBatch]) -> LabelScoreSet:
    """Predict the class at the (most) negative entry of each d^B row.

    Rows without any negative entry are marked undecided (prediction -1,
    binary score 0.5).  Valid in the softmax-over-aggregate regime where the
    true-class entry is the only negative one.
    """
    indices, predictions, slices = [], [], []
    pos = 0
    for batch in epoch_batches:
        d = batch.d_b
        pred = np.where(d.min(axis=1) < 0, d.argmin(axis=1), UNDECIDED)
        indices.append(batch.indices)
        predictions.append(pred)
        slices.append((pos, pos + d.shape[0]))
        pos += d.shape[0]
    predictions = np.concatenate(predictions)
    width = epoch_batches[0].d_b.shape[1] if epoch_batches else 0
    scores = None
    if width <= 2:  # binary regime: positive-class prediction as a score
        scores = np.where(predictions == UNDECIDED, 0.5,
                          (predictions == width - 1).astype(np.float64))
    return LabelScoreSet(np.concatenate(indices), scores=scores,
                         predictions=predictions,
                         meta={"batch_slices": slices,
                               "undecided": int(np.sum(predictions == UNDECIDED))})


def norm_scoring(epoch_batches: list[CutLayerBatch]) -> LabelScoreSet:
    """Score each sample by the 2-norm of its cut-layer gradient row."""
    indices = np.concatenate([b.indices for b in epoch_batches])
    scores = np.concatenate([np.linalg.norm(b.d_b, axis=1) for b in epoch_batches])
    return LabelScoreSet(indices, scores=scores)


def direction_scoring(epoch_batches: list[CutLayerBatch],
                      known_positive_rows: list[int | None]) -> LabelScoreSet:
    """Score by cosine similarity to each batch's known positive gradient.

    known_positive_rows holds, per batch, the row position of the oracle
    positive sample (None when the batch has none; such batches are skipped
    and counted).
    """
    if len(known_positive_rows) != len(epoch_batches):
        raise ShapeError("one known-positive row per batch required")
    indices, scores = [], []
    skipped = 0
    for batch, row in zip(epoch_batches, known_positive_rows):
        if row is None:
            skipped += 1
            continue
        d = batch.d_b
        d_pos = d[row]
        denom = np.linalg.norm(d, axis=1) * np.linalg.norm(d_pos)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = np.where(denom > 0, d @ d_pos / denom, 0.0)
        indices.append(batch.indices)
        scores.append(cos)
    if not indices:
        raise ConfigError("direction_scoring: no batch carried a known positive")
    return LabelScoreSet(np.concatenate(indices), scores=np.concatenate(scores),
                         meta={"skipped_batches": skipped})


# ---------------------------------------------------------------------------
# Residue reconstruction (VLR, from the batch-averaged model gradient)


def residue_reconstruct(x_b: np.ndarray, grad_theta_b: np.ndarray,
                        ridge: float = 1e-8) -> tuple[Reconstruction, LabelScoreSet]:
    """Recover d^B from grad_theta_b = x_b^T d^B by ridge-stabilized normal
    equations; exact when the features >= batch rank condition holds."""
    x = as_tensor2(x_b, "x_b")
    g = as_tensor2(grad_theta_b, "grad_theta_b")
    if x.shape[1] != g.shape[0]:
        raise ShapeError(f"x_b {x.shape} does not transpose onto grad {g.shape}")
    b = x.shape[0]
    gram = x @ x.T + ridge * np.eye(b)
    d_tilde = np.linalg.solve(gram, x @ g)
    full_rank = bool(np.linalg.matrix_rank(x) == b)
    residual = float(np.linalg.norm(x.T @ d_tilde - g))
    recon = Reconstruction({"d_b": d_tilde}, objective_trace=[residual],
                           flags={"full_rank": full_rank})
    # binary residual at the positive-class column is negative for positives
    scores = -d_tilde[:, -1]
    return recon, LabelScoreSet(np.arange(b), scores=scores)


def residue_attack_epoch(epoch_batches: list[CutLayerBatch]) -> LabelScoreSet:
    indices, scores, ranks = [], [], []
    for batch in epoch_batches:
        if batch.grad_theta_b is None or batch.features_b is None:
            raise ConfigError("residue attack needs logged model gradients")
        recon, score_set = residue_reconstruct(batch.features_b, batch.grad_theta_b)
        indices.append(batch.indices)
        scores.append(score_set.scores)
        ranks.append(recon.flags["full_rank"])
    return LabelScoreSet(np.concatenate(indices), scores=np.concatenate(scores),
                         meta={"full_rank_batches": int(np.sum(ranks))})


# ---------------------------------------------------------------------------
# Gradient inversion (VLR, label recovery from the model gradient)


def gradient_inversion(x_b: np.ndarray, theta_b: np.ndarray,
                       grad_theta_b: np.ndarray, num_classes: int,
                       steps: int = 200, lr: float = 2.0,
                       rng: RngStream | None = None,
                       converge_tol: float = 1e-6
                       ) -> tuple[Reconstruction, LabelScoreSet]:
    """Jointly optimize soft labels and the unseen party-A output to match the
    observed model gradient in L2; labels are parameterized by logits so the
    objective stays differentiable."""
    x = as_tensor2(x_b, "x_b")
    theta = as_tensor2(theta_b, "theta_b")
    target = as_tensor2(grad_theta_b, "grad_theta_b")
    b = x.shape[0]
    m = theta.shape[1]
    if m != num_classes:
        raise ShapeError(f"theta_b width {m} != num_classes {num_classes}")
    if target.shape != theta.shape:
        raise ShapeError("grad_theta_b shape differs from theta_b")

    gen = (rng or RngStream(0, ("gi",))).gen
    label_logits = 0.01 * gen.standard_normal((b, m))
    u_a = 0.01 * gen.standard_normal((b, m))
    u_local = x @ theta  # the adversary's own forward output, fixed

    def objective_and_grads(ll, ua):
        tape = Tape()
        ll_node, ua_node = tape.leaf(ll), tape.leaf(ua)
        p = tape.softmax(tape.add(tape.leaf(u_local), ua_node))
        y_tilde = tape.softmax(ll_node)
        diff = tape.sub(p, y_tilde)
        pred_grad = tape.scale(tape.matmul(tape.leaf(x.T), diff), 1.0 / b)
        obj = tape.frobenius_sq(tape.sub(pred_grad, tape.leaf(target)))
        grads = tape.backward([(obj, 1.0)])
        return float(obj.value), grads[ll_node], grads[ua_node]

    trace = []
    obj, g_ll, g_ua = objective_and_grads(label_logits, u_a)
    trace.append(obj)
    step = lr
    for _ in range(steps):
        cand_ll = label_logits - step * g_ll
        cand_ua = u_a - step * g_ua
        cand_obj, cand_gll, cand_gua = objective_and_grads(cand_ll, cand_ua)
        if cand_obj <= obj:
            label_logits, u_a = cand_ll, cand_ua
            obj, g_ll, g_ua = cand_obj, cand_gll, cand_gua
            trace.append(obj)
            step = min(step * 1.1, lr * 10)
        else:
            step *= 0.5
            if step < 1e-12:
                break

    probs = softmax(label_logits)
    scale = float(np.sum(target * target))
    converged = obj <= converge_tol * max(scale, 1e-30)
    recon = Reconstruction({"label_probs": probs, "u_a": u_a},
                           objective_trace=trace, converged=converged)
    return recon, LabelScoreSet(np.arange(b), scores=probs[:, -1],
                                predictions=probs.argmax(axis=1))


def gradient_inversion_epoch(epoch_batches: list[CutLayerBatch], num_classes: int,
                             steps: int = 200, lr: float = 2.0,
                             rng: RngStream | None = None,
                             max_batches: int | None = None) -> LabelScoreSet:
    indices, scores = [], []
    batches = epoch_batches[:max_batches] if max_batches else epoch_batches
    for bi, batch in enumerate(batches):
        if batch.grad_theta_b is None or batch.theta_b is None:
            raise ConfigError("gradient inversion needs logged model gradients")
        sub_rng = rng.child(bi) if rng is not None else None
        _, score_set = gradient_inversion(batch.features_b, batch.theta_b,
                                          batch.grad_theta_b, num_classes,
                                          steps=steps, lr=lr, rng=sub_rng)
        indices.append(batch.indices)
        scores.append(score_set.scores)
    return LabelScoreSet(np.concatenate(indices), scores=np.concatenate(scores))


# ---------------------------------------------------------------------------
# Model completion (passive party extends its trained bottom model)


@dataclass
class CompletionResult:
    probs_mc: np.ndarray
    probs_loc: np.ndarray
    meta: dict = field(default_factory=dict)


def _link(logits: np.ndarray) -> np.ndarray:
    return sigmoid(logits) if logits.shape[1] == 1 else softmax(logits)


def _fit_head_on_features(features: np.ndarray, labels: np.ndarray, head: Mlp,
                          num_classes: int, epochs: int, lr: float) -> None:
    y = labels.reshape(-1, 1).astype(np.float64) if head.layers[-1].weights.shape[1] == 1 \
        else np.eye(num_classes)[labels]
    for _ in range(epochs):
        tape = Tape()
        out, params = head.build(tape, tape.leaf(features))
        loss = tape.sigmoid_cross_entropy(out, y) if y.shape[1] == 1 \
            else tape.softmax_cross_entropy(out, y)
        grads = tape.backward([(loss, 1.0)])
        for node, arr in params:
            if node in grads:
                arr -= lr * grads[node]


def _fit_end_to_end(models: list[Mlp], x: np.ndarray, labels: np.ndarray,
                    num_classes: int, epochs: int, lr: float) -> None:
    out_dim = models[-1].layers[-1].weights.shape[1]
    y = labels.reshape(-1, 1).astype(np.float64) if out_dim == 1 \
        else np.eye(num_classes)[labels]
    for _ in range(epochs):
        tape = Tape()
        h = tape.leaf(x)
        all_params = []
        for model in models:
            h, params = model.build(tape, h)
            all_params.extend(params)
        loss = tape.sigmoid_cross_entropy(h, y) if y.shape[1] == 1 \
            else tape.softmax_cross_entropy(h, y)
        grads = tape.backward([(loss, 1.0)])
        for node, arr in all_params:
            if node in grads:
                arr -= lr * grads[node]


def clone_architecture(bottom: Mlp, rng: RngStream) -> Mlp:
    dims = [bottom.layers[0].weights.shape[0]] + \
        [layer.weights.shape[1] for layer in bottom.layers]
    has_bias = bottom.layers[0].bias is not None
    return Mlp.make(rng, dims[0], tuple(dims[1:-1]), dims[-1], bias=has_bias)


def bottom_from_checkpoint(bottom: Mlp, params: list[np.ndarray]) -> Mlp:
    clone = clone_architecture(bottom, RngStream(0, ("unused",)))
    own = clone.parameters()
    if len(own) != len(params):
        raise ShapeError("checkpoint does not match the bottom architecture")
    for dst, src in zip(own, params):
        dst[...] = src
    return clone


def model_completion(algorithm: str, bottom: Mlp, aux_features_b: np.ndarray,
                     aux_labels: np.ndarray, inference_features_b: np.ndarray,
                     num_classes: int, rng: RngStream,
                     epochs: int = 200, lr: float = 0.05) -> CompletionResult:
    """Complete the trained bottom model into a label predictor and compare it
    with the prior-knowledge baseline trained on the auxiliary data alone.

    VLR: the bottom output is already a class logit, so the head is just the
    link function.  VNN: a fresh linear head is trained on frozen bottom
    features (fixed budget).  The local baseline trains the same architecture
    end-to-end on the auxiliary set with the same budget.
    """
    aux_x = as_tensor2(aux_features_b, "aux_features_b")
    inf_x = as_tensor2(inference_features_b, "inference_features_b")
    labels = np.asarray(aux_labels, dtype=np.int64)
    present = np.unique(labels)
    if len(present) < num_classes:
        raise ConfigError("auxiliary sample is missing a class")

    out_dim = 1 if num_classes == 2 else num_classes
    if algorithm == "vlr":
        # the bottom output is the class logit itself: no extra training
        probs_mc = _link(bottom.forward(inf_x))
        loc = clone_architecture(bottom, rng.child("loc"))
        _fit_end_to_end([loc], aux_x, labels, num_classes, epochs, lr)
        probs_loc = _link(loc.forward(inf_x))
        return CompletionResult(probs_mc, probs_loc, meta={"head": "direct"})

    cut = bottom.layers[-1].weights.shape[1]
    head = Mlp.make(rng.child("head"), cut, (), out_dim)
    _fit_head_on_features(bottom.forward(aux_x), labels, head, num_classes, epochs, lr)
    probs_mc = _link(head.forward(bottom.forward(inf_x)))

    loc_bottom = clone_architecture(bottom, rng.child("loc_bottom"))
    loc_head = Mlp.make(rng.child("loc_head"), cut, (), out_dim)
    _fit_end_to_end([loc_bottom, loc_head], aux_x, labels, num_classes, epochs, lr)
    probs_loc = _link(loc_head.forward(loc_bottom.forward(inf_x)))
    return CompletionResult(probs_mc, probs_loc, meta={"head": "trained"})


# ---------------------------------------------------------------------------
# Model inversion (active party reconstructs passive features)


def _train_shadow(active: PartyState, algorithm: str, shadow: Mlp,
                  aux_xa: np.ndarray, aux_xb: np.ndarray, aux_labels: np.ndarray,
                  num_classes: int, epochs: int, lr: float) -> None:
    head = active.head
    out_dim = 1 if head == "sigmoid" else num_classes
    y = aux_labels.reshape(-1, 1).astype(np.float64) if out_dim == 1 \
        else np.eye(num_classes)[aux_labels]
    u_a = active.bottom.forward(aux_xa) if active.bottom is not None else None
    for epoch in range(epochs):
        tape = Tape()
        u_b, params = shadow.build(tape, tape.leaf(aux_xb))
        if u_a is not None:
            z = tape.add(tape.leaf(u_a), u_b) if algorithm == "vlr" \
                else tape.concat_cols(tape.leaf(u_a), u_b)
        else:
            z = u_b
        logits = z
        if active.top is not None:
            logits, _ = active.top.build(tape, z)  # frozen: grads unused
        loss = tape.sigmoid_cross_entropy(logits, y) if out_dim == 1 \
            else tape.softmax_cross_entropy(logits, y)
        if not np.isfinite(float(loss.value)):
            raise TrainingError(f"shadow training diverged at epoch {epoch}")
        grads = tape.backward([(loss, 1.0)])
        for node, arr in params:
            if node in grads:
                arr -= lr * grads[node]


def known_model_inversion(bottom: Mlp, precode, u_b_inference: np.ndarray,
                          dims_b: int, rng: RngStream, steps: int = 2500,
                          lr: float = 0.1) -> Reconstruction:
    """Inversion against a known copy of the passive feature extractor (the
    white-box upper bound of the attack); the copy uses the bottleneck mean
    path since the adversary cannot replay the defender's sampling."""
    u_inf = as_tensor2(u_b_inference, "u_b_inference")
    x = rng.child("init").gen.uniform(0.0, 1.0, size=(u_inf.shape[0], dims_b))

    def objective_and_grad(xv):
        tape = Tape()
        x_node = tape.leaf(xv)
        u, _ = bottom.build(tape, x_node)
        if precode is not None:
            params = [tape.leaf(p) for p in precode.parameters()]
            u, _ = precode.apply(tape, u, None, params)
        obj = tape.frobenius_sq(tape.sub(u, tape.leaf(u_inf)))
        grads = tape.backward([(obj, 1.0)])
        return float(obj.value), grads[x_node]

    trace = []
    obj, grad = objective_and_grad(x)
    trace.append(obj)
    best_x, best_obj = x.copy(), obj
    step = lr
    for _ in range(steps):
        cand = np.clip(x - step * grad, 0.0, 1.0)
        cand_obj, cand_grad = objective_and_grad(cand)
        if cand_obj <= obj:
            x, obj, grad = cand, cand_obj, cand_grad
            trace.append(obj)
            if obj < best_obj:
                best_x, best_obj = x.copy(), obj
            step = min(step * 1.2, lr * 50)
        else:
            step *= 0.5
            if step < 1e-14:
                break
    return Reconstruction({"x_b": best_x}, objective_trace=trace, converged=True,
                          flags={"known_model": True})


def model_inversion(active: PartyState, algorithm: str, shadow_hidden: tuple[int, ...],
                    aux_features_a: np.ndarray, aux_features_b: np.ndarray,
                    aux_labels: np.ndarray, u_b_inference: np.ndarray,
                    num_classes: int, rng: RngStream,
                    shadow_epochs: int = 400, shadow_lr: float = 0.1,
                    steps: int = 500, lr: float = 0.1) -> Reconstruction:
    """Black-box query-free inversion: train a shadow of the passive bottom on
    auxiliary rows with the active models frozen, then gradient-descend inputs
    in [0,1] to match the observed inference-time u^B."""
    u_inf = as_tensor2(u_b_inference, "u_b_inference")
    aux_xb = as_tensor2(aux_features_b, "aux_features_b")
    dims_b = aux_xb.shape[1]
    cut = u_inf.shape[1]
    shadow = Mlp.make(rng.child("shadow"), dims_b, shadow_hidden, cut)
    _train_shadow(active, algorithm, shadow, np.asarray(aux_features_a, dtype=np.float64),
                  aux_xb, np.asarray(aux_labels, dtype=np.int64), num_classes,
                  shadow_epochs, shadow_lr)

    x = rng.child("init").gen.uniform(0.0, 1.0, size=(u_inf.shape[0], dims_b))

    def objective_and_grad(xv):
        tape = Tape()
        x_node = tape.leaf(xv)
        u_tilde, _ = shadow.build(tape, x_node)
        obj = tape.frobenius_sq(tape.sub(u_tilde, tape.leaf(u_inf)))
        grads = tape.backward([(obj, 1.0)])
        return float(obj.value), grads[x_node]

    trace = []
    obj, grad = objective_and_grad(x)
    trace.append(obj)
    best_x, best_obj = x.copy(), obj
    step = lr
    for _ in range(steps):
        cand = np.clip(x - step * grad, 0.0, 1.0)
        cand_obj, cand_grad = objective_and_grad(cand)
        if cand_obj <= obj:
            x, obj, grad = cand, cand_obj, cand_grad
            trace.append(obj)
            if obj < best_obj:
                best_x, best_obj = x.copy(), obj
            step = min(step * 1.1, lr * 10)
        else:
            step *= 0.5
            if step < 1e-12:
                break

    return Reconstruction({"x_b": best_x}, objective_trace=trace,
                          converged=True, flags={"shadow_hidden": shadow_hidden})
