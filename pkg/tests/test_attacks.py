import numpy as np
import pytest

from vflarena.attacks import (bottom_from_checkpoint, direct_label_inference,
                              direction_scoring, gradient_inversion,
                              known_model_inversion, model_completion,
                              model_inversion, norm_scoring,
                              residue_reconstruct)
from vflarena.datasets import DatasetSpec, draw_auxiliary, generate_synthetic
from vflarena.engine import CutLayerBatch, Mlp, TrainConfig, inference_forward, train_joint
from vflarena.errors import ConfigError, TrainingError
from vflarena.evaluation import accuracy, auc, dl_batch_accuracies, ssim
from vflarena.numerics import RngStream, softmax


def _batch(d, indices=None, **kw):
    d = np.asarray(d, dtype=np.float64)
    idx = np.arange(d.shape[0]) if indices is None else np.asarray(indices)
    return CutLayerBatch(indices=idx, u_b=np.zeros_like(d), d_b=d, **kw)


# ---------------------------------------------------------------------------
# direct label inference


def test_dl_picks_the_negative_entry():
    s = direct_label_inference([_batch([[0.2, -0.8, 0.6]])])
    assert s.predictions[0] == 1


def test_dl_all_positive_row_is_undecided():
    s = direct_label_inference([_batch([[0.2, 0.8], [0.1, -0.1]])])
    assert s.predictions[0] == -1 and s.meta["undecided"] == 1
    assert s.scores[0] == 0.5


def test_dl_exact_on_unprotected_softmax_run(binary_pair):
    train, _ = binary_pair
    cfg = TrainConfig(epochs=4, batch_size=64, learning_rate=0.3, seed=1, head="softmax")
    _, log, _ = train_joint("vlr", train, cfg)
    for epoch_accs in dl_batch_accuracies(log, train.labels):
        assert all(a == 100.0 for a in epoch_accs)


# ---------------------------------------------------------------------------
# norm / direction scoring


def test_norm_scores_are_row_norms():
    s = norm_scoring([_batch([[3.0, 4.0], [0.3, 0.4]])])
    assert np.allclose(s.scores, [5.0, 0.5])


def test_separated_norms_leak_perfectly():
    d = np.vstack([np.tile([3.0, 4.0], (5, 1)), np.tile([0.03, 0.04], (5, 1))])
    labels = np.array([1] * 5 + [0] * 5)
    s = norm_scoring([_batch(d)])
    assert auc(s.scores, labels[s.indices]) == 100.0


def test_direction_scores_signs():
    d = np.array([[1.0, 2.0], [-1.0, -2.0], [2.0, 4.0]])
    s = direction_scoring([_batch(d)], [0])
    assert s.scores[0] == pytest.approx(1.0)
    assert s.scores[1] == pytest.approx(-1.0)
    assert s.scores[2] == pytest.approx(1.0)


def test_direction_scoring_skips_batches_without_oracle():
    batches = [_batch([[1.0, 0.0]]), _batch([[0.0, 1.0]], indices=[7])]
    s = direction_scoring(batches, [None, 0])
    assert s.meta["skipped_batches"] == 1
    assert np.array_equal(s.indices, [7])


def test_direction_sign_rule_on_engine_run(imbalanced_pair):
    train, _ = imbalanced_pair
    cfg = TrainConfig(epochs=6, batch_size=64, learning_rate=0.1, seed=2)
    _, log, _ = train_joint("vhnn", train, cfg)
    labels = train.labels
    per_epoch = []
    for epoch in log.cut_batches:
        rows = []
        for batch in epoch:
            pos = np.flatnonzero(labels[batch.indices] == 1)
            rows.append(int(pos[0]) if pos.size else None)
        s = direction_scoring(epoch, rows)
        pred = (s.scores > 0).astype(int)
        per_epoch.append(float(np.mean(pred == labels[s.indices])))
    # the residual sign structure is sharpest before the model fits; leak
    # measurements take the worst-case epoch
    assert max(per_epoch) > 0.95


# ---------------------------------------------------------------------------
# residue reconstruction


def test_rr_single_sample_closed_form():
    x = np.array([[2.0, 1.0, -1.0]])
    d = np.array([[0.7]])
    g = x.T @ d
    recon, scores = residue_reconstruct(x, g)
    assert recon.tensors["d_b"][0, 0] == pytest.approx(0.7, abs=1e-8)
    assert scores.scores[0] == pytest.approx(-0.7, abs=1e-8)


def test_rr_exact_when_rank_condition_holds():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 10))  # features >= batch
    d = rng.normal(size=(6, 1))
    recon, _ = residue_reconstruct(x, x.T @ d)
    assert recon.flags["full_rank"]
    assert np.max(np.abs(recon.tensors["d_b"] - d)) < 1e-6


def test_rr_fails_gracefully_when_rank_deficient():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(10, 3))  # batch > features: irrecoverable
    d = rng.normal(size=(10, 1))
    recon, _ = residue_reconstruct(x, x.T @ d)
    assert not recon.flags["full_rank"]
    assert np.max(np.abs(recon.tensors["d_b"] - d)) > 1e-2


def test_rr_protected_gradient_recovers_worse():
    from vflarena.protections import gradient_compress
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 10))
    d = rng.normal(size=(6, 1))
    g = x.T @ d
    _, clean = residue_reconstruct(x, g)
    recon_p, _ = residue_reconstruct(x, gradient_compress(g, 0.1))
    clean_err = np.max(np.abs(-clean.scores.reshape(-1, 1) - d))
    prot_err = np.max(np.abs(recon_p.tensors["d_b"] - d))
    assert prot_err > clean_err


# ---------------------------------------------------------------------------
# gradient inversion


def _gi_instance(seed=4, b=2, f=3, m=2):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(b, f))
    theta = rng.normal(size=(f, m)) * 0.5
    u_a = rng.normal(size=(b, m)) * 0.5
    y = rng.integers(0, m, size=b)
    g = x.T @ (softmax(x @ theta + u_a) - np.eye(m)[y]) / b
    return x, theta, u_a, y, g


def test_gi_objective_never_ends_above_start():
    x, theta, _, _, g = _gi_instance()
    recon, _ = gradient_inversion(x, theta, g, 2, steps=60, rng=RngStream(0, ("gi",)))
    assert recon.objective_trace[-1] <= recon.objective_trace[0]


def test_gi_recovers_labels_on_noiseless_toy():
    x, theta, _, y, g = _gi_instance()
    recon, scores = gradient_inversion(x, theta, g, 2, steps=400,
                                       rng=RngStream(0, ("gi",)))
    assert recon.converged
    assert np.array_equal(scores.predictions, y)


def test_gi_truth_is_global_optimum_by_brute_force():
    x, theta, _, y_true, g = _gi_instance()

    def best_objective(y_hard):
        y_mat = np.eye(2)[np.array(y_hard)]
        u = np.zeros((2, 2))
        obj = np.inf
        step = 1.0
        grad = None
        for _ in range(1500):
            p = softmax(x @ theta + u)
            r = x.T @ (p - y_mat) / 2.0 - g
            val = float(np.sum(r * r))
            gp = (x @ r) / 2.0
            gu = p * (gp - np.sum(gp * p, axis=1, keepdims=True))
            if val <= obj:
                obj, grad = val, gu
                u_next = u - step * gu
                step = min(step * 1.2, 50.0)
            else:
                step *= 0.5
                u_next = u - step * grad
                if step < 1e-13:
                    break
            u = u_next
        return obj

    objs = {a: best_objective(a) for a in [(0, 0), (0, 1), (1, 0), (1, 1)]}
    assert min(objs, key=objs.get) == tuple(y_true)


def test_gi_noise_hurts():
    x, theta, _, y, g = _gi_instance(seed=7, b=4, f=6)
    rng = RngStream(1, ("noise",))
    noisy = g + rng.gen.laplace(0, 0.1, size=g.shape)
    _, clean_scores = gradient_inversion(x, theta, g, 2, steps=300,
                                         rng=RngStream(0, ("gi",)))
    _, noisy_scores = gradient_inversion(x, theta, noisy, 2, steps=300,
                                         rng=RngStream(0, ("gi",)))
    clean_acc = accuracy(clean_scores.predictions, y)
    noisy_acc = accuracy(noisy_scores.predictions, y)
    assert clean_acc == 100.0
    assert noisy_acc <= clean_acc


# ---------------------------------------------------------------------------
# model completion


def test_mc_untrained_bottom_gives_no_edge(binary_pair):
    train, test = binary_pair
    bottom = Mlp.make(RngStream(0, ("b",)), train.features_b.shape[1], (16,), 8)
    aux = draw_auxiliary(train, 40, seed=3)
    result = model_completion("vhnn", bottom, train.features_b[aux.indices],
                              train.labels[aux.indices], test.features_b, 2,
                              RngStream(0, ("mc",)))
    omega_mc = auc(result.probs_mc[:, -1], test.labels)
    omega_loc = auc(result.probs_loc[:, -1], test.labels)
    assert abs(omega_mc - omega_loc) < 12.0  # no federated knowledge to transfer


def test_mc_trained_bottom_beats_local_baseline(binary_pair):
    train, test = binary_pair
    cfg = TrainConfig(epochs=10, batch_size=64, learning_rate=0.1, seed=4)
    parties, log, _ = train_joint("vhnn", train, cfg)
    bottom = bottom_from_checkpoint(parties.passive.bottom, log.final_checkpoint())
    aux = draw_auxiliary(train, 40, seed=3)
    result = model_completion("vhnn", bottom, train.features_b[aux.indices],
                              train.labels[aux.indices], test.features_b, 2,
                              RngStream(4, ("mc",)))
    omega_mc = auc(result.probs_mc[:, -1], test.labels)
    omega_loc = auc(result.probs_loc[:, -1], test.labels)
    assert omega_mc > omega_loc


def test_mc_vlr_needs_no_extra_training(binary_pair):
    train, test = binary_pair
    cfg = TrainConfig(epochs=6, batch_size=64, learning_rate=0.3, seed=1)
    parties, log, _ = train_joint("vlr", train, cfg)
    bottom = bottom_from_checkpoint(parties.passive.bottom, log.final_checkpoint())
    aux = draw_auxiliary(train, 40, seed=3)
    result = model_completion("vlr", bottom, train.features_b[aux.indices],
                              train.labels[aux.indices], test.features_b, 2,
                              RngStream(1, ("mc",)))
    assert result.meta["head"] == "direct"
    # direct head = link of the bottom output, a pure function of the checkpoint
    direct = bottom.forward(test.features_b)
    assert np.allclose(result.probs_mc, 1.0 / (1.0 + np.exp(-direct)))


def test_mc_missing_class_rejected(binary_pair):
    train, test = binary_pair
    bottom = Mlp.make(RngStream(0, ("b",)), train.features_b.shape[1], (16,), 8)
    only_zero = np.flatnonzero(train.labels == 0)[:20]
    with pytest.raises(ConfigError):
        model_completion("vhnn", bottom, train.features_b[only_zero],
                         train.labels[only_zero], test.features_b, 2,
                         RngStream(0, ("mc",)))


# ---------------------------------------------------------------------------
# model inversion


def test_mi_white_box_sanity_and_random_floor(pattern_pair):
    train, test = pattern_pair
    cfg = TrainConfig(epochs=12, batch_size=32, learning_rate=0.1, seed=1,
                      cut_dim=192, bottom_hidden=(384,), top_hidden=(16,))
    parties, _, _ = train_joint("vsnn", train, cfg)
    n = 6
    u_inf, _ = inference_forward(parties, test.features_b[:n])
    recon = known_model_inversion(parties.passive.bottom, None, u_inf,
                                  train.features_b.shape[1], RngStream(1, ("wb",)))
    shape = test.image_shape_b
    values = [ssim(recon.tensors["x_b"][i].reshape(shape),
                   test.features_b[i].reshape(shape)) for i in range(n)]
    floor = RngStream(1, ("floor",)).gen.uniform(0, 1, size=(n, test.features_b.shape[1]))
    floor_values = [ssim(floor[i].reshape(shape), test.features_b[i].reshape(shape))
                    for i in range(n)]
    assert np.mean(values) > 0.9
    assert np.mean(values) > np.mean(floor_values)
    assert recon.objective_trace[-1] <= recon.objective_trace[0]


def test_mi_trained_shadow_runs_and_descends(pattern_pair):
    train, test = pattern_pair
    cfg = TrainConfig(epochs=8, batch_size=32, learning_rate=0.1, seed=1,
                      cut_dim=16, bottom_hidden=(32,), top_hidden=(16,))
    parties, _, _ = train_joint("vsnn", train, cfg)
    aux = draw_auxiliary(train, 120, seed=5)
    u_inf, _ = inference_forward(parties, test.features_b[:4])
    recon = model_inversion(parties.active, "vsnn", (32,),
                            train.features_a[aux.indices], train.features_b[aux.indices],
                            train.labels[aux.indices], u_inf, 4,
                            RngStream(1, ("mi",)), shadow_epochs=200, steps=150)
    assert recon.tensors["x_b"].shape == (4, train.features_b.shape[1])
    assert recon.objective_trace[-1] <= recon.objective_trace[0]
    assert recon.tensors["x_b"].min() >= 0.0 and recon.tensors["x_b"].max() <= 1.0


def test_mi_shadow_divergence_raises(pattern_pair):
    train, test = pattern_pair
    cfg = TrainConfig(epochs=2, batch_size=32, learning_rate=0.1, seed=1,
                      cut_dim=16, bottom_hidden=(32,), top_hidden=(16,))
    parties, _, _ = train_joint("vsnn", train, cfg)
    aux = draw_auxiliary(train, 40, seed=5)
    u_inf, _ = inference_forward(parties, test.features_b[:2])
    with pytest.raises(TrainingError, match="shadow"):
        model_inversion(parties.active, "vsnn", (32,),
                        train.features_a[aux.indices], train.features_b[aux.indices],
                        train.labels[aux.indices], u_inf, 4,
                        RngStream(1, ("mi",)), shadow_epochs=300, shadow_lr=1e160)
