import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scorecards import ALL_SCORECARDS, ERRATA
from vflarena.datasets import DatasetSpec
from vflarena.engine import TrainConfig
from vflarena.errors import ConfigError, ContractError, MetricError, ShapeError
from vflarena.evaluation import (SETTINGS, EvaluationTask, StrengthPoint,
                                 accuracy, aggregate_records, auc,
                                 optimal_pu_score, privacy_leakage, pu_score,
                                 run_tasks, ssim, st_privacy, st_utility,
                                 utility_loss, validate_task)


# ---------------------------------------------------------------------------
# AUC


def test_auc_perfect_ordering():
    assert auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 100.0


def test_auc_constant_scores_is_chance():
    assert auc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == 50.0


def test_auc_four_point_hand_example():
    assert auc([0.9, 0.8, 0.4, 0.3], [1, 0, 1, 0]) == 75.0


def test_auc_single_class_rejected():
    with pytest.raises(MetricError):
        auc([0.1, 0.2], [1, 1])


def test_auc_random_scores_near_chance():
    rng = np.random.default_rng(0)
    scores = rng.uniform(size=1000)
    labels = rng.integers(0, 2, size=1000)
    assert abs(auc(scores, labels) - 50.0) < 3.0


def _pair_count_auc(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return 100.0 * wins / (len(pos) * len(neg))


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_auc_matches_pair_counting_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 40))
    scores = rng.choice([0.1, 0.3, 0.5, 0.7, 0.9], size=n)  # force ties
    labels = rng.integers(0, 2, size=n)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    assert auc(scores, labels) == pytest.approx(_pair_count_auc(scores, labels))


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_auc_invariant_under_monotone_transforms(seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=30)
    labels = rng.integers(0, 2, size=30)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    base = auc(scores, labels)
    assert auc(3.0 * scores + 7.0, labels) == pytest.approx(base)
    assert auc(np.exp(scores), labels) == pytest.approx(base)


# ---------------------------------------------------------------------------
# SSIM


def test_ssim_self_similarity_is_one():
    x = np.random.default_rng(1).uniform(size=(12, 12))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_inverted_checkerboard_negative():
    x = np.indices((12, 12)).sum(axis=0) % 2.0
    assert ssim(x, 1.0 - x) < 0.0


def test_ssim_symmetric():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(10, 14))
    b = rng.uniform(size=(10, 14))
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


def test_ssim_shape_mismatch():
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8)), np.zeros((8, 9)))


def test_ssim_too_small_for_window():
    with pytest.raises(MetricError):
        ssim(np.zeros((4, 20)), np.zeros((4, 20)))


# ---------------------------------------------------------------------------
# leakage / loss / scores


def test_privacy_leakage_score_attacks():
    assert privacy_leakage("ns", 65.0) == 15.0
    assert privacy_leakage("dl", 50.0) == 0.0


def test_privacy_leakage_mc_needs_prior():
    assert privacy_leakage("mc", 62.0, 55.0) == pytest.approx(7.0)
    with pytest.raises(ContractError):
        privacy_leakage("mc", 62.0)


def test_privacy_leakage_mi_is_raw_similarity():
    assert privacy_leakage("mi", 0.34) == 0.34


def test_utility_loss_examples():
    assert utility_loss(73.2, 72.3) == pytest.approx(0.9)
    assert utility_loss(80.0, 80.0) == 0.0
    assert utility_loss(70.0, 71.5) == pytest.approx(-1.5)  # preserved, not clamped


def test_pu_score_paper_points():
    assert pu_score(3.7, 0.9) == 4
    assert pu_score(19.8, 0.1) == 2
    assert pu_score(0.0, 0.0) == 5


def test_pu_score_negative_values_clamp_to_top_band():
    assert st_privacy(-3.0) == 5
    assert st_utility(-0.2) == 5
    assert pu_score(-1.0, -1.0) == 5


@given(st.floats(-5, 60), st.floats(-2, 10), st.floats(0, 10), st.floats(0, 3))
@settings(max_examples=60, deadline=None)
def test_pu_score_monotone_nonincreasing(ep, eu, dp, du):
    assert pu_score(ep + dp, eu) <= pu_score(ep, eu)
    assert pu_score(ep, eu + du) <= pu_score(ep, eu)


def test_optimal_pu_score_single_strength():
    score, strength = optimal_pu_score("iso", [StrengthPoint(5.0, {"ns": 2.6}, 0.8)])
    assert (score, strength) == (4, 5.0)


def test_optimal_pu_score_picks_best_strength():
    points = [StrengthPoint(25.0, {"ns": 30.0}, 0.1),
              StrengthPoint(10.0, {"ns": 4.0}, 0.9),
              StrengthPoint(5.0, {"ns": 12.0}, 0.2)]
    score, strength = optimal_pu_score("iso", points)
    assert score == 4 and strength == 10.0


def test_optimal_pu_score_tie_prefers_stronger():
    points = [StrengthPoint(0.75, {"ns": 2.0}, 0.1),
              StrengthPoint(0.1, {"ns": 2.5}, 0.2)]
    score, strength = optimal_pu_score("gc", points)
    assert score == 5 and strength == 0.1  # smaller retain ratio = stronger


def test_optimal_pu_score_missing_attack_rejected():
    points = [StrengthPoint(1.0, {"ns": 2.0, "ds": 1.0}, 0.1),
              StrengthPoint(2.0, {"ns": 2.5}, 0.2)]
    with pytest.raises(ContractError):
        optimal_pu_score("iso", points)


# ---------------------------------------------------------------------------
# the published scorecards, reproduced from raw leakage/loss values


@pytest.mark.parametrize("table", sorted(ALL_SCORECARDS))
def test_scorecards_reproduce_from_band_rules(table):
    for dataset, protection, eps_u, eps_p, published in ALL_SCORECARDS[table]:
        got = pu_score(max(eps_p.values()), eps_u)
        via_optimal, _ = optimal_pu_score(protection,
                                          [StrengthPoint(None, eps_p, eps_u)])
        assert got == via_optimal
        key = (table, dataset, protection)
        if key in ERRATA:
            published_score, band_rule_score = ERRATA[key]
            assert published == published_score
            assert got == band_rule_score
        else:
            assert got == published, f"{table}/{dataset}/{protection}"


def test_scorecard_named_examples():
    assert pu_score(3.7, 0.9) == 4      # credit, dp_laplace
    assert pu_score(19.8, 0.1) == 2     # credit, max_norm
    assert pu_score(3.8, 0.4) == 5      # bhi, marvell (vhnn)
    credit = [r for r in ALL_SCORECARDS["vlr_ns_ds_dl"] if r[0] == "credit"]
    scores = [pu_score(max(e.values()), u) for _, _, u, e, _ in credit]
    assert scores == [0, 0, 0, 2, 4, 4]
    bal = [r for r in ALL_SCORECARDS["vhnn_ns_ds"]
           if r[0] == "nuswide2-bal" and r[1] != "none"]
    scores = [pu_score(max(e.values()), u) for _, _, u, e, _ in bal]
    assert scores == [4, 5, 5, 5, 5, 5]


# ---------------------------------------------------------------------------
# task validation


def _task(**kw):
    base = dict(setting=1, algorithm="vlr",
                dataset=DatasetSpec("synthetic-binary-balanced", n_train=120,
                                    n_test=60, dims_a=3, dims_b=3, seed=0),
                seeds=(0,),
                train=TrainConfig(epochs=2, batch_size=40, learning_rate=0.3))
    base.update(kw)
    return EvaluationTask(**base)


def test_validate_accepts_defaults():
    validate_task(_task())


def test_validate_rejects_label_attack_under_t2():
    task = _task(setting=6, algorithm="vsnn",
                 dataset=DatasetSpec("synthetic-image-pattern", n_train=60,
                                     n_test=30, dims_a=0, dims_b=0,
                                     num_classes=2, seed=0),
                 attacks=("ns",))
    with pytest.raises(ConfigError, match="T2"):
        validate_task(task)


def test_validate_rejects_marvell_on_multiclass():
    task = _task(setting=5, algorithm="vhnn",
                 dataset=DatasetSpec("synthetic-multiclass", n_train=120, n_test=60,
                                     dims_a=3, dims_b=3, num_classes=10, seed=0),
                 protections={"marvell": None})
    with pytest.raises(ConfigError, match="binary"):
        validate_task(task)


def test_validate_rejects_wrong_algorithm_for_setting():
    with pytest.raises(ConfigError):
        validate_task(_task(algorithm="vhnn"))


def test_validate_rejects_protection_outside_setting():
    with pytest.raises(ConfigError, match="marvell"):
        validate_task(_task(protections={"marvell": None}))


def test_validate_rejects_unknown_setting():
    with pytest.raises(ConfigError):
        validate_task(_task(setting=9))


def test_settings_registry_shape():
    assert sorted(SETTINGS) == [1, 2, 3, 4, 5, 6]
    assert SETTINGS[6].threat == "T2"
    assert all(SETTINGS[i].threat == "T1" for i in range(1, 6))
    assert "marvell" not in SETTINGS[1].protections
    assert "marvell" in SETTINGS[4].protections


# ---------------------------------------------------------------------------
# runner


def _small_task(**kw):
    base = dict(
        setting=1, algorithm="vlr",
        dataset=DatasetSpec("synthetic-binary-balanced", n_train=160, n_test=80,
                            dims_a=3, dims_b=3, seed=1),
        attacks=("ns", "dl"),
        protections={"dp_laplace": (1e-3, 1e-1)},
        seeds=(0, 1),
        train=TrainConfig(epochs=2, batch_size=40, learning_rate=0.3))
    base.update(kw)
    return EvaluationTask(**base)


def test_run_tasks_counting_contract():
    task = _small_task(protections={"dp_laplace": (1e-4, 1e-3, 1e-2, 1e-1)})
    records = run_tasks([task])
    assert len(records) == 8  # 4 strengths x 2 seeds; baselines emit no records
    assert {(r.strength, r.seed) for r in records} == {
        (s, seed) for s in (1e-4, 1e-3, 1e-2, 1e-1) for seed in (0, 1)}
    for r in records:
        assert set(r.eps_p) == {"ns", "dl"}
        assert r.omega_g is not None and r.eps_u is not None
        assert isinstance(r.pu, int)


def test_run_tasks_parallel_matches_serial():
    task = _small_task()
    serial = run_tasks([task], parallelism=1)
    parallel = run_tasks([task], parallelism=4)
    assert len(serial) == len(parallel)
    for a, b in zip(serial, parallel):
        assert (a.protection, a.strength, a.seed) == (b.protection, b.strength, b.seed)
        assert a.eps_u == b.eps_u and a.eps_p == b.eps_p and a.omega_g == b.omega_g


def test_mc_task_sweeps_aux_sizes():
    task = EvaluationTask(
        setting=3, algorithm="vlr",
        dataset=DatasetSpec("synthetic-binary-balanced", n_train=160, n_test=80,
                            dims_a=3, dims_b=3, seed=1),
        protections={"max_norm": None},
        seeds=(0,), aux_sizes=(20, 40),
        train=TrainConfig(epochs=2, batch_size=40, learning_rate=0.3),
        mc_epochs=50)
    records = run_tasks([task])
    assert sorted(r.aux_size for r in records) == [20, 40]


def test_aggregate_takes_worst_aux_and_means_over_seeds():
    from vflarena.evaluation import TradeoffRecord
    records = [
        TradeoffRecord(3, "vlr", "d", "max_norm", None, 0, 20, {"mc": 4.0}, 1.0, 90.0, 3),
        TradeoffRecord(3, "vlr", "d", "max_norm", None, 0, 40, {"mc": 8.0}, 1.0, 90.0, 3),
        TradeoffRecord(3, "vlr", "d", "max_norm", None, 1, 20, {"mc": 6.0}, 3.0, 90.0, 2),
        TradeoffRecord(3, "vlr", "d", "max_norm", None, 1, 40, {"mc": 2.0}, 3.0, 90.0, 2),
    ]
    rows = aggregate_records(records)
    assert len(rows) == 1
    row = rows[0]
    assert row.eps_p["mc"] == pytest.approx(5.0)  # max over aux of seed means
    assert row.eps_u == pytest.approx(2.0)
    assert row.score == pu_score(5.0, 2.0)
