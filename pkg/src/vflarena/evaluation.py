"""Privacy-leakage / utility-loss measurement and scoring, the six evaluation
settings, and the (task, protection, strength, seed) sweep runner.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.stats import rankdata

from . import attacks as atk
from .datasets import (DatasetSpec, VerticalDataset, draw_auxiliary,
                       generate_synthetic, load_csv)
from .engine import (TrainConfig, VulnerabilityLog, Parties, evaluate_utility,
                     inference_forward, positive_scores, train_joint)
from .attacks import bottom_from_checkpoint, model_completion, model_inversion
from .errors import ConfigError, ContractError, MetricError, ShapeError, TrainingError
from .numerics import RngStream, as_tensor2
from .protections import (NO_PROTECTION, STRENGTH_GRIDS, ProtectionBinding,
                          stronger_first_key)

RANDOM_CLASSIFIER_AUC = 50.0

ATTACK_NAMES = ("ns", "ds", "dl", "rr", "gi", "mc", "mi")


# ---------------------------------------------------------------------------
# Metrics


def auc(scores, labels) -> float:
    """Rank-statistic AUC as a percentage; ties contribute one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ShapeError("auc: scores and labels must align")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auc needs both classes present")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return 100.0 * float(u) / (n_pos * n_neg)


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ShapeError("accuracy: predictions and labels must align")
    return 100.0 * float(np.mean(predictions == labels))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 7) -> float:
    """Mean local SSIM with a uniform window and the standard stabilizers for
    dynamic range 1; boundary windows are cropped away."""
    a = as_tensor2(a, "a")
    b = as_tensor2(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise MetricError(f"ssim: image smaller than the {window}x{window} window")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a = uniform_filter(a, size=window)
    mu_b = uniform_filter(b, size=window)
    var_a = uniform_filter(a * a, size=window) - mu_a * mu_a
    var_b = uniform_filter(b * b, size=window) - mu_b * mu_b
    cov = uniform_filter(a * b, size=window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    h = window // 2
    return float((num / den)[h:-h or None, h:-h or None].mean())


# ---------------------------------------------------------------------------
# Leakage and loss


def privacy_leakage(attack: str, omega_posterior: float,
                    omega_prior: float | None = None) -> float:
    """Knowledge gain of the adversary, per the attack family's measurement:
    score attacks against the random-classifier AUC, model completion against
    the local-training baseline, model inversion as raw similarity."""
    if attack in ("ns", "ds", "dl", "rr", "gi"):
        return omega_posterior - RANDOM_CLASSIFIER_AUC
    if attack == "mc":
        if omega_prior is None:
            raise ContractError("model-completion leakage needs the local baseline")
        return omega_posterior - omega_prior
    if attack == "mi":
        return omega_posterior
    raise ContractError(f"no leakage measurement for attack {attack!r}")


def utility_loss(omega_unprotected: float, omega_protected: float) -> float:
    """May be negative when the protection accidentally helps; preserved."""
    return omega_unprotected - omega_protected


# ---------------------------------------------------------------------------
# Score table


_PRIVACY_BANDS = ((5.0, 5), (10.0, 4), (15.0, 3), (20.0, 2), (25.0, 1))
_UTILITY_BANDS = ((0.5, 5), (1.0, 4), (2.0, 3), (4.0, 2), (6.0, 1))


def _band_lookup(value: float, bands) -> int:
    value = max(float(value), 0.0)  # negative values clamp into the top band
    for edge, score in bands:
        if value <= edge:
            return score
    return 0


def st_privacy(eps_p: float) -> int:
    return _band_lookup(eps_p, _PRIVACY_BANDS)


def st_utility(eps_u: float) -> int:
    return _band_lookup(eps_u, _UTILITY_BANDS)


def pu_score(eps_p: float, eps_u: float) -> int:
    """Trade-off score: the worse of the two band lookups."""
    return min(st_privacy(eps_p), st_utility(eps_u))


@dataclass(frozen=True)
class StrengthPoint:
    """One (protection strength) aggregate: per-attack leakage and utility loss."""

    strength: float | int | None
    eps_p: dict
    eps_u: float


def optimal_pu_score(kind: str, points: list[StrengthPoint]) -> tuple[int, float | int | None]:
    """Best trade-off score over the strength grid, against the worst-case
    attack at each strength; ties resolve to the stronger protection."""
    if not points:
        raise ContractError("optimal_pu_score needs at least one strength point")
    attack_sets = {tuple(sorted(p.eps_p)) for p in points}
    if len(attack_sets) != 1:
        raise ContractError("every strength must carry the same attack set")
    if not next(iter(attack_sets)):
        raise ContractError("strength points carry no attacks")
    best_score, best_strength, best_order = -1, None, np.inf
    for p in points:
        score = pu_score(max(p.eps_p.values()), p.eps_u)
        order = stronger_first_key(kind, p.strength)
        if score > best_score or (score == best_score and order < best_order):
            best_score, best_strength, best_order = score, p.strength, order
    return best_score, best_strength


# ---------------------------------------------------------------------------
# Evaluation settings


@dataclass(frozen=True)
class Setting:
    id: int
    algorithms: tuple[str, ...]
    target: str
    vulnerability: str
    attacks: tuple[str, ...]
    protections: tuple[str, ...]
    threat: str


_VLR_PROTECTIONS = ("dp_laplace", "gc", "dsgd", "max_norm", "iso")
_VNN_PROTECTIONS = ("dp_laplace", "gc", "dsgd", "max_norm", "iso", "marvell")

SETTINGS: dict[int, Setting] = {
    1: Setting(1, ("vlr",), "labels", "cut_gradients", ("ns", "ds", "dl"), _VLR_PROTECTIONS, "T1"),
    2: Setting(2, ("vlr",), "labels", "model_gradients", ("rr", "gi"), _VLR_PROTECTIONS, "T1"),
    3: Setting(3, ("vlr",), "labels", "bottom_model", ("mc",), _VLR_PROTECTIONS, "T1"),
    4: Setting(4, ("vhnn", "vsnn"), "labels", "cut_gradients", ("ns", "ds"), _VNN_PROTECTIONS, "T1"),
    5: Setting(5, ("vhnn", "vsnn"), "labels", "bottom_model", ("mc",), _VNN_PROTECTIONS, "T1"),
    6: Setting(6, ("vhnn", "vsnn"), "features_b", "cut_output_and_active_models",
               ("mi",), ("mixup", "precode"), "T2"),
}

SHADOW_SPECS = ("same", "different_widths", "shallow")


@dataclass
class EvaluationTask:
    """One evaluation suite: a setting bound to a dataset, an attack set, and
    a protection grid, swept over seeds (and auxiliary sizes for MC)."""

    setting: int
    algorithm: str
    dataset: DatasetSpec
    dataset_name: str = ""
    attacks: tuple[str, ...] | None = None
    protections: dict | None = None  # kind -> strength grid (None: default grid)
    seeds: tuple[int, ...] = (0, 1, 2)
    aux_sizes: tuple[int, ...] = (40,)
    shadow_spec: str = "same"
    train: TrainConfig = field(default_factory=TrainConfig)
    csv: dict | None = None  # {"path", "label_column", "party_a_columns", "party_b_columns"}
    gi_steps: int = 150
    gi_batches_per_epoch: int = 2
    mc_epochs: int = 200
    mc_lr: float = 0.05
    mi_aux_size: int = 200
    mi_images: int = 12
    mi_steps: int = 500
    mi_lr: float = 0.1
    mi_shadow_epochs: int = 400

    def name(self) -> str:
        return self.dataset_name or self.dataset.kind

    def resolved_attacks(self) -> tuple[str, ...]:
        return tuple(self.attacks) if self.attacks else SETTINGS[self.setting].attacks

    def resolved_protections(self) -> list[tuple[str, tuple]]:
        spec = self.protections
        if spec is None:
            spec = {kind: None for kind in SETTINGS[self.setting].protections}
        out = []
        for kind in spec:
            grid = spec[kind]
            if grid is None:
                grid = STRENGTH_GRIDS[kind] or (None,)
            out.append((kind, tuple(grid)))
        return out


def validate_task(task: EvaluationTask) -> None:
    if task.setting not in SETTINGS:
        raise ConfigError(f"setting {task.setting} unknown; valid: {sorted(SETTINGS)}")
    setting = SETTINGS[task.setting]
    if task.algorithm not in setting.algorithms:
        raise ConfigError(f"setting {setting.id} runs {setting.algorithms}, "
                          f"not {task.algorithm!r}")
    for attack in task.resolved_attacks():
        if attack not in setting.attacks:
            raise ConfigError(
                f"attack {attack!r} is not available in setting {setting.id} "
                f"(threat {setting.threat}, vulnerability {setting.vulnerability}); "
                f"allowed: {setting.attacks}")
    num_classes = _task_num_classes(task)
    for kind, grid in task.resolved_protections():
        if kind not in setting.protections:
            raise ConfigError(f"protection {kind!r} is not evaluated in setting "
                              f"{setting.id}; allowed: {setting.protections}")
        if kind == "marvell" and num_classes != 2:
            raise ConfigError("marvell supports binary classification only; "
                              f"dataset has {num_classes} classes")
        for strength in grid:
            ProtectionBinding(kind, strength)  # strength domain check
    if "dl" in task.resolved_attacks() and num_classes != 2:
        raise ConfigError("the DL leak measurement is AUC-based; use a binary dataset")
    if task.setting == 6 and task.dataset.kind != "synthetic-image-pattern":
        raise ConfigError("setting 6 measures SSIM; it needs an image-pattern dataset")
    if task.shadow_spec not in SHADOW_SPECS:
        raise ConfigError(f"shadow_spec must be one of {SHADOW_SPECS}")
    if task.algorithm == "vsnn" and task.dataset.kind != "csv" and task.dataset.dims_a != 0:
        raise ConfigError("vsnn needs a dataset with zero party-A columns")
    if task.algorithm != "vsnn" and task.dataset.kind not in ("csv", "synthetic-image-pattern") \
            and task.dataset.dims_a == 0:
        raise ConfigError(f"{task.algorithm} needs party-A features")
    if len(set(task.seeds)) != len(task.seeds) or not task.seeds:
        raise ConfigError("seeds must be non-empty and distinct")


def _task_num_classes(task: EvaluationTask) -> int:
    kind = task.dataset.kind
    if kind in ("synthetic-multiclass", "synthetic-image-pattern"):
        return task.dataset.num_classes
    if kind == "csv":
        return task.dataset.num_classes
    return 2


# ---------------------------------------------------------------------------
# Attack mounting (the harness side: this is where ground truth lives)


def leak_auc_per_epoch(score_sets: list[atk.LabelScoreSet], labels: np.ndarray) -> list[float]:
    out = []
    for s in score_sets:
        scores = s.scores
        if scores is None:
            raise ContractError("score-based leak needs scores, not predictions")
        out.append(auc(scores, labels[s.indices]))
    return out


def label_leak(score_sets: list[atk.LabelScoreSet], labels: np.ndarray) -> float:
    """Worst-case leak over training epochs, against the random prior."""
    return max(leak_auc_per_epoch(score_sets, labels)) - RANDOM_CLASSIFIER_AUC


def known_positive_rows(log: VulnerabilityLog, labels: np.ndarray) -> list[list[int | None]]:
    """The DS oracle: position of the first positive sample in each batch."""
    rows = []
    for epoch in log.cut_batches:
        epoch_rows = []
        for batch in epoch:
            positive = np.flatnonzero(labels[batch.indices] == 1)
            epoch_rows.append(int(positive[0]) if positive.size else None)
        rows.append(epoch_rows)
    return rows


def dl_batch_accuracies(log: VulnerabilityLog, labels: np.ndarray) -> list[list[float]]:
    """Per-epoch, per-batch DL prediction accuracy (undecided counts as wrong)."""
    out = []
    for epoch in log.cut_batches:
        accs = []
        for batch in epoch:
            s = atk.direct_label_inference([batch])
            accs.append(accuracy(s.predictions, labels[s.indices]))
        out.append(accs)
    return out


@dataclass
class RunResult:
    utility: float | None
    eps_raw: dict = field(default_factory=dict)  # attack -> posterior leak value(s)
    failed: bool = False
    error: str = ""


def _shadow_hidden(task: EvaluationTask) -> tuple[int, ...]:
    if task.shadow_spec == "same":
        return task.train.bottom_hidden
    if task.shadow_spec == "different_widths":
        # structure-mismatch analog: a capacity-limited shadow that cannot
        # express the true bottom's map
        return tuple(max(2, w // 8) for w in task.train.bottom_hidden) or (2,)
    return ()  # shallow: a single FC stand-in for an unknown structure


def _train_cfg(task: EvaluationTask, binding: ProtectionBinding, seed: int) -> TrainConfig:
    head = task.train.head
    if head == "auto" and task.setting in (1, 2):
        head = "softmax"  # sign-structure regime for DL / Eq.-style GI surrogate
    return replace(task.train, seed=seed, protection=binding, head=head,
                   record_cut_gradients=True,
                   record_model_gradients=task.setting == 2)


def _load_data(task: EvaluationTask) -> tuple[VerticalDataset, VerticalDataset]:
    if task.dataset.kind == "csv":
        if not task.csv:
            raise ConfigError("csv dataset needs the csv file description")
        return load_csv(task.csv["path"], task.csv["label_column"],
                        task.csv["party_a_columns"], task.csv["party_b_columns"],
                        seed=task.dataset.seed)
    return generate_synthetic(task.dataset)


def run_single(task: EvaluationTask, binding: ProtectionBinding, seed: int) -> RunResult:
    """Train one protected model, mount the task's attacks, measure utility."""
    train_data, test_data = _load_data(task)
    cfg = _train_cfg(task, binding, seed)
    try:
        parties, log, _ = train_joint(task.algorithm, train_data, cfg)
    except TrainingError as exc:
        return RunResult(utility=None, failed=True, error=str(exc))

    result = RunResult(utility=evaluate_utility(parties, test_data))
    labels = train_data.labels
    rng = RngStream(seed, ("attacks", task.setting, task.name(), binding.kind,
                           str(binding.strength)))

    for attack in task.resolved_attacks():
        if attack == "ns":
            sets = [atk.norm_scoring(e) for e in log.cut_batches]
            result.eps_raw["ns"] = label_leak(sets, labels)
        elif attack == "ds":
            oracle = known_positive_rows(log, labels)
            sets = [atk.direction_scoring(e, rows)
                    for e, rows in zip(log.cut_batches, oracle)]
            result.eps_raw["ds"] = label_leak(sets, labels)
        elif attack == "dl":
            sets = [atk.direct_label_inference(e) for e in log.cut_batches]
            result.eps_raw["dl"] = label_leak(sets, labels)
        elif attack == "rr":
            sets = [atk.residue_attack_epoch(e) for e in log.cut_batches]
            result.eps_raw["rr"] = label_leak(sets, labels)
        elif attack == "gi":
            sets = [atk.gradient_inversion_epoch(
                e, _task_num_classes(task), steps=task.gi_steps,
                rng=rng.child("gi", ei), max_batches=task.gi_batches_per_epoch)
                for ei, e in enumerate(log.cut_batches)]
            result.eps_raw["gi"] = label_leak(sets, labels)
        elif attack == "mc":
            result.eps_raw["mc"] = _mount_mc(task, parties, log, train_data,
                                             test_data, seed)
        elif attack == "mi":
            result.eps_raw["mi"] = _mount_mi(task, parties, train_data,
                                             test_data, seed)
        else:
            raise ConfigError(f"unknown attack {attack!r}")
    return result


def _omega_binary_or_acc(probs: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    if num_classes == 2:
        return auc(probs[:, -1], labels)
    return accuracy(probs.argmax(axis=1), labels)


def _mount_mc(task: EvaluationTask, parties: Parties, log: VulnerabilityLog,
              train_data: VerticalDataset, test_data: VerticalDataset,
              seed: int) -> dict[int, float]:
    bottom = bottom_from_checkpoint(parties.passive.bottom, log.final_checkpoint())
    num_classes = train_data.num_classes
    eps_by_aux: dict[int, float] = {}
    for aux_size in task.aux_sizes:
        aux = draw_auxiliary(train_data, aux_size, seed=seed * 1000 + aux_size)
        completion = model_completion(
            task.algorithm, bottom, train_data.features_b[aux.indices],
            train_data.labels[aux.indices], test_data.features_b, num_classes,
            RngStream(seed, ("mc", aux_size)), epochs=task.mc_epochs, lr=task.mc_lr)
        omega_mc = _omega_binary_or_acc(completion.probs_mc, test_data.labels, num_classes)
        omega_loc = _omega_binary_or_acc(completion.probs_loc, test_data.labels, num_classes)
        eps_by_aux[aux_size] = privacy_leakage("mc", omega_mc, omega_loc)
    return eps_by_aux


def _mount_mi(task: EvaluationTask, parties: Parties, train_data: VerticalDataset,
              test_data: VerticalDataset, seed: int) -> float:
    if test_data.image_shape_b is None:
        raise ConfigError("model inversion needs image-pattern data")
    aux = draw_auxiliary(train_data, min(task.mi_aux_size, train_data.n), seed=seed + 77)
    n_img = min(task.mi_images, test_data.n)
    target_x = test_data.features_b[:n_img]
    features_a = test_data.features_a[:n_img] if parties.active.bottom is not None else None
    u_b_inf, _ = inference_forward(parties, target_x, features_a)
    recon = model_inversion(
        parties.active, task.algorithm, _shadow_hidden(task),
        train_data.features_a[aux.indices], train_data.features_b[aux.indices],
        train_data.labels[aux.indices], u_b_inf, train_data.num_classes,
        RngStream(seed, ("mi",)), shadow_epochs=task.mi_shadow_epochs,
        steps=task.mi_steps, lr=task.mi_lr)
    shape = test_data.image_shape_b
    values = [ssim(recon.tensors["x_b"][i].reshape(shape), target_x[i].reshape(shape))
              for i in range(n_img)]
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# The sweep runner


@dataclass
class TradeoffRecord:
    setting: int
    algorithm: str
    dataset: str
    protection: str
    strength: float | int | None
    seed: int
    aux_size: int | None
    eps_p: dict
    eps_u: float | None
    omega_g: float | None
    pu: int | None
    failed: bool = False

    def sort_key(self):
        return (self.setting, self.dataset, self.protection,
                stronger_first_key(self.protection, self.strength),
                self.seed, self.aux_size if self.aux_size is not None else -1)


def _job(args) -> RunResult:
    task, binding, seed = args
    return run_single(task, binding, seed)


def run_tasks(tasks: list[EvaluationTask], parallelism: int = 1) -> list[TradeoffRecord]:
    """Sweep every (task, protection, strength, seed); one unprotected run per
    (task, seed) supplies the paired utility baseline.  Deterministic given
    seeds, regardless of parallelism."""
    for task in tasks:
        validate_task(task)

    baseline_jobs = [(task, NO_PROTECTION, seed)
                     for task in tasks for seed in task.seeds]
    protected_jobs = [(task, ProtectionBinding(kind, strength), seed)
                      for task in tasks
                      for kind, grid in task.resolved_protections()
                      for strength in grid
                      for seed in task.seeds]

    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            baseline_results = list(pool.map(_job, baseline_jobs))
            protected_results = list(pool.map(_job, protected_jobs))
    else:
        baseline_results = [_job(j) for j in baseline_jobs]
        protected_results = [_job(j) for j in protected_jobs]

    omega_g: dict[tuple[int, int], float | None] = {}
    for (task, _, seed), res in zip(baseline_jobs, baseline_results):
        omega_g[(id(task), seed)] = res.utility

    records: list[TradeoffRecord] = []
    for (task, binding, seed), res in zip(protected_jobs, protected_results):
        base = omega_g[(id(task), seed)]
        label_setting = task.setting != 6
        if res.failed or base is None:
            records.append(TradeoffRecord(
                task.setting, task.algorithm, task.name(), binding.kind,
                binding.strength, seed, None, {}, None, base, None, failed=True))
            continue
        eps_u = utility_loss(base, res.utility)
        if "mc" in res.eps_raw:
            others = {k: v for k, v in res.eps_raw.items() if k != "mc"}
            for aux_size, eps_mc in res.eps_raw["mc"].items():
                eps_p = {**others, "mc": eps_mc}
                pu = pu_score(max(eps_p.values()), eps_u) if label_setting else None
                records.append(TradeoffRecord(
                    task.setting, task.algorithm, task.name(), binding.kind,
                    binding.strength, seed, aux_size, eps_p, eps_u, base, pu))
        else:
            eps_p = dict(res.eps_raw)
            pu = pu_score(max(eps_p.values()), eps_u) if label_setting and eps_p else None
            records.append(TradeoffRecord(
                task.setting, task.algorithm, task.name(), binding.kind,
                binding.strength, seed, None, eps_p, eps_u, base, pu))

    records.sort(key=TradeoffRecord.sort_key)
    return records


# ---------------------------------------------------------------------------
# Aggregation shared by the score table and the curve files


@dataclass
class ScoreRow:
    setting: int
    algorithm: str
    dataset: str
    protection: str
    best_strength: float | int | None
    eps_u: float
    eps_p: dict
    score: int
    points: list[StrengthPoint] = field(default_factory=list)


def aggregate_records(records: list[TradeoffRecord]) -> list[ScoreRow]:
    """Seed means per strength, worst case over auxiliary sizes, then the
    optimal trade-off score per (setting, dataset, protection)."""
    groups: dict[tuple, list[TradeoffRecord]] = {}
    for r in records:
        if r.failed:
            continue
        groups.setdefault((r.setting, r.algorithm, r.dataset, r.protection), []).append(r)

    rows = []
    for (setting, algorithm, dataset, protection), group in sorted(
            groups.items(), key=lambda kv: kv[0]):
        by_strength: dict = {}
        for r in group:
            by_strength.setdefault(r.strength, []).append(r)
        points = []
        for strength in sorted(by_strength, key=lambda s: stronger_first_key(protection, s)):
            rs = by_strength[strength]
            attack_names = sorted({a for r in rs for a in r.eps_p})
            eps_p = {}
            for a in attack_names:
                if a == "mc":
                    by_aux: dict = {}
                    for r in rs:
                        if a in r.eps_p:
                            by_aux.setdefault(r.aux_size, []).append(r.eps_p[a])
                    eps_p[a] = max(float(np.mean(v)) for v in by_aux.values())
                else:
                    eps_p[a] = float(np.mean([r.eps_p[a] for r in rs if a in r.eps_p]))
            seen = {}
            for r in rs:  # one eps_u per seed (aux rows repeat it)
                seen[r.seed] = r.eps_u
            eps_u = float(np.mean(list(seen.values())))
            points.append(StrengthPoint(strength, eps_p, eps_u))
        if setting == 6:
            # feature-reconstruction setting: SSIM rows per strength, no PU score
            best = points[0]
            rows.append(ScoreRow(setting, algorithm, dataset, protection,
                                 best.strength, best.eps_u, best.eps_p, -1, points))
            continue
        score, best_strength = optimal_pu_score(protection, points)
        best = next(p for p in points if p.strength == best_strength)
        rows.append(ScoreRow(setting, algorithm, dataset, protection,
                             best_strength, best.eps_u, best.eps_p, score, points))
    return rows
