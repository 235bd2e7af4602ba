"""Command-line entry point: declarative JSON config in, records / score
table / trade-off curve files out.

Verbs: run, score, list.  Exit codes: 0 success, 1 validation, 2 runtime.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from pathlib import Path

from .datasets import DatasetSpec
from .engine import TrainConfig
from .errors import ConfigError, ParseError
from .evaluation import (ATTACK_NAMES, SETTINGS, EvaluationTask, ScoreRow,
                         TradeoffRecord, aggregate_records, run_tasks,
                         validate_task)
from .protections import PROTECTION_KINDS, STRENGTH_GRIDS, stronger_first_key

CONFIG_VERSION = 1

RECORD_COLUMNS = ("setting", "algorithm", "dataset", "protection", "strength",
                  "seed", "aux_size", "attack", "eps_p", "eps_u", "omega_g",
                  "pu_score")


# ---------------------------------------------------------------------------
# Config parsing


def _require(mapping: dict, key: str, path: str):
    if key not in mapping:
        raise ConfigError(f"{path}.{key}: missing required field")
    return mapping[key]


def _dataset_from_config(obj: dict, path: str) -> DatasetSpec:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f for f in DatasetSpec.__dataclass_fields__}
    extra = set(obj) - known
    if extra:
        raise ConfigError(f"{path}: unknown dataset fields {sorted(extra)}")
    try:
        return DatasetSpec(**obj)
    except (ConfigError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _train_from_config(obj: dict, path: str) -> TrainConfig:
    known = {f for f in TrainConfig.__dataclass_fields__} - {"protection", "seed"}
    extra = set(obj) - known
    if extra:
        raise ConfigError(f"{path}: unknown train fields {sorted(extra)}")
    clean = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
    try:
        return TrainConfig(**clean)
    except (ConfigError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _task_from_config(obj: dict, index: int, default_seeds: tuple[int, ...]) -> EvaluationTask:
    path = f"tasks[{index}]"
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    task_fields = set(EvaluationTask.__dataclass_fields__)
    extra = set(obj) - task_fields
    if extra:
        raise ConfigError(f"{path}: unknown fields {sorted(extra)}")
    setting = _require(obj, "setting", path)
    algorithm = _require(obj, "algorithm", path)
    dataset = _dataset_from_config(_require(obj, "dataset", path), f"{path}.dataset")
    kwargs = {}
    for key in ("dataset_name", "shadow_spec", "csv", "gi_steps", "gi_batches_per_epoch",
                "mc_epochs", "mc_lr", "mi_aux_size", "mi_images", "mi_steps",
                "mi_lr", "mi_shadow_epochs"):
        if key in obj:
            kwargs[key] = obj[key]
    if "attacks" in obj:
        kwargs["attacks"] = tuple(obj["attacks"])
    if "protections" in obj:
        if not isinstance(obj["protections"], dict):
            raise ConfigError(f"{path}.protections: expected an object "
                              "mapping kind to a strength list (or null)")
        kwargs["protections"] = {k: (tuple(v) if v is not None else None)
                                 for k, v in obj["protections"].items()}
    if "seeds" in obj:
        kwargs["seeds"] = tuple(obj["seeds"])
    else:
        kwargs["seeds"] = default_seeds
    if "aux_sizes" in obj:
        kwargs["aux_sizes"] = tuple(obj["aux_sizes"])
    if "train" in obj:
        kwargs["train"] = _train_from_config(obj["train"], f"{path}.train")
    task = EvaluationTask(setting=setting, algorithm=algorithm, dataset=dataset, **kwargs)
    try:
        validate_task(task)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return task


def load_config(path: str, seed_override: int | None = None) -> tuple[list[EvaluationTask], dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise ConfigError("config root must be an object")
    version = _require(obj, "version", "config")
    if version != CONFIG_VERSION:
        raise ConfigError(f"config.version: expected {CONFIG_VERSION}, got {version}")
    seed = seed_override if seed_override is not None else obj.get("seed", 0)
    n_seeds = obj.get("n_seeds", 3)
    default_seeds = tuple(range(seed, seed + n_seeds))
    tasks_obj = _require(obj, "tasks", "config")
    if not isinstance(tasks_obj, list) or not tasks_obj:
        raise ConfigError("config.tasks: expected a non-empty list")
    tasks = [_task_from_config(t, i, default_seeds) for i, t in enumerate(tasks_obj)]
    options = {
        "parallel": obj.get("parallel", 1),
        "format": obj.get("format", "csv"),
        "output": obj.get("output", "."),
    }
    return tasks, options


# ---------------------------------------------------------------------------
# Records serialization (byte-stable: repr for floats, fixed column order)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def records_to_rows(records: list[TradeoffRecord]) -> list[dict]:
    rows = []
    for r in records:
        attacks = sorted(r.eps_p) or [""]
        for attack in attacks:
            rows.append({
                "setting": r.setting, "algorithm": r.algorithm, "dataset": r.dataset,
                "protection": r.protection, "strength": r.strength, "seed": r.seed,
                "aux_size": r.aux_size, "attack": attack,
                "eps_p": r.eps_p.get(attack), "eps_u": r.eps_u,
                "omega_g": r.omega_g, "pu_score": r.pu,
            })
    return rows


def write_records(records: list[TradeoffRecord], path: Path, fmt: str) -> None:
    rows = records_to_rows(records)
    if fmt == "json":
        payload = [{k: row[k] for k in RECORD_COLUMNS} for row in rows]
        path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n",
                        encoding="utf-8")
        return
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RECORD_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[k]) for k in RECORD_COLUMNS])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _parse_cell(raw: str, line: int, column: str):
    if raw == "":
        return None
    try:
        if column in ("setting", "seed", "aux_size", "pu_score"):
            return int(raw)
        if column in ("strength", "eps_p", "eps_u", "omega_g"):
            return float(raw)
    except ValueError:
        raise ParseError(f"line {line}: column {column!r}: cannot parse {raw!r}") from None
    return raw


def read_records(path: str) -> list[TradeoffRecord]:
    """Read a records file (csv or json) back into per-seed records."""
    p = Path(path)
    if p.suffix == ".json":
        rows = json.loads(p.read_text(encoding="utf-8"))
        rows = [{k: row.get(k) for k in RECORD_COLUMNS} for row in rows]
    else:
        rows = []
        with open(p, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != RECORD_COLUMNS:
                raise ParseError(f"line 1: expected header {','.join(RECORD_COLUMNS)}")
            for i, raw_row in enumerate(reader, start=2):
                if len(raw_row) != len(RECORD_COLUMNS):
                    raise ParseError(f"line {i}: expected {len(RECORD_COLUMNS)} columns, "
                                     f"got {len(raw_row)}")
                rows.append({col: _parse_cell(raw, i, col)
                             for col, raw in zip(RECORD_COLUMNS, raw_row)})

    merged: dict[tuple, TradeoffRecord] = {}
    for row in rows:
        key = (row["setting"], row["algorithm"], row["dataset"], row["protection"],
               row["strength"], row["seed"], row["aux_size"])
        rec = merged.get(key)
        if rec is None:
            rec = TradeoffRecord(row["setting"], row["algorithm"], row["dataset"],
                                 row["protection"], row["strength"],
                                 row["seed"] if row["seed"] is not None else 0,
                                 row["aux_size"], {}, row["eps_u"], row["omega_g"],
                                 row["pu_score"], failed=row["eps_p"] is None and not row["attack"])
            merged[key] = rec
        if row["attack"]:
            rec.eps_p[row["attack"]] = row["eps_p"]
    return list(merged.values())


# ---------------------------------------------------------------------------
# Reports


def format_score_table(rows: list[ScoreRow]) -> str:
    if not rows:
        return "(no records)\n"
    lines = []
    header = f"{'setting':>7}  {'algorithm':<9} {'dataset':<28} {'protection':<11} " \
             f"{'strength':>9}  {'eps_u':>7}  {'eps_p (worst attack at optimum)':<38} {'S*':>3}"
    lines.append(header)
    lines.append("-" * len(header))
    for row in rows:
        if row.setting == 6:
            for point in row.points:
                eps_txt = "  ".join(f"{a}={point.eps_p[a]:.3f}" for a in sorted(point.eps_p))
                lines.append(f"{row.setting:>7}  {row.algorithm:<9} {row.dataset:<28} "
                             f"{row.protection:<11} {_fmt(point.strength):>9}  "
                             f"{point.eps_u:>7.2f}  {eps_txt:<38} {'-':>3}")
            continue
        eps_txt = "  ".join(f"{a}={row.eps_p[a]:.1f}" for a in sorted(row.eps_p))
        lines.append(f"{row.setting:>7}  {row.algorithm:<9} {row.dataset:<28} "
                     f"{row.protection:<11} {_fmt(row.best_strength):>9}  "
                     f"{row.eps_u:>7.2f}  {eps_txt:<38} {row.score:>3}")
    return "\n".join(lines) + "\n"


def write_curves(rows: list[ScoreRow], out_dir: Path) -> list[Path]:
    """One CSV per (setting, dataset): protection, strength, eps_u, eps_p_max."""
    groups: dict[tuple, list[ScoreRow]] = {}
    for row in rows:
        groups.setdefault((row.setting, row.dataset), []).append(row)
    written = []
    for (setting, dataset), group in sorted(groups.items(), key=lambda kv: kv[0]):
        path = out_dir / f"curves_setting{setting}_{dataset}.csv"
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("protection", "strength", "eps_u", "eps_p_max"))
        for row in sorted(group, key=lambda r: r.protection):
            for point in row.points:  # already ordered strongest-first
                writer.writerow((row.protection, _fmt(point.strength),
                                 _fmt(point.eps_u), _fmt(max(point.eps_p.values()))))
        path.write_text(buf.getvalue(), encoding="utf-8")
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# Verbs


def cmd_run(args) -> int:
    tasks, options = load_config(args.config, args.seed)
    parallel = args.parallel if args.parallel is not None else options["parallel"]
    fmt = args.format if args.format is not None else options["format"]
    if fmt not in ("csv", "json"):
        raise ConfigError(f"--format must be csv or json, got {fmt!r}")
    out_dir = Path(args.out if args.out is not None else options["output"])
    out_dir.mkdir(parents=True, exist_ok=True)

    records = run_tasks(tasks, parallelism=int(parallel))
    records_path = out_dir / f"records.{fmt}"
    write_records(records, records_path, fmt)
    rows = aggregate_records(records)
    (out_dir / "score_table.txt").write_text(format_score_table(rows), encoding="utf-8")
    curves = write_curves(rows, out_dir)
    print(f"wrote {records_path}")
    print(f"wrote {out_dir / 'score_table.txt'}")
    for c in curves:
        print(f"wrote {c}")
    failed = sum(r.failed for r in records)
    if failed:
        print(f"warning: {failed} run(s) failed (rows kept with empty measurements)")
    return 0


def cmd_score(args) -> int:
    records = read_records(args.records)
    rows = aggregate_records([r for r in records if not r.failed])
    sys.stdout.write(format_score_table(rows))
    return 0


def cmd_list(_args) -> int:
    print("evaluation settings:")
    for sid in sorted(SETTINGS):
        s = SETTINGS[sid]
        print(f"  {sid}: algorithms={','.join(s.algorithms)} target={s.target} "
              f"vulnerability={s.vulnerability} attacks={','.join(s.attacks)} "
              f"protections={','.join(s.protections)} threat={s.threat}")
    print("protections (default strength grids):")
    for kind in PROTECTION_KINDS:
        if kind == "none":
            continue
        grid = STRENGTH_GRIDS[kind]
        print(f"  {kind}: {list(grid) if grid else 'parameter-free'}")
    print("attacks:")
    for name in ATTACK_NAMES:
        print(f"  {name}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="vflarena",
        description="Two-party VFL privacy/utility evaluation arena")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="execute the tasks in a config file")
    p_run.add_argument("--config", required=True, help="JSON config path")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override the global seed")
    p_run.add_argument("--parallel", type=int, default=None, help="worker processes")
    p_run.add_argument("--format", choices=("csv", "json"), default=None)
    p_run.set_defaults(func=cmd_run)

    p_score = sub.add_parser("score", help="recompute scores from a records file")
    p_score.add_argument("records", help="records.csv or records.json path")
    p_score.set_defaults(func=cmd_score)

    p_list = sub.add_parser("list", help="enumerate settings, protections, attacks")
    p_list.set_defaults(func=cmd_list)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
