"""Plant-held-out evaluation: splits, MAE/RMSE, view-removal sweeps,
degradation/robustness arithmetic, and report emission.

Splitting holds out whole plants per crop so no imagery of a test plant
ever reaches training. The sensitivity sweep re-predicts each level group
after removing a seeded random subset of its views, never dropping the
last one; the 0%-removal point reuses the exact full-view code path, so it
matches standard evaluation bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import fileio, fusion, nn, priors, store

# Display order mirrors the benchmark's tables; unknown crops follow
# alphabetically.
_CROP_ORDER = {"mustard": 0, "radish": 1, "wheat": 2}

TASKS = ("age", "leaf_count")

PredictFn = Callable[[store.LevelGroup, Sequence[int]], tuple[float, float]]


@dataclass
class PlantSplit:
    """Record-index partition induced by holding out one plant per crop."""

    held_out: dict[str, int]
    train_indices: list[int]
    test_indices: list[int]


def split_by_plant(
    records: Sequence[store.ViewRecord], held_out: Mapping[str, int]
) -> PlantSplit:
    """Partition record indices by the held-out plant of each crop.

    Crops without an entry in *held_out* contribute all their records to
    training.

    Raises:
        ValueError: a named crop or plant does not exist in *records*.
    """
    crops = {record.crop for record in records}
    plants = {(record.crop, record.plant_id) for record in records}
    for crop, plant in held_out.items():
        if crop not in crops:
            raise ValueError(f"unknown crop {crop!r} in hold-out map")
        if (crop, plant) not in plants:
            raise ValueError(f"crop {crop!r} has no plant {plant}")
    train, test = [], []
    for index, record in enumerate(records):
        if held_out.get(record.crop) == record.plant_id:
            test.append(index)
        else:
            train.append(index)
    return PlantSplit(
        held_out=dict(held_out), train_indices=train, test_indices=test
    )


def mae(preds: Sequence[float], targets: Sequence[float]) -> float:
    """Mean absolute error."""
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("mae on empty input")
    return float(np.mean(np.abs(p - t)))


def rmse(preds: Sequence[float], targets: Sequence[float]) -> float:
    """Root mean squared error; always >= MAE on the same data."""
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("rmse on empty input")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mean_over_crops(per_crop: Sequence[float]) -> float:
    """Arithmetic mean of per-crop metrics (the tables' "Mean" column)."""
    values = list(per_crop)
    if not values:
        raise ValueError("mean_over_crops on empty input")
    return float(np.mean(np.asarray(values, dtype=np.float64)))


def degradation(initial_mae: float, final_mae: float) -> float:
    """Percent MAE increase from full views to the sweep's end point."""
    if initial_mae <= 0:
        raise ValueError(f"initial MAE must be > 0, got {initial_mae}")
    return (final_mae - initial_mae) / initial_mae * 100.0


def robustness_gain(
    degradation_baseline: float, degradation_candidate: float
) -> float:
    """Percent reduction of the candidate's degradation vs the baseline's."""
    if degradation_baseline <= 0:
        raise ValueError(
            f"baseline degradation must be > 0, got {degradation_baseline}"
        )
    return (
        (degradation_baseline - degradation_candidate)
        / degradation_baseline
        * 100.0
    )


@dataclass
class GroupCase:
    """One evaluation unit: a level group plus its regression targets."""

    group: store.LevelGroup
    age: float
    leaf_count: float


def group_cases(
    cache: store.EmbeddingCache, groups: Sequence[store.LevelGroup] | None = None
) -> list[GroupCase]:
    samples = fusion.samples_from_cache(cache, groups)
    lookup = {sample.key: sample for sample in samples}
    if groups is None:
        groups = store.group_by_level(cache)
    return [
        GroupCase(group=g, age=lookup[g.key].age, leaf_count=lookup[g.key].leaf_count)
        for g in groups
    ]


def test_groups(
    cache: store.EmbeddingCache, split: PlantSplit
) -> list[store.LevelGroup]:
    """Level groups made entirely of the split's test records."""
    test_rows = {cache.records[i].embedding_row for i in split.test_indices}
    return [
        group
        for group in store.group_by_level(cache)
        if all(row in test_rows for row in group.rows)
    ]


def make_unimodal_group_fn(
    model: nn.MlpModel, cache: store.EmbeddingCache
) -> PredictFn:
    """Per-image predictions averaged within the group, for like-for-like
    comparison against the group-level multimodal model."""

    def predict(group: store.LevelGroup, rows: Sequence[int]) -> tuple[float, float]:
        outputs, _ = nn.forward(model, cache.matrix[list(rows)])
        mean = outputs.mean(axis=0, dtype=np.float64)
        return float(mean[0]), float(mean[1])

    return predict


def make_multimodal_group_fn(
    model: nn.MlpModel,
    cache: store.EmbeddingCache,
    prior_table: priors.PriorTable,
    level_source: str = fusion.LEVEL_SOURCE_METADATA,
    level_model: nn.MlpModel | None = None,
) -> PredictFn:
    def predict(group: store.LevelGroup, rows: Sequence[int]) -> tuple[float, float]:
        prediction, _ = fusion.predict_multimodal(
            model,
            group,
            cache,
            prior_table,
            level_source=level_source,
            level_model=level_model,
            rows=rows,
        )
        return prediction.age, prediction.leaf_count

    return predict


def evaluate_cases(
    predict_fn: PredictFn, cases: Sequence[GroupCase]
) -> tuple[float, float]:
    """Pooled (mae_age, mae_leaf) of *predict_fn* over full-view cases."""
    preds = [predict_fn(case.group, case.group.rows) for case in cases]
    mae_age = mae([p[0] for p in preds], [c.age for c in cases])
    mae_leaf = mae([p[1] for p in preds], [c.leaf_count for c in cases])
    return mae_age, mae_leaf


@dataclass
class EvalReport:
    """Per-crop and cross-crop MAE/RMSE for both regression tasks."""

    model: dict
    config: dict
    unit: str  # "image" or "group"
    per_crop: dict[str, dict[str, dict]]  # crop -> task -> {mae, rmse, n}
    means: dict[str, dict]  # task -> {mae, rmse}

    def to_dict(self) -> dict:
        return {
            "kind": "eval_report",
            "model": self.model,
            "config": self.config,
            "unit": self.unit,
            "results": {"per_crop": self.per_crop, "means": self.means},
        }


def build_report(
    entries: Sequence[tuple[str, float, float, float, float]],
    model_info: dict,
    config: dict,
    unit: str,
) -> EvalReport:
    """Assemble a report from (crop, pred_age, pred_leaf, age, leaf) rows.

    Cross-crop means are the arithmetic mean of the per-crop metrics
    present, matching the benchmark tables' "Mean" column.
    """
    if not entries:
        raise ValueError("no evaluation entries")
    by_crop: dict[str, list] = {}
    for entry in entries:
        by_crop.setdefault(entry[0], []).append(entry)
    per_crop: dict[str, dict[str, dict]] = {}
    for crop, rows in by_crop.items():
        pred_age = [r[1] for r in rows]
        pred_leaf = [r[2] for r in rows]
        true_age = [r[3] for r in rows]
        true_leaf = [r[4] for r in rows]
        per_crop[crop] = {
            "age": {
                "mae": mae(pred_age, true_age),
                "rmse": rmse(pred_age, true_age),
                "n": len(rows),
            },
            "leaf_count": {
                "mae": mae(pred_leaf, true_leaf),
                "rmse": rmse(pred_leaf, true_leaf),
                "n": len(rows),
            },
        }
    crops = sorted(per_crop)
    means = {
        task: {
            metric: mean_over_crops([per_crop[c][task][metric] for c in crops])
            for metric in ("mae", "rmse")
        }
        for task in TASKS
    }
    return EvalReport(
        model=model_info, config=config, unit=unit, per_crop=per_crop, means=means
    )


def evaluate_unimodal_images(
    model: nn.MlpModel,
    cache: store.EmbeddingCache,
    record_indices: Sequence[int],
    model_info: dict,
    config: dict,
) -> EvalReport:
    """Per-image evaluation of the unimodal model (benchmark protocol)."""
    indices = list(record_indices)
    if not indices:
        raise ValueError("no records to evaluate")
    rows = [cache.records[i].embedding_row for i in indices]
    outputs, _ = nn.forward(model, cache.matrix[rows])
    entries = []
    for i, index in enumerate(indices):
        record = cache.records[index]
        entries.append(
            (
                record.crop,
                float(outputs[i, 0]),
                float(outputs[i, 1]),
                float(record.day),
                float(record.leaf_count),
            )
        )
    return build_report(entries, model_info, config, unit="image")


def evaluate_group_predictor(
    predict_fn: PredictFn,
    cases: Sequence[GroupCase],
    model_info: dict,
    config: dict,
) -> EvalReport:
    """Group-level evaluation shared by both models."""
    entries = []
    for case in cases:
        age, leaf = predict_fn(case.group, case.group.rows)
        entries.append((case.group.crop, age, leaf, case.age, case.leaf_count))
    return build_report(entries, model_info, config, unit="group")


@dataclass
class CurvePoint:
    removal_percent: float
    mae_age: float
    mae_leaf: float
    trials: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "removal_percent": self.removal_percent,
            "mae_age": self.mae_age,
            "mae_leaf": self.mae_leaf,
            "trials": self.trials,
            "seed": self.seed,
        }


@dataclass
class SensitivityCurve:
    """MAE as a function of the percentage of views removed at runtime."""

    points: list[CurvePoint]
    trials: int
    seed: int
    config: dict = field(default_factory=dict)

    def degradation_summary(self) -> dict:
        if not self.points:
            raise ValueError("empty curve has no degradation summary")
        first, last = self.points[0], self.points[-1]
        return {
            "age": degradation(first.mae_age, last.mae_age),
            "leaf_count": degradation(first.mae_leaf, last.mae_leaf),
        }

    def to_dict(self) -> dict:
        data = {
            "kind": "sensitivity_curve",
            "trials": self.trials,
            "seed": self.seed,
            "config": self.config,
            "points": [point.to_dict() for point in self.points],
        }
        try:
            data["degradation"] = self.degradation_summary()
        except ValueError:
            data["degradation"] = None
        return data


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def retained_views(view_count: int, removal_percent: float) -> int:
    """How many views survive removing ``round(p% of n)``, floored at 1."""
    removed = _round_half_up(removal_percent / 100.0 * view_count)
    return max(1, view_count - removed)


def sensitivity_sweep(
    predict_fn: PredictFn,
    cases: Sequence[GroupCase],
    percentages: Sequence[float],
    trials: int = 5,
    seed: int = 0,
    config: dict | None = None,
) -> SensitivityCurve:
    """Measure MAE while removing a growing fraction of views per group.

    Per percentage and trial, each group keeps a uniformly sampled subset
    of ``retained_views(n, p)`` views (canonical order within the subset);
    MAEs pool over all groups and average across trials. Each (p, trial)
    pair draws from an independent substream of *seed*, so results do not
    depend on scheduling. A 0% point is always included; because removal
    of zero views is deterministic, it runs a single trial and therefore
    equals standard evaluation exactly.

    Raises:
        ValueError: empty cases, duplicate percentages, or percentages
            outside [0, 100).
    """
    if not cases:
        raise ValueError("sensitivity sweep needs at least one group")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    cleaned = sorted(float(p) for p in percentages)
    if any(p < 0 or p >= 100 for p in cleaned):
        raise ValueError(f"percentages must lie in [0, 100): {cleaned}")
    if len(set(cleaned)) != len(cleaned):
        raise ValueError(f"duplicate percentages: {cleaned}")
    if not cleaned or cleaned[0] != 0.0:
        cleaned.insert(0, 0.0)

    points = []
    for percent in cleaned:
        if percent == 0.0:
            mae_age, mae_leaf = evaluate_cases(predict_fn, cases)
            points.append(CurvePoint(0.0, mae_age, mae_leaf, 1, seed))
            continue
        age_maes, leaf_maes = [], []
        for trial in range(trials):
            rng = np.random.default_rng(
                [int(seed), int(round(percent * 1000)), trial]
            )
            pred_age, pred_leaf, true_age, true_leaf = [], [], [], []
            for case in cases:
                rows = case.group.rows
                keep = retained_views(len(rows), percent)
                if keep == len(rows):
                    subset = list(rows)
                else:
                    chosen = np.sort(rng.permutation(len(rows))[:keep])
                    subset = [rows[i] for i in chosen]
                age, leaf = predict_fn(case.group, subset)
                pred_age.append(age)
                pred_leaf.append(leaf)
                true_age.append(case.age)
                true_leaf.append(case.leaf_count)
            age_maes.append(mae(pred_age, true_age))
            leaf_maes.append(mae(pred_leaf, true_leaf))
        points.append(
            CurvePoint(
                percent,
                float(np.mean(age_maes)),
                float(np.mean(leaf_maes)),
                trials,
                seed,
            )
        )
    return SensitivityCurve(
        points=points, trials=trials, seed=seed, config=dict(config or {})
    )


# --- report emission -----------------------------------------------------


def _round_sig(value: float, digits: int = 6) -> float:
    if isinstance(value, float) and math.isfinite(value):
        return float(f"{value:.{digits}g}")
    return value


def _round_floats(obj):
    if isinstance(obj, dict):
        return {key: _round_floats(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(item) for item in obj]
    if isinstance(obj, float):
        return _round_sig(obj)
    return obj


def _display_crops(crops) -> list[str]:
    return sorted(crops, key=lambda c: (_CROP_ORDER.get(c, len(_CROP_ORDER)), c))


def _fmt6(value: float) -> str:
    return f"{value:.6g}"


def _report_csv(data: dict) -> str:
    lines = ["crop,task,mae,rmse,n"]
    per_crop = data["results"]["per_crop"]
    for crop in _display_crops(per_crop):
        for task in TASKS:
            cell = per_crop[crop][task]
            lines.append(
                f"{crop},{task},{_fmt6(cell['mae'])},{_fmt6(cell['rmse'])},{cell['n']}"
            )
    for task in TASKS:
        cell = data["results"]["means"][task]
        lines.append(f"Mean,{task},{_fmt6(cell['mae'])},{_fmt6(cell['rmse'])},")
    return "\n".join(lines) + "\n"


_TASK_LABELS = {"age": "Age", "leaf_count": "Leaf Count"}


def _report_markdown(data: dict) -> str:
    per_crop = data["results"]["per_crop"]
    crops = _display_crops(per_crop)
    header = ["Metric"] + [crop.capitalize() for crop in crops] + ["Mean"]
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "---|" * len(header),
    ]
    for metric in ("mae", "rmse"):
        for task in TASKS:
            row = [f"{metric.upper()} ({_TASK_LABELS[task]})"]
            row += [f"{per_crop[crop][task][metric]:.2f}" for crop in crops]
            row.append(f"{data['results']['means'][task][metric]:.2f}")
            lines.append("| " + " | ".join(row) + " |")
    lines.append("")
    lines.append(f"Evaluation unit: {data.get('unit', 'group')}")
    return "\n".join(lines) + "\n"


def _curve_csv(data: dict) -> str:
    lines = ["removal_percent,mae_age,mae_leaf,trials,seed"]
    for point in data["points"]:
        lines.append(
            f"{_fmt6(float(point['removal_percent']))},{_fmt6(point['mae_age'])},"
            f"{_fmt6(point['mae_leaf'])},{point['trials']},{point['seed']}"
        )
    return "\n".join(lines) + "\n"


def _curve_markdown(data: dict) -> str:
    lines = [
        "| Removal % | MAE (Age) | MAE (Leaf Count) | Trials |",
        "|---|---|---|---|",
    ]
    for point in data["points"]:
        lines.append(
            f"| {float(point['removal_percent']):.1f} | {point['mae_age']:.2f} "
            f"| {point['mae_leaf']:.2f} | {point['trials']} |"
        )
    summary = data.get("degradation")
    if summary:
        lines.append("")
        lines.append(
            f"Degradation: age {summary['age']:.2f}%, "
            f"leaf count {summary['leaf_count']:.2f}%"
        )
    return "\n".join(lines) + "\n"


def emit_report(
    obj: EvalReport | SensitivityCurve | dict, fmt: str, path: str | Path
) -> None:
    """Write a report or curve as stable JSON, CSV, or a markdown table.

    JSON and CSV round floats to 6 significant digits with fixed key and
    column order, so identical inputs produce byte-identical files;
    markdown rounds to 2 decimals, mirroring the benchmark tables.
    """
    if isinstance(obj, (EvalReport, SensitivityCurve)):
        data = obj.to_dict()
    else:
        data = dict(obj)
    kind = data.get("kind")
    if kind not in ("eval_report", "sensitivity_curve"):
        raise ValueError(f"cannot emit object of kind {kind!r}")
    if fmt == "json":
        text = fileio.dump_json(_round_floats(data))
    elif fmt == "csv":
        text = _report_csv(data) if kind == "eval_report" else _curve_csv(data)
    elif fmt == "markdown":
        text = _report_markdown(data) if kind == "eval_report" else _curve_markdown(data)
    else:
        raise ValueError(f"unknown format {fmt!r} (expected json, csv, or markdown)")
    fileio.atomic_write_text(Path(path), text)


def load_report(path: str | Path) -> dict:
    """Parse a JSON report/curve back into its dict form."""
    with open(path, "r", encoding="utf-8") as handle:
        data = json.load(handle)
    if data.get("kind") not in ("eval_report", "sensitivity_curve"):
        raise ValueError(f"{path}: not a report or sensitivity curve")
    return data
