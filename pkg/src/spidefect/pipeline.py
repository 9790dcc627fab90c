"""End-to-end runs: ingest, table building, label joins, k-fold training and fusion.

Every model is evaluated out-of-fold. Verdicts from the pin, component and
board levels are then aligned on component keys (pin verdicts are lifted to
their component by OR / max) and fused.
"""
from __future__ import annotations

import enum
import logging
import os
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from . import features as feat
from .core import (
    KEY_COLUMNS,
    AoiRecord,
    BoardLayout,
    EncodingConfig,
    FeatureTable,
    Level,
    PinFrame,
    PinKey,
)
from .errors import ConfigError, SpiDefectError, TrainingError
from .evaluation import ConfusionCounts, EvalReport, cross_validate, f1, macro_f1, write_roc_csv
from .features import ClassificationTask
from .gbdt import TrainConfig, config_dict, save_model
from .ingest import SchemaConfig, read_aoi, read_spi

log = logging.getLogger(__name__)

COMPONENT_KEY = list(KEY_COLUMNS[Level.COMPONENT])


class PipelineError(SpiDefectError):
    """A stage failed; ``stage`` names it and ``cause`` is the original error."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


class ComponentMode(str, enum.Enum):
    PER_COMPONENT = "per_component"
    COMBINED = "combined"


class FusionKind(str, enum.Enum):
    ANY_POSITIVE = "any_positive"
    MAJORITY_VOTE = "majority_vote"
    MEAN_PROBABILITY = "mean_probability"


@dataclass(frozen=True)
class FusionRule:
    kind: FusionKind = FusionKind.ANY_POSITIVE
    threshold: float = 0.5  # only used by MEAN_PROBABILITY

    def __post_init__(self):
        object.__setattr__(self, "kind", FusionKind(self.kind))
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("fusion threshold must lie in [0, 1]")

    def apply(self, verdicts: np.ndarray, probabilities: np.ndarray) -> np.ndarray:
        """Fuse member rows (members x items) into one 0/1 verdict per item."""
        verdicts = np.asarray(verdicts, dtype=np.int64)
        if self.kind is FusionKind.ANY_POSITIVE:
            return (verdicts.max(axis=0) > 0).astype(np.int8)
        if self.kind is FusionKind.MAJORITY_VOTE:
            # even member counts: a tie counts as positive
            return (2 * verdicts.sum(axis=0) >= verdicts.shape[0]).astype(np.int8)
        return (np.asarray(probabilities).mean(axis=0) >= self.threshold).astype(np.int8)


@dataclass
class RunConfig:
    task: ClassificationTask = ClassificationTask.C1
    levels: tuple[Level, ...] = (Level.PIN,)
    component_mode: ComponentMode = ComponentMode.PER_COMPONENT
    top_n_components: int | None = 35
    train: TrainConfig = field(default_factory=TrainConfig)
    folds: int = 5
    fusion: FusionRule = field(default_factory=FusionRule)
    seed: int = 0
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    allow_board_c2c3: bool = False

    def __post_init__(self):
        self.task = ClassificationTask(self.task)
        self.levels = tuple(sorted({Level(v) for v in self.levels}, key=list(Level).index))
        self.component_mode = ComponentMode(self.component_mode)

    def validate(self) -> None:
        if not self.levels:
            raise ConfigError("at least one level is required")
        if self.folds < 2:
            raise ConfigError("folds must be at least 2")
        if self.top_n_components is not None and self.top_n_components <= 0:
            raise ConfigError("top_n_components must be positive")
        if Level.BOARD in self.levels and self.task is not ClassificationTask.C1:
            if not self.allow_board_c2c3:
                raise ConfigError(
                    f"board-level models for task {self.task.value} have too few labelled boards; "
                    "set allow_board_c2c3 to run them anyway")
            log.warning("board-level %s models enabled; expect very small label sets", self.task.value)
        self.train.validate()

    def echo(self) -> list[str]:
        enc = self.encoding
        lines = [
            f"config.task={self.task.value}",
            f"config.levels={','.join(l.value for l in self.levels)}",
            f"config.component_mode={self.component_mode.value}",
            f"config.top_n_components={self.top_n_components}",
            f"config.folds={self.folds}",
            f"config.fusion={self.fusion.kind.value}",
            f"config.fusion_threshold={self.fusion.threshold!r}",
            f"config.seed={self.seed}",
            f"config.allow_board_c2c3={str(self.allow_board_c2c3).lower()}",
            f"config.encoding.spi_vocabulary={','.join(enc.spi_vocabulary)}",
            f"config.encoding.use_spi_result={str(enc.use_spi_result).lower()}",
            f"config.encoding.include_pad_id={str(enc.include_pad_id).lower()}",
            f"config.encoding.include_datetime={str(enc.include_datetime).lower()}",
        ]
        lines += [f"config.train.{k}={v!r}" for k, v in config_dict(self.train).items()]
        return lines


# -- helpers -------------------------------------------------------------------

def infer_layout(pins: PinFrame) -> BoardLayout:
    """Components (sorted by id) and their pin counts as observed in the data."""
    frame = pd.DataFrame({"component_id": pins.component_id.astype(object),
                          "pin_number": pins.pin_number})
    counts = frame.groupby("component_id", sort=True)["pin_number"].nunique()
    return BoardLayout({str(c): int(n) for c, n in counts.items()},
                       figures_per_panel=int(pins.figure_id.max()))


def rank_components_by_defects(aoi: Sequence[AoiRecord]) -> list[str]:
    """Component ids by descending AOI record count; ties by ascending id."""
    if not aoi:
        raise ConfigError("cannot rank components without AOI records")
    counts = Counter(a.component_id for a in aoi)
    return sorted(counts, key=lambda c: (-counts[c], c))


def lift_pin_verdicts(pins: pd.DataFrame | Mapping[PinKey, int],
                      probabilities: Mapping[PinKey, float] | None = None) -> pd.DataFrame:
    """Component verdict = OR over its pins, component probability = max over its pins.

    Accepts a DataFrame with pin key columns plus ``verdict`` (and optionally
    ``probability``), or a mapping from PinKey to verdict with an optional
    matching probability mapping. Returns one row per component key.
    """
    if not isinstance(pins, pd.DataFrame):
        keys = list(pins)
        frame = pd.DataFrame([tuple(k) for k in keys], columns=list(KEY_COLUMNS[Level.PIN]))
        frame["verdict"] = [int(pins[k]) for k in keys]
        if probabilities is not None:
            frame["probability"] = [float(probabilities[k]) for k in keys]
        pins = frame
    cols = ["verdict"] + (["probability"] if "probability" in pins.columns else [])
    return pins.groupby(COMPONENT_KEY, sort=True, as_index=False)[cols].max()


def component_truth(task: ClassificationTask, aoi: Sequence[AoiRecord]) -> pd.DataFrame:
    """Component-level ground truth for ``task``: one row per labelled component key."""
    frame = feat.aoi_frame(aoi)
    if task is ClassificationTask.C1:
        frame = frame.assign(target=1)
    elif task is ClassificationTask.C2:
        frame = frame.assign(target=frame["bad"].astype(np.int8))
    else:
        frame = frame[(frame["bad"] == 1) & frame["not_repairable"].notna()]
        frame = frame.assign(target=frame["not_repairable"].astype(np.int8))
    return frame.groupby(COMPONENT_KEY, sort=True, as_index=False)["target"].max()


def _safe(name: str) -> str:
    return name.replace("/", "__")


def _fmt(x: float) -> str:
    return "nan" if x != x else format(x, ".6f")


@dataclass
class ModelResult:
    name: str
    level: Level
    component: str
    report: EvalReport
    verdicts: pd.DataFrame  # component key + verdict + probability (out-of-fold)

    def top_features(self, n: int = 10) -> list[tuple[str, float]]:
        imp = self.report.importance()
        names = list(imp)
        ranked = sorted(names, key=lambda c: (-imp[c], names.index(c)))
        return [(c, imp[c]) for c in ranked[:n] if imp[c] > 0]


@dataclass
class FusionResult:
    members: list[str]
    rule: FusionRule
    keys: pd.DataFrame
    target: np.ndarray
    member_verdicts: np.ndarray  # members x items
    fused: np.ndarray
    fold_of_item: np.ndarray

    def counts(self, verdict: np.ndarray, rows=None) -> ConfusionCounts:
        rows = slice(None) if rows is None else rows
        return ConfusionCounts.from_predictions(verdict[rows], self.target[rows])

    def fold_recalls(self) -> list[dict[str, float]]:
        """Recall of every member and of the fused verdict, per fusion fold."""
        out = []
        for f in range(int(self.fold_of_item.max()) + 1 if len(self.fold_of_item) else 0):
            rows = self.fold_of_item == f
            rec = {m: self.counts(v, rows).recall() for m, v in zip(self.members, self.member_verdicts)}
            rec["fused"] = self.counts(self.fused, rows).recall()
            out.append(rec)
        return out

    def recall_dominates(self) -> bool:
        return all(r["fused"] >= max(r[m] for m in self.members) for r in self.fold_recalls())


@dataclass
class RunReport:
    config: RunConfig
    models: list[ModelResult]
    skipped: list[tuple[str, str]]
    fusion: FusionResult | None
    inputs: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def level_summary(self) -> list[dict]:
        """Per-level metrics pooled over that level's models (Table-3 style rows)."""
        rows = []
        for level in self.config.levels:
            members = [m for m in self.models if m.level is level]
            if not members:
                continue
            counts = ConfusionCounts()
            for m in members:
                counts = counts + m.report.pooled_counts
            if level is Level.BOARD:
                label = f"Top {len(members)}"
            elif level is Level.COMPONENT and self.config.component_mode is ComponentMode.PER_COMPONENT:
                label = f"All ({len(members)} models)"
            else:
                label = "All"
            aucs = [m.report.pooled_auc for m in members]
            rows.append({"task": self.config.task.value, "level": level.value, "components": label,
                         "models": len(members), "f1": f1(counts), "macro_f1": macro_f1(counts),
                         "auc": float(np.nanmean(aucs)) if not all(a != a for a in aucs) else float("nan"),
                         "tp": counts.tp, "fp": counts.fp, "tn": counts.tn, "fn": counts.fn})
        if self.fusion is not None:
            c = self.fusion.counts(self.fusion.fused)
            rows.append({"task": self.config.task.value, "level": "fused",
                         "components": f"{self.fusion.rule.kind.value}({'+'.join(self.fusion.members)})",
                         "models": len(self.models), "f1": f1(c), "macro_f1": macro_f1(c),
                         "auc": float("nan"), "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn})
        return rows

    def to_text(self) -> str:
        lines = ["[run]"] + self.config.echo()
        lines += [f"input.{k}={v}" for k, v in sorted(self.inputs.items())]
        lines.append(f"models.trained={len(self.models)}")
        lines.append(f"models.skipped={len(self.skipped)}")
        for row in self.level_summary():
            p = f"summary.{row['level']}."
            lines += [f"{p}components={row['components']}", f"{p}models={row['models']}",
                      f"{p}f1={_fmt(row['f1'])}", f"{p}macro_f1={_fmt(row['macro_f1'])}",
                      f"{p}auc={_fmt(row['auc'])}",
                      f"{p}tp={row['tp']}", f"{p}fp={row['fp']}", f"{p}tn={row['tn']}",
                      f"{p}fn={row['fn']}"]
        for name, reason in self.skipped:
            lines.append(f"skipped.{name}={reason}")
        for m in self.models:
            lines.append("")
            lines.append(f"[model {m.name}]")
            lines.append(f"level={m.level.value}")
            lines.append(f"component={m.component}")
            for rank, (c, gain) in enumerate(m.top_features(), 1):
                lines.append(f"importance.{rank}={c}:{gain:.6g}")
            lines.append(m.report.to_text().rstrip("\n"))
        if self.fusion is not None:
            fu = self.fusion
            lines += ["", "[fusion]", f"rule={fu.rule.kind.value}", f"members={','.join(fu.members)}",
                      f"items={len(fu.target)}", f"positives={int(fu.target.sum())}"]
            for name, v in zip(fu.members + ["fused"], list(fu.member_verdicts) + [fu.fused]):
                c = fu.counts(v)
                lines += [f"{name}.tp={c.tp}", f"{name}.fp={c.fp}", f"{name}.tn={c.tn}",
                          f"{name}.fn={c.fn}", f"{name}.f1={_fmt(f1(c))}",
                          f"{name}.macro_f1={_fmt(macro_f1(c))}", f"{name}.recall={_fmt(c.recall())}"]
            for i, rec in enumerate(fu.fold_recalls()):
                lines += [f"fold.{i}.{k}.recall={_fmt(v)}" for k, v in rec.items()]
            if fu.rule.kind is FusionKind.ANY_POSITIVE:
                lines.append(f"recall_dominates={str(fu.recall_dominates()).lower()}")
        return "\n".join(lines) + "\n"

    def metrics_frame(self) -> pd.DataFrame:
        rows = []
        for m in self.models:
            r = m.report
            rows.append({"task": self.config.task.value, "level": m.level.value,
                         "components": m.component, "model": m.name, "rows": len(r.target),
                         "positives": int(r.target.sum()), "f1": r.pooled_f1,
                         "macro_f1": r.pooled_macro_f1, "auc": r.pooled_auc,
                         "mean_fold_f1": r.mean_fold_f1, "mean_fold_macro_f1": r.mean_fold_macro_f1})
        return pd.DataFrame(rows)

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        (out / "roc").mkdir(parents=True, exist_ok=True)
        (out / "models").mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.to_text(), encoding="utf-8")
        self.metrics_frame().to_csv(out / "metrics.csv", index=False, lineterminator="\n",
                                    float_format="%.6f")
        pd.DataFrame(self.level_summary()).to_csv(out / "summary.csv", index=False,
                                                  lineterminator="\n", float_format="%.6f")
        imp = [{"model": m.name, "rank": i, "feature": c, "gain": g}
               for m in self.models for i, (c, g) in enumerate(m.top_features(), 1)]
        pd.DataFrame(imp, columns=["model", "rank", "feature", "gain"]).to_csv(
            out / "importance.csv", index=False, lineterminator="\n")
        for m in self.models:
            curve = m.report.pooled_roc()
            if curve is not None:
                write_roc_csv(curve, out / "roc" / f"{_safe(m.name)}.csv")
            for fold in m.report.folds:
                if fold.model is not None:
                    save_model(fold.model, out / "models" / f"{_safe(m.name)}.fold{fold.index}.model")
        # wall-clock numbers live apart from the report so the report stays reproducible
        (out / "timing.txt").write_text(
            "".join(f"{k}={v:.3f}\n" for k, v in self.timing.items()), encoding="utf-8")
        return out


# -- orchestration -------------------------------------------------------------

class _Stage:
    def __init__(self, name: str, timing: dict):
        self.name = name
        self.timing = timing

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timing[self.name] = self.timing.get(self.name, 0.0) + time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, PipelineError):
            raise PipelineError(self.name, exc) from exc
        return False


def _verdict_frame(table: FeatureTable, report: EvalReport, component_id: str | None) -> pd.DataFrame:
    frame = table.row_keys.copy()
    if component_id is not None and "component_id" not in frame.columns:
        frame["component_id"] = component_id
    frame["verdict"] = report.predicted.astype(np.int8)
    frame["probability"] = report.scores
    if table.level is Level.PIN:
        return lift_pin_verdicts(frame)
    return frame[COMPONENT_KEY + ["verdict", "probability"]]


def _fit(config: RunConfig, table: FeatureTable, name: str, level: Level, component: str,
         jobs: int, verdict_component: str | None = None) -> ModelResult | str:
    """Cross-validate one table, or return the reason it was skipped."""
    n_pos = int(table.target.sum())
    n_neg = table.n_rows - n_pos
    if min(n_pos, n_neg) < config.folds:
        return f"positives={n_pos} negatives={n_neg} fewer than folds={config.folds}"
    report = cross_validate(table, config.train, k=config.folds, seed=config.seed, jobs=jobs,
                            name=name)
    return ModelResult(name, level, component, report,
                       _verdict_frame(table, report, verdict_component))


def _pool_map(fn, items, jobs):
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _fuse(config: RunConfig, models: list[ModelResult], aoi) -> FusionResult | None:
    by_level: dict[Level, list[pd.DataFrame]] = {}
    for m in models:
        by_level.setdefault(m.level, []).append(m.verdicts)
    if len(by_level) < 2:
        return None
    members = [lvl.value for lvl in config.levels if lvl in by_level]
    merged = None
    for lvl in config.levels:
        if lvl not in by_level:
            continue
        frame = pd.concat(by_level[lvl], ignore_index=True).rename(
            columns={"verdict": f"v.{lvl.value}", "probability": f"p.{lvl.value}"})
        merged = frame if merged is None else merged.merge(frame, on=COMPONENT_KEY, how="inner")
    merged = merged.sort_values(COMPONENT_KEY, kind="stable").reset_index(drop=True)
    truth = component_truth(config.task, aoi)
    merged = merged.merge(truth, on=COMPONENT_KEY, how="left")
    if config.task is ClassificationTask.C1:
        merged["target"] = merged["target"].fillna(0)
    else:
        merged = merged[merged["target"].notna()].reset_index(drop=True)
    if merged.empty:
        return None
    verdicts = np.vstack([merged[f"v.{m}"].to_numpy(dtype=np.int8) for m in members])
    probs = np.vstack([merged[f"p.{m}"].to_numpy(dtype=np.float64) for m in members])
    fused = config.fusion.apply(verdicts, probs)
    keys = merged[COMPONENT_KEY]
    holder = FeatureTable((), np.zeros((len(keys), 0)), keys, Level.COMPONENT)
    fold_of_item = np.zeros(len(keys), dtype=np.int64)
    n_boards = int(holder.board_ids().max()) + 1
    if n_boards >= config.folds:
        for i, (_, test) in enumerate(feat.kfold_split(holder, config.folds, config.seed)):
            fold_of_item[test] = i
    return FusionResult(members, config.fusion, keys, merged["target"].to_numpy(dtype=np.int8),
                        verdicts, fused, fold_of_item)


def run_records(config: RunConfig, pins: PinFrame, aoi: Sequence[AoiRecord], jobs: int | None = None,
                timing: dict | None = None, inputs: dict | None = None) -> RunReport:
    """Run every configured level on in-memory records."""
    jobs = jobs or os.cpu_count() or 1
    timing = {} if timing is None else timing
    with _Stage("config", timing):
        config.validate()
    task = config.task
    models: list[ModelResult] = []
    skipped: list[tuple[str, str]] = []

    def collect(outcomes, names):
        for name, outcome in zip(names, outcomes):
            if isinstance(outcome, ModelResult):
                models.append(outcome)
            else:
                skipped.append((name, outcome))

    with _Stage("features", timing):
        layout = infer_layout(pins)
        aoi_table = feat.aoi_frame(aoi)
    if Level.PIN in config.levels:
        with _Stage("features", timing):
            table = feat.build_pin_table(pins, config.encoding)
        with _Stage("labels", timing):
            table = feat.attach_labels(task, table, aoi_table)
        with _Stage("train", timing):
            outcome = _fit(config, table, "pin", Level.PIN, "All", jobs)
            if not isinstance(outcome, ModelResult):
                raise TrainingError(f"pin-level model cannot be trained: {outcome}")
            models.append(outcome)
    if Level.COMPONENT in config.levels:
        if config.component_mode is ComponentMode.COMBINED:
            with _Stage("features", timing):
                table = feat.build_combined_component_table(pins, layout, config.encoding)
            with _Stage("labels", timing):
                table = feat.attach_labels(task, table, aoi_table)
            with _Stage("train", timing):
                collect([_fit(config, table, "component/All", Level.COMPONENT, "All", jobs)],
                        ["component/All"])
        else:
            with _Stage("features", timing):
                tables = list(feat.iter_component_tables(pins, layout, config.encoding))
            with _Stage("labels", timing):
                tables = [feat.attach_labels(task, t, aoi_table) for t in tables]
            names = [f"component/{cid}" for cid in layout.component_ids]
            with _Stage("train", timing):
                outcomes = _pool_map(
                    lambda a: _fit(config, a[0], a[1], Level.COMPONENT, a[1].split("/", 1)[1], 1),
                    list(zip(tables, names)), jobs)
            collect(outcomes, names)
    if Level.BOARD in config.levels:
        with _Stage("features", timing):
            board = feat.build_board_table(pins, layout, config.encoding)
            ranked = [c for c in rank_components_by_defects(aoi) if c in layout.components]
            targets = ranked[:config.top_n_components] if config.top_n_components else ranked
        with _Stage("labels", timing):
            tables = [feat.attach_labels(task, board, aoi_table, component_id=c) for c in targets]
        names = [f"board/{c}" for c in targets]
        with _Stage("train", timing):
            outcomes = _pool_map(
                lambda a: _fit(config, a[0], a[1], Level.BOARD, a[2], 1, verdict_component=a[2]),
                list(zip(tables, names, targets)), jobs)
        collect(outcomes, names)
    with _Stage("fusion", timing):
        fusion = _fuse(config, models, aoi)
    return RunReport(config, models, skipped, fusion, dict(inputs or {}), timing)


def run(config: RunConfig, spi_path, aoi_path, schema: SchemaConfig | None = None,
        jobs: int | None = None, out_dir=None) -> RunReport:
    """Ingest both CSV files, run the configured models, optionally write the report."""
    schema = schema or SchemaConfig()
    timing: dict = {}
    with _Stage("ingest", timing):
        pins, spi_report = read_spi(spi_path, schema)
        aoi, aoi_report = read_aoi(aoi_path, schema)
    inputs = {
        "spi.rows_read": spi_report.rows_read, "spi.rows_kept": spi_report.rows_kept,
        "spi.rows_dropped_nan": spi_report.rows_dropped_nan,
        "spi.rows_dropped_malformed": spi_report.rows_dropped_malformed,
        "aoi.rows_read": aoi_report.rows_read, "aoi.rows_kept": aoi_report.rows_kept,
        "aoi.rows_dropped_malformed": aoi_report.rows_dropped_malformed,
    }
    t0 = time.perf_counter()
    report = run_records(config, pins, aoi, jobs=jobs, timing=timing, inputs=inputs)
    timing["total"] = timing.get("ingest", 0.0) + time.perf_counter() - t0
    if out_dir is not None:
        with _Stage("report", timing):
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "ingest_spi.txt").write_text(spi_report.to_text(), encoding="utf-8")
            (Path(out_dir) / "ingest_aoi.txt").write_text(aoi_report.to_text(), encoding="utf-8")
            report.write(out_dir)
    return report
