import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from spidefect.core import AoiRecord, BoardLayout, Level, OperatorLabel, PinKey
from spidefect.errors import ConfigError, TrainingError
from spidefect.gbdt import TrainConfig
from spidefect.ingest import write_aoi, write_spi
from spidefect.pipeline import (FusionKind, FusionRule, PipelineError, RunConfig,
                                infer_layout, lift_pin_verdicts, rank_components_by_defects, run,
                                run_records)
from spidefect.synthgen import GeneratorConfig, generate

FAST = TrainConfig(num_rounds=3, max_depth=2)
LAYOUT = BoardLayout(components={"C1": 2, "C2": 2, "U1": 4}, figures_per_panel=4)


def rec(panel, figure, comp, pin=1, op=OperatorLabel.GOOD, rep=None):
    return AoiRecord(panel, figure, comp, pin, "other", op, rep)


@pytest.fixture(scope="module")
def toy():
    return generate(GeneratorConfig(seed=3, num_panels=25, layout=LAYOUT, pin_defect_rate=0.08,
                                    planted_signal_strength=2.0, operator_bad_rate=0.4))


# -- fusion rules ----------------------------------------------------------------

def test_any_positive_is_union():
    v = np.array([[0, 1, 0, 0], [0, 0, 1, 0]])
    assert FusionRule(FusionKind.ANY_POSITIVE).apply(v, v).tolist() == [0, 1, 1, 0]


def test_majority_vote_ties_positive():
    v = np.array([[1, 1, 0], [0, 1, 0]])
    assert FusionRule("majority_vote").apply(v, v).tolist() == [1, 1, 0]
    v3 = np.array([[1, 1, 0], [0, 1, 0], [0, 1, 1]])
    assert FusionRule("majority_vote").apply(v3, v3).tolist() == [0, 1, 0]


def test_mean_probability():
    p = np.array([[0.2, 0.9], [0.6, 0.3]])
    assert FusionRule("mean_probability", 0.4).apply(p > 0.5, p).tolist() == [1, 1]
    assert FusionRule("mean_probability", 0.61).apply(p > 0.5, p).tolist() == [0, 0]
    with pytest.raises(ConfigError):
        FusionRule("mean_probability", 1.5)


@given(st.lists(st.lists(st.integers(0, 1), min_size=6, max_size=6), min_size=1, max_size=4))
def test_any_positive_recall_dominates(rows):
    v = np.array(rows)
    truth = np.array([1, 1, 1, 0, 0, 1])
    fused = FusionRule().apply(v, v)
    recall = lambda x: (x & truth).sum() / truth.sum()
    assert recall(fused) >= max(recall(r) for r in v)


# -- helpers ---------------------------------------------------------------------

def test_rank_components():
    aoi = [rec(1, 1, c) for c in "AAAAABBCCCCC"]
    assert rank_components_by_defects(aoi) == ["A", "C", "B"]
    many = [rec(1, 1, f"K{i:02d}") for i in range(50) for _ in range(50 - i)]
    assert rank_components_by_defects(many)[:35] == [f"K{i:02d}" for i in range(35)]
    with pytest.raises(ConfigError):
        rank_components_by_defects([])


def test_lift_pin_verdicts():
    v = {PinKey(1, 1, "U1", 1): 0, PinKey(1, 1, "U1", 2): 0, PinKey(1, 1, "U1", 3): 1,
         PinKey(1, 1, "C1", 1): 0, PinKey(1, 1, "C1", 2): 0}
    p = {k: 0.1 for k in v}
    p[PinKey(1, 1, "C1", 1)] = 0.2
    p[PinKey(1, 1, "C1", 2)] = 0.7
    out = lift_pin_verdicts(v, p).set_index("component_id")
    assert out.loc["U1", "verdict"] == 1 and out.loc["C1", "verdict"] == 0
    assert out.loc["C1", "probability"] == 0.7


def test_infer_layout(toy):
    pins, _ = toy
    layout = infer_layout(pins)
    assert layout.components == LAYOUT.components and layout.figures_per_panel == 4


# -- config ----------------------------------------------------------------------

def test_board_c2_rejected_unless_allowed(toy, caplog):
    pins, aoi = toy
    cfg = RunConfig(task="c2", levels=("board",), train=FAST)
    with pytest.raises(PipelineError, match=r"^\[config\] ConfigError"):
        run_records(cfg, pins, aoi)
    allowed = RunConfig(task="c2", levels=("board",), train=FAST, allow_board_c2c3=True,
                        top_n_components=1)
    run_records(allowed, pins, aoi, jobs=1)
    assert "board-level c2 models enabled" in caplog.text


def test_levels_normalized():
    cfg = RunConfig(levels=("board", "pin", "pin"))
    assert cfg.levels == (Level.PIN, Level.BOARD)
    with pytest.raises(ValueError):
        RunConfig(task="c9")


# -- runs ------------------------------------------------------------------------

def test_three_level_run_and_fusion(toy):
    pins, aoi = toy
    cfg = RunConfig(levels=("pin", "component", "board"), train=FAST, top_n_components=2)
    report = run_records(cfg, pins, aoi, jobs=2)
    names = [m.name for m in report.models]
    assert names[0] == "pin"
    assert names[1:4] == ["component/C1", "component/C2", "component/U1"]
    assert len([n for n in names if n.startswith("board/")]) == 2
    fu = report.fusion
    assert fu.members == ["pin", "component", "board"]
    assert fu.recall_dominates()
    text = report.to_text()
    assert "recall_dominates=true" in text and "summary.fused." in text
    assert "summary.board.components=Top 2" in text


def test_combined_mode(toy):
    pins, aoi = toy
    cfg = RunConfig(levels=("component",), component_mode="combined", train=FAST)
    report = run_records(cfg, pins, aoi, jobs=1)
    assert [m.name for m in report.models] == ["component/All"]
    assert report.models[0].report.meta["rows"] == 100 * 3


def test_c3_component_run(toy):
    pins, aoi = toy
    cfg = RunConfig(task="c3", levels=("component",), component_mode="combined", train=FAST, folds=2)
    report = run_records(cfg, pins, aoi, jobs=1)
    model = report.models[0]
    assert "OperatorLabel" in model.report.folds[0].features
    # c3 rows are the AOI-flagged components only
    assert model.report.meta["rows"] < 100 * 3


def test_skipped_components_are_reported(toy):
    pins, aoi = toy
    few = [a for a in aoi if a.component_id != "C2"][:3] + [a for a in aoi if a.component_id == "C2"][:2]
    cfg = RunConfig(levels=("component",), train=FAST)
    report = run_records(cfg, pins, few, jobs=1)
    assert any(name == "component/C2" for name, _ in report.skipped)
    assert "skipped.component/C2=positives=2" in report.to_text()


def test_untrainable_pin_model(toy):
    pins, _ = toy
    with pytest.raises(PipelineError, match=r"^\[train\] TrainingError") as err:
        run_records(RunConfig(train=FAST), pins, [rec(1, 1, "C1")])
    assert isinstance(err.value.cause, TrainingError)


def test_report_is_jobs_independent(toy, tmp_path):
    pins, aoi = toy
    cfg = RunConfig(levels=("pin", "component"), train=FAST)
    a = run_records(cfg, pins, aoi, jobs=1)
    b = run_records(cfg, pins, aoi, jobs=4)
    assert a.to_text() == b.to_text()
    a.write(tmp_path / "a")
    b.write(tmp_path / "b")
    for name in ("report.txt", "metrics.csv", "summary.csv", "importance.csv", "roc/pin.csv",
                 "models/component__U1.fold0.model"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_run_from_files(toy, tmp_path):
    pins, aoi = toy
    write_spi(pins, tmp_path / "spi.csv")
    write_aoi(aoi, tmp_path / "aoi.csv")
    out = tmp_path / "out"
    report = run(RunConfig(train=FAST), tmp_path / "spi.csv", tmp_path / "aoi.csv", jobs=1, out_dir=out)
    assert report.inputs["spi.rows_kept"] == len(pins)
    for name in ("report.txt", "ingest_spi.txt", "ingest_aoi.txt", "timing.txt", "metrics.csv"):
        assert (out / name).exists()
    assert "ingest=" in (out / "timing.txt").read_text()
    assert "seconds" not in (out / "report.txt").read_text()
    summary = pd.read_csv(out / "summary.csv")
    assert list(summary.columns[:4]) == ["task", "level", "components", "models"]


def test_missing_file_is_ingest_error(tmp_path):
    with pytest.raises(PipelineError, match=r"^\[ingest\]"):
        run(RunConfig(), tmp_path / "nope.csv", tmp_path / "nope2.csv")


@pytest.mark.slow
def test_default_layout_model_count():
    pins, aoi = generate(GeneratorConfig(seed=21, num_panels=20, pin_defect_rate=0.05))
    cfg = RunConfig(levels=("pin", "component", "board"), train=TrainConfig(num_rounds=2, max_depth=2),
                    top_n_components=35)
    report = run_records(cfg, pins, aoi, jobs=1)
    assert not report.skipped
    levels = [m.level for m in report.models]
    assert levels.count(Level.PIN) == 1
    assert levels.count(Level.COMPONENT) == 128
    assert levels.count(Level.BOARD) == 35
    assert report.fusion.recall_dominates()
