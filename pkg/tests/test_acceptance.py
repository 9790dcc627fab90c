"""Acceptance criteria, each checked at its stated tolerance.

Every test appends one ``PASS``/``FAIL`` line to the summary printed at the
end of the session. Criteria that cannot be met are still checked as
stated and left failing.
"""
import math
import os
import time

import numpy as np
import pytest
from hypothesis import given, settings

from spidefect import cli
from spidefect.core import OperatorLabel, RepairLabel, default_layout, total_pins
from spidefect.evaluation import ConfusionCounts, f1, roc
from spidefect.gbdt import TrainConfig, dumps, load_model, save_model, train
from spidefect.ingest import SchemaConfig, read_aoi, read_spi, write_aoi, write_spi
from spidefect.pipeline import RunConfig, run, run_records
from spidefect.synthgen import GeneratorConfig, generate

from conftest import ACCEPTANCE_LINES
from helpers import check_join, join_instances, make_table, random_dataset, root_split_check
from oracles import binomial_sigma, mann_whitney_auc

DESKTOP_CORES = 8


def record(criterion: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {criterion:<4} {detail}")


# -- 1. layout identities ------------------------------------------------------

def test_c1_layout_identities():
    t0 = time.perf_counter()
    layout = default_layout()
    n = total_pins(layout)
    boards = 1923 * 8 + 3
    elapsed = time.perf_counter() - t0
    cfg = GeneratorConfig(num_panels=1924, num_boards=boards, layout=layout)
    cfg.validate()
    ok = len(layout.components) == 128 and n == 389 and boards * n == 5_985_543 and elapsed < 1.0
    record("1a", ok, f"128 components, {n} pins/board, {boards} boards x {n} = {boards * n} ({elapsed:.3f}s)")
    assert cfg.board_count == boards
    assert ok


def test_c1_literal_panel_product():
    product = 1924 * 8 * total_pins(default_layout())
    ok = product == 5_985_543
    record("1b", ok, f"1924 x 8 x 389 = {product} (stated 5,985,543; the last panel holds 3 boards)")
    assert ok


# -- 2. split oracle -----------------------------------------------------------

def test_c2_split_oracle():
    rng = np.random.default_rng(2024)
    configs = [TrainConfig(), TrainConfig(l2_leaf_reg=0.0, min_child_hessian=0.0),
               TrainConfig(l2_leaf_reg=5.0, min_split_gain=0.1), TrainConfig(positive_class_weight=3.0)]
    t0 = time.perf_counter()
    bad = []
    for i in range(200):
        X, y = random_dataset(rng, max_rows=64, max_features=3)
        ok, detail = root_split_check(X, y, configs[i % len(configs)])
        if not ok:
            bad.append(detail)
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 10.0
    record("2", ok, f"200 datasets, {len(bad)} root-split mismatches ({elapsed:.2f}s)")
    assert ok, bad[:3]


# -- 3. loss monotonicity ------------------------------------------------------

def test_c3_loss_monotonicity():
    rng = np.random.default_rng(3)
    violations = 0
    for _ in range(20):
        X, y = random_dataset(rng, max_rows=200, max_features=4)
        model = train(make_table(X, y), TrainConfig(num_rounds=50, learning_rate=0.1, max_depth=3))
        loss = np.array(model.train_loss)
        # a one-ulp wobble after a no-split round is rounding, not an increase
        violations += int(np.sum(np.diff(loss) > 1e-12 * loss[0]))
    record("3", violations == 0, f"20 datasets x 50 rounds, {violations} loss increases")
    assert violations == 0


# -- 4. metric oracles ---------------------------------------------------------

def test_c4_metric_oracles():
    f = f1(ConfusionCounts(tp=2, fp=1, fn=3))
    a = roc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]).auc
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 10_001))
        t = rng.random(n) < rng.uniform(0.05, 0.95)
        t[0], t[1] = True, False
        s = rng.integers(0, int(rng.integers(2, 100)), n) / 7 if rng.random() < 0.5 else rng.random(n)
        worst = max(worst, abs(roc(s, t).auc - mann_whitney_auc(s, t)))
    ok = f == 0.5 and a == 0.75 and worst <= 1e-9
    record("4", ok, f"f1 example {f}, auc example {a}, max |auc - mann-whitney| {worst:.2e} over 50")
    assert ok


# -- 5. join oracle ------------------------------------------------------------

_join_failures = []


@settings(max_examples=50, database=None)
@given(join_instances())
def _join_case(inst):
    try:
        check_join(*inst)
    except AssertionError:
        _join_failures.append(inst)
        raise


def test_c5_join_oracle():
    try:
        _join_case()
    finally:
        record("5", not _join_failures, f"50 instances, c1/c2/c3 targets vs nested-loop oracle, "
                                        f"{len(_join_failures)} mismatching")


# -- 6 and 7. end-to-end planted and null signal -------------------------------

def _end_to_end(tmp_path_factory, strength):
    d = tmp_path_factory.mktemp(f"e2e_{strength}")
    pins, aoi = generate(GeneratorConfig(seed=7, num_panels=200, planted_signal_strength=strength,
                                         pin_defect_rate=0.01))
    write_spi(pins, d / "spi.csv")
    write_aoi(aoi, d / "aoi.csv")
    t0 = time.perf_counter()
    report = run(RunConfig(task="c1", levels=("pin",), folds=5), d / "spi.csv", d / "aoi.csv",
                 jobs=os.cpu_count(), out_dir=d / "out")
    return report, time.perf_counter() - t0


@pytest.fixture(scope="module")
def planted_run(tmp_path_factory):
    return _end_to_end(tmp_path_factory, 2.0)


@pytest.mark.slow
def test_c6_planted_auc(planted_run):
    report, _ = planted_run
    auc = report.models[0].report.pooled_auc
    record("6a", auc >= 0.85, f"planted signal pooled AUC {auc:.4f} (>= 0.85)")
    assert auc >= 0.85


@pytest.mark.slow
def test_c6_planted_f1(planted_run):
    report, _ = planted_run
    score = report.models[0].report.pooled_f1
    record("6b", score >= 0.30, f"planted signal pooled F1 {score:.4f} (>= 0.30)")
    assert score >= 0.30


@pytest.mark.slow
def test_c6_runtime(planted_run):
    report, wall = planted_run
    cores = os.cpu_count() or 1
    if cores >= DESKTOP_CORES:
        record("6c", wall < 120, f"end-to-end run {wall:.1f}s on {cores} cores (< 120s)")
        assert wall < 120
        return
    # With fewer cores the folds ran one after another. On a desktop they run
    # side by side, so the wall time is the serial stages plus the slowest fold.
    folds = [f.seconds for f in report.models[0].report.folds]
    serial = report.timing["total"] - report.timing["train"]
    projected = serial + max(folds)
    ACCEPTANCE_LINES.append(
        f"N/A   6c   runtime not measurable on {cores} core(s): measured {wall:.1f}s serial; "
        f"projected {projected:.1f}s on {DESKTOP_CORES} cores (< 120s)")
    pytest.skip(f"needs {DESKTOP_CORES} cores to measure")


@pytest.mark.slow
def test_c7_null_signal(tmp_path_factory):
    report, _ = _end_to_end(tmp_path_factory, 0.0)
    auc = report.models[0].report.pooled_auc
    ok = 0.45 <= auc <= 0.55
    record("7", ok, f"null signal pooled AUC {auc:.4f} (in [0.45, 0.55])")
    assert ok


# -- 8. cascade rates ----------------------------------------------------------

def test_c8_cascade_rates(default_data):
    pins, aoi = default_data
    bad = [a for a in aoi if a.operator_label is OperatorLabel.BAD]
    nrep = sum(a.repair_label is RepairLabel.NOT_POSSIBLE_TO_REPAIR for a in bad)
    checks = [("aoi/pins", len(aoi), len(pins), 0.004), ("bad/aoi", len(bad), len(aoi), 0.04),
              ("not_repairable/bad", nrep, len(bad), 0.805)]
    parts, ok = [], len(pins) >= 100_000
    for name, k, n, p in checks:
        z = (k - p * n) / binomial_sigma(n, p)
        ok &= abs(z) <= 3
        parts.append(f"{name} {k / n:.4f} (z={z:+.2f})")
    record("8", ok, f"{len(pins)} pins: " + ", ".join(parts))
    assert ok


# -- 9. fusion recall ----------------------------------------------------------

def test_c9_fusion_recall():
    pins, aoi = generate(GeneratorConfig(seed=9, num_panels=30, pin_defect_rate=0.02,
                                         planted_signal_strength=2.0))
    cfg = RunConfig(levels=("pin", "component", "board"), train=TrainConfig(num_rounds=5, max_depth=3),
                    top_n_components=10)
    report = run_records(cfg, pins, aoi, jobs=1)
    folds = report.fusion.fold_recalls()
    members = report.fusion.members
    bad = [i for i, r in enumerate(folds) if r["fused"] < max(r[m] for m in members)]
    ok = not bad and len(folds) == cfg.folds
    record("9", ok, f"any_positive over {'+'.join(members)}: fused recall >= every member on "
                    f"{len(folds) - len(bad)}/{len(folds)} folds")
    assert ok


# -- 10. determinism -----------------------------------------------------------

def test_c10_jobs_determinism(tmp_path, capsys):
    pins, aoi = generate(GeneratorConfig(seed=10, num_panels=12, pin_defect_rate=0.02,
                                         planted_signal_strength=2.0, operator_bad_rate=0.3))
    write_spi(pins, tmp_path / "spi.csv")
    write_aoi(aoi, tmp_path / "aoi.csv")
    outs = []
    for jobs in (1, 4):
        out = tmp_path / f"jobs{jobs}"
        code = cli.main(["run", "--spi", str(tmp_path / "spi.csv"), "--aoi", str(tmp_path / "aoi.csv"),
                         "--levels", "pin,component,board", "--top-n", "5", "--rounds", "10",
                         "--out-dir", str(out), "--jobs", str(jobs)])
        assert code == 0
        outs.append(out)
    capsys.readouterr()
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    files = [p for p in files if p.name != "timing.txt"]
    differing = [str(p) for p in files if (outs[0] / p).read_bytes() != (outs[1] / p).read_bytes()]
    ok = not differing and (outs[0] / "report.txt").exists()
    record("10", ok, f"--jobs 1 vs 4: {len(files)} output files, {len(differing)} differing")
    assert ok, differing


# -- 11. round trips -----------------------------------------------------------

def test_c11_round_trips(tmp_path):
    rng = np.random.default_rng(11)
    X, y = random_dataset(rng, max_rows=500, max_features=5)
    X = X + rng.normal(scale=1e-3, size=X.shape)
    model = train(make_table(X, y), TrainConfig(num_rounds=30, max_depth=5))
    save_model(model, tmp_path / "m.model")
    back = load_model(tmp_path / "m.model")
    Z = rng.normal(loc=5, scale=4, size=(10_000, X.shape[1]))
    model_ok = np.array_equal(model.predict_proba(Z), back.predict_proba(Z)) and dumps(back) == dumps(model)

    pins, aoi = generate(GeneratorConfig(seed=11, num_panels=5))
    write_spi(pins, tmp_path / "spi.csv")
    write_aoi(aoi, tmp_path / "aoi.csv")
    pins_back, _ = read_spi(tmp_path / "spi.csv")
    aoi_back, _ = read_aoi(tmp_path / "aoi.csv")
    a, b = pins.numeric, pins_back.numeric
    rel = float(np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-300))) if a.size else 0.0
    records_ok = pins_back.equals(pins, rtol=1e-9) and aoi_back == aoi and rel <= 1e-9
    ok = model_ok and records_ok
    record("11", ok, f"model predictions bit-exact on 10^4 rows: {model_ok}; "
                     f"record round trip max rel error {rel:.1e}, AOI equal: {aoi_back == aoi}")
    assert ok


# -- 12. public challenge data (informational) ----------------------------------

def test_c12_challenge_data(tmp_path):
    spi, aoi = os.environ.get("SPIDEFECT_CHALLENGE_SPI"), os.environ.get("SPIDEFECT_CHALLENGE_AOI")
    if not (spi and aoi):
        ACCEPTANCE_LINES.append("INFO  12   challenge data not supplied "
                                "(set SPIDEFECT_CHALLENGE_SPI and SPIDEFECT_CHALLENGE_AOI)")
        pytest.skip("challenge data not supplied")
    conf = os.environ.get("SPIDEFECT_CHALLENGE_CONFIG")
    schema = cli.schema_config(cli.load_config(conf)) if conf else SchemaConfig()
    report = run(RunConfig(task="c1", levels=("component",), folds=5), spi, aoi, schema,
                 out_dir=tmp_path / "out")
    row = report.level_summary()[0]
    value = row["f1"]
    shown = "nan" if math.isnan(value) else f"{value:.4f}"
    ACCEPTANCE_LINES.append(f"INFO  12   challenge data c1 component-level 5-fold F1 {shown} "
                            f"(reference 0.55)")
