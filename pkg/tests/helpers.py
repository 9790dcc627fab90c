"""Small builders shared by the unit and acceptance tests."""
import math

import numpy as np
import pandas as pd
from hypothesis import strategies as st
from scipy.special import expit

from spidefect.core import AoiRecord, BoardLayout, FeatureTable, Level, OperatorLabel, RepairLabel
from spidefect.features import (attach_labels_c1, attach_labels_c2, attach_labels_c3, build_board_table,
                                build_pin_table, iter_component_tables)
from spidefect.gbdt import TrainConfig, train
from spidefect.gbdt.booster import class_weights

from spidefect.synthgen import GeneratorConfig, generate

from oracles import brute_force_root_split, nested_loop_c1, nested_loop_inner


def make_table(X, y=None, names=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, f = X.shape
    keys = pd.DataFrame({"panel_id": 1, "figure_id": 1, "component_id": "X", "pin_number": np.arange(n)})
    names = names or [f"f{j}" for j in range(f)]
    return FeatureTable(names, X, keys, Level.PIN, None if y is None else np.asarray(y))


def random_dataset(rng, max_rows=64, max_features=3):
    """Small dataset with deliberate value ties and both classes present."""
    n = int(rng.integers(4, max_rows + 1))
    f = int(rng.integers(1, max_features + 1))
    levels = int(rng.integers(2, 12))
    X = rng.integers(0, levels, size=(n, f)).astype(float) + rng.choice([0.0, 0.25], size=(n, f))
    y = (rng.random(n) < rng.uniform(0.1, 0.9)).astype(np.int8)
    y[0], y[1] = 0, 1
    return X, y


def root_split_check(X, y, cfg: TrainConfig):
    """Compare the trainer's first root split with exhaustive enumeration.

    Returns ``(ok, detail)``. Candidates whose oracle gain is within 1e-9 of
    the best count as tied; the trainer must pick one of them (its own
    tie-break is lowest feature, then lowest threshold, up to rounding in the
    prefix sums) and report the same gain within 1e-9. A child hessian equal
    to ``min_child_hessian`` sits on the admissibility boundary, where the
    outcome depends on summation order, so the oracle is run with the bound
    nudged by 1e-9 either way and the trainer must land between the two.
    """
    cfg = TrainConfig(**{**cfg.__dict__, "num_rounds": 1, "max_depth": 1})
    model = train(make_table(X, y), cfg)
    w = class_weights(y.astype(float), cfg.positive_class_weight)
    p = expit(model.base_score)
    g = w * (p - y)
    h = w * p * (1 - p)
    lam, gamma, mch = cfg.l2_leaf_reg, cfg.min_split_gain, cfg.min_child_hessian
    strict = brute_force_root_split(X, g, h, lam, gamma, mch + 1e-9)
    lenient = brute_force_root_split(X, g, h, lam, gamma, max(mch - 1e-9, 0.0))
    lo = strict[2] if strict else 0.0
    hi = lenient[2] if lenient else 0.0
    tree = model.trees[0]
    got = None if tree.feature[0] < 0 else (int(tree.feature[0]), float(tree.threshold[0]), float(tree.gain[0]))
    detail = f"oracle {strict} .. {lenient}, trainer {got}"
    if got is None or got[2] <= 1e-9:
        # a mathematically zero gain may round to either side of zero
        return lo <= 1e-9, detail
    if not lo - 1e-9 <= got[2] <= hi + 1e-9:
        return False, detail
    # the trainer's split must be an admissible optimum with the gain it reports
    lenient_cfg = TrainConfig(**{**cfg.__dict__, "min_child_hessian": max(mch - 1e-9, 0.0)})
    tied = tied_candidates(X, g, h, lenient_cfg, got[2], tol=1e-9)
    return (got[0], got[1]) in tied, detail


def tied_candidates(X, g, h, cfg, best_gain, tol=1e-12):
    """Every (feature, threshold) whose gain is within ``tol`` of ``best_gain``."""
    lam, gamma, mch = cfg.l2_leaf_reg, cfg.min_split_gain, cfg.min_child_hessian
    G, H = math.fsum(g), math.fsum(h)
    out = set()
    for f in range(X.shape[1]):
        values = sorted(set(X[:, f].tolist()))
        for a, b in zip(values, values[1:]):
            thr = (a + b) / 2
            if thr <= a:
                thr = b
            left = X[:, f] < thr
            gl, hl = math.fsum(g[left]), math.fsum(h[left])
            gr, hr = math.fsum(g[~left]), math.fsum(h[~left])
            if hl < mch or hr < mch:
                continue
            gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - G * G / (H + lam)) - gamma
            if abs(gain - best_gain) <= tol:
                out.add((f, thr))
    return out


# -- join instances ------------------------------------------------------------

mini_layout = BoardLayout(components={"A": 2, "B": 1, "C": 3}, figures_per_panel=2)


@st.composite
def join_instances(draw):
    panels = draw(st.integers(1, 5))  # up to 10 boards
    n = draw(st.integers(0, 25))
    recs = []
    for _ in range(n):
        comp = draw(st.sampled_from(sorted(mini_layout.components)))
        pin = draw(st.integers(1, mini_layout.components[comp]))
        if draw(st.integers(0, 19)) == 0:  # about 5% blanked
            pin = None
        op = draw(st.sampled_from([OperatorLabel.GOOD, OperatorLabel.BAD]))
        rep = (draw(st.sampled_from([RepairLabel.NOT_POSSIBLE_TO_REPAIR, RepairLabel.FALSE_SCRAP, None]))
               if op is OperatorLabel.BAD else None)
        recs.append(AoiRecord(draw(st.integers(1, panels + 1)), draw(st.integers(1, 2)), comp, pin,
                        draw(st.sampled_from(["lean soldering", "translated", "misaligned", "other"])), op, rep))
    return panels, recs


def check_join(panels, recs):
    """Assert all three label joins agree with the nested-loop oracle on every level."""
    pins, _ = generate(GeneratorConfig(seed=0, num_panels=panels, layout=mini_layout, pin_defect_rate=0.0))
    pin_t = build_pin_table(pins)
    comp_tables = list(iter_component_tables(pins, mini_layout))
    board_t = build_board_table(pins, mini_layout)
    cases = [(pin_t, "pin", None)] + [(t, "component", None) for t in comp_tables]
    cases += [(board_t, "board", c) for c in mini_layout.component_ids]
    for table, level, comp in cases:
        rows = [tuple(r) for r in table.row_keys[list(table.row_keys.columns)].itertuples(index=False)]
        if level == "component":
            comp_id = table.meta["component_id"]
            scoped = [a for a in recs if a.component_id == comp_id]
        else:
            scoped = recs
        c1 = attach_labels_c1(table, recs, comp)
        assert c1.target.tolist() == nested_loop_c1(rows, scoped, level, comp)
        for task, fn in (("c2", attach_labels_c2), ("c3", attach_labels_c3)):
            got = fn(table, recs, comp)
            want = nested_loop_inner(rows, scoped, level, task, comp)
            kept = [rows.index(tuple(k)) for k in got.row_keys[list(table.row_keys.columns)]
                    .itertuples(index=False)]
            assert kept == sorted(want)
            assert got.target.tolist() == [want[i][0] for i in kept]
            labels = got.rows[:, table.width:table.width + 4]
            for row_labels, i in zip(labels, kept):
                expect = [int(tok in want[i][1]) for tok in
                          ("lean soldering", "translated", "misaligned", "other")]
                assert row_labels.tolist() == expect
