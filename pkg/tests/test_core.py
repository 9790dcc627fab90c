import datetime as dt
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from spidefect.core import (
    KEY_COLUMNS,
    NUMERIC_COLUMNS,
    NUMERIC_FIELDS,
    AoiRecord,
    BoardLayout,
    EncodingConfig,
    FeatureTable,
    Level,
    OperatorLabel,
    PinFrame,
    PinKey,
    PinRecord,
    RepairLabel,
    default_layout,
    per_pin_feature_vector,
    total_pins,
)
from spidefect.errors import RecordError

FULL_VOCAB = EncodingConfig(spi_vocabulary=("Good", "W.Insufficient", "E.shape", "E.Position", "other"))


def make_record(spi_result="Good", **overrides):
    values = dict(zip(NUMERIC_FIELDS, [101.3, 150.0, 99.0, 0.5, -0.5, 800.0, 600.0, 7.2e7, 4.8e5,
                                       10.0, 12.5, 40.0]))
    values.update(overrides)
    return PinRecord(PinKey(1, 1, "C001", 1), dt.date(2024, 3, 4), dt.time(6, 0, 0), 1, 0,
                     spi_result=spi_result, **values)


def test_default_layout_matches_pin_table():
    layout = default_layout()
    assert len(layout.components) == 128
    assert layout.pin_count_histogram() == {2: 108, 3: 1, 5: 3, 6: 7, 8: 8, 49: 1}
    assert total_pins(layout) == 389
    # 1,924 full panels would be 15,392 boards; the last panel holds 3
    assert 1924 * 8 * total_pins(layout) == 5_987_488
    assert (1923 * 8 + 3) * total_pins(layout) == 5_985_543


def test_total_pins_single_component():
    assert total_pins(BoardLayout({"C1": 2})) == 2


def test_pin_total_is_about_six_million():
    # 15,387 boards of 389 pins
    assert 389 * 15_387 == 5_985_543


def test_feature_vector_layout_and_good_onehot():
    names, vec = per_pin_feature_vector(make_record(), EncodingConfig(
        spi_vocabulary=("Good", "W.Insufficient", "E.shape", "E.Position")))
    assert len(vec) == 17 and len(names) == 17
    assert names[:12] == NUMERIC_COLUMNS
    assert names[12] == "PadType"
    assert vec[0] == 101.3
    onehot = dict(zip(names[13:], vec[13:]))
    assert onehot == {"Result=Good": 1.0, "Result=W.Insufficient": 0.0, "Result=E.shape": 0.0,
                      "Result=E.Position": 0.0}


def test_insufficient_token_sets_its_column():
    names, vec = per_pin_feature_vector(make_record("W.Insufficient"))
    assert vec[names.index("Result=W.Insufficient")] == 1.0
    assert vec[13:].sum() == 1.0


def test_unknown_token_goes_to_other():
    names, vec = per_pin_feature_vector(make_record("X.Bridge"))
    assert vec[names.index("Result=other")] == 1.0
    assert vec[13:].sum() == 1.0


def test_unknown_token_without_other_bucket_is_rejected():
    with pytest.raises(RecordError):
        per_pin_feature_vector(make_record("X.Bridge"), EncodingConfig(spi_vocabulary=("Good",)))


def test_default_width_is_17():
    assert EncodingConfig().width == 17
    assert FULL_VOCAB.width == 18


def test_optional_columns():
    enc = EncodingConfig(include_pad_id=True, include_datetime=True, use_spi_result=False)
    names, vec = per_pin_feature_vector(make_record(), enc)
    assert names[-3:] == ("PadID", "DateOrdinal", "TimeSeconds")
    assert vec[-1] == 6 * 3600
    assert len(vec) == 16


@pytest.mark.parametrize("field", NUMERIC_FIELDS)
def test_non_finite_field_is_named(field):
    with pytest.raises(RecordError, match=field):
        make_record(**{field: math.nan})


def test_negative_nonnegative_field_rejected():
    with pytest.raises(RecordError, match="height_um"):
        make_record(height_um=-1.0)


def test_repair_label_requires_bad():
    with pytest.raises(RecordError):
        AoiRecord(1, 1, "C001", 1, "translated", OperatorLabel.GOOD, RepairLabel.FALSE_SCRAP)
    rec = AoiRecord(1, 1, "C001", None, "translated", OperatorLabel.BAD, RepairLabel.FALSE_SCRAP)
    assert rec.pin_key is None
    assert rec.component_key == (1, 1, "C001")


finite = st.floats(min_value=0.0, max_value=1e6, allow_nan=False)


@given(st.lists(finite, min_size=12, max_size=12), st.integers(0, 11), finite)
def test_feature_vector_injective_on_numerics(values, which, other):
    a = make_record(**dict(zip(NUMERIC_FIELDS, values)))
    changed = list(values)
    changed[which] = other
    b = make_record(**dict(zip(NUMERIC_FIELDS, changed)))
    va, vb = per_pin_feature_vector(a)[1], per_pin_feature_vector(b)[1]
    assert np.array_equal(va, per_pin_feature_vector(a)[1])  # deterministic
    assert np.array_equal(va, vb) == (values[which] == other)


@given(st.lists(st.tuples(st.integers(1, 3), st.integers(1, 8), st.sampled_from(["A", "B"]),
                          st.integers(1, 4)), min_size=1, max_size=40, unique=True))
def test_dropping_pin_number_groups_into_components(keys):
    pins = [PinKey(*k) for k in keys]
    components = {p.component_key() for p in pins}
    assert components == {(p, f, c) for p, f, c, _ in keys}
    for comp in components:
        assert comp.board_key() == comp[:2]


def test_pin_frame_matches_records():
    recs = [make_record(), make_record("E.shape", volume_pct=90.0)]
    recs[1] = PinRecord(PinKey(2, 3, "C002", 2), recs[1].date, recs[1].time, 4, 1,
                        **{f: getattr(recs[1], f) for f in NUMERIC_FIELDS}, spi_result="E.shape")
    frame = PinFrame.from_records(recs)
    assert len(frame) == 2
    assert list(frame) == recs
    X = frame.feature_matrix(EncodingConfig())
    for i, rec in enumerate(recs):
        assert np.array_equal(X[i], per_pin_feature_vector(rec)[1])


def _table(n=4, target=True):
    keys = pd.DataFrame({"panel_id": range(1, n + 1), "figure_id": [1] * n})
    return FeatureTable(("a", "b"), np.arange(2 * n, dtype=float).reshape(n, 2), keys, Level.BOARD,
                        np.array([0, 1] * (n // 2)) if target else None)


def test_feature_table_invariants():
    t = _table()
    assert t.n_rows == 4 and t.width == 2
    assert t.keys()[0] == (1, 1)
    with pytest.raises(RecordError):
        FeatureTable(("a", "a"), np.zeros((1, 2)), t.row_keys.iloc[:1], Level.BOARD)
    with pytest.raises(RecordError):
        FeatureTable(("a", "b"), np.array([[0.0, np.inf]]), t.row_keys.iloc[:1], Level.BOARD)
    with pytest.raises(RecordError):
        FeatureTable(("a", "b"), np.zeros((4, 2)), t.row_keys, Level.BOARD, np.array([0, 1, 2, 0]))
    with pytest.raises(RecordError):
        FeatureTable(("a", "b"), np.zeros((3, 2)), t.row_keys, Level.BOARD)
    with pytest.raises(RecordError):
        FeatureTable(("a", "b"), np.zeros((4, 2)), t.row_keys, Level.PIN)


def test_feature_table_csv_round_trip(tmp_path):
    t = _table()
    path = tmp_path / "t.csv"
    t.to_csv(path)
    header = path.read_text().splitlines()[0].split(",")
    assert header == ["__key_panel_id", "__key_figure_id", "a", "b", "__target__"]
    back = FeatureTable.from_csv(path, Level.BOARD)
    assert back.column_names == t.column_names
    assert np.array_equal(back.rows, t.rows)
    assert np.array_equal(back.target, t.target)
    assert back.keys() == t.keys()


def test_key_columns_per_level():
    assert KEY_COLUMNS[Level.PIN][-1] == "pin_number"
    assert len(KEY_COLUMNS[Level.BOARD]) == 2
