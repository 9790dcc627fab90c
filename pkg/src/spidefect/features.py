"""Pin, component and board feature tables and the three label joins.

The label joins follow the inspection cascade: every SPI row can receive an
AOI verdict (task C1), AOI-flagged rows can receive an operator verdict (C2)
and operator-rejected rows can receive a repair verdict (C3).
"""
from __future__ import annotations

import enum
from typing import Iterator, Sequence

import numpy as np
import pandas as pd

from .core import (
    KEY_COLUMNS,
    MACHINE_LABELS,
    OTHER_TOKEN,
    AoiRecord,
    BoardKey,
    BoardLayout,
    EncodingConfig,
    FeatureTable,
    Level,
    OperatorLabel,
    PinFrame,
    PinRecord,
    RepairLabel,
)
from .errors import ConfigError, StructuralError


class ClassificationTask(str, enum.Enum):
    C1 = "c1"  # AOI defect vs. no defect, every SPI row
    C2 = "c2"  # operator Bad vs. Good, AOI-flagged rows only
    C3 = "c3"  # not repairable vs. false scrap, operator-Bad rows only


MACHINE_LABEL_COLUMNS = tuple(f"MachineLabel={tok}" for tok in MACHINE_LABELS)
OPERATOR_LABEL_COLUMN = "OperatorLabel"


def _as_frame(pins) -> PinFrame:
    if isinstance(pins, PinFrame):
        return pins
    return PinFrame.from_records(list(pins))


def _pin_keys(frame: PinFrame) -> pd.DataFrame:
    return pd.DataFrame({
        "panel_id": frame.panel_id.astype(np.int64),
        "figure_id": frame.figure_id.astype(np.int64),
        "component_id": frame.component_id.astype(object),
        "pin_number": frame.pin_number.astype(np.int64),
    })


def build_pin_table(pins: PinFrame | Sequence[PinRecord],
                    encoding: EncodingConfig = EncodingConfig()) -> FeatureTable:
    frame = _as_frame(pins)
    if len(frame) == 0:
        raise ConfigError("no pin records to build a table from")
    return FeatureTable(encoding.column_names(), frame.feature_matrix(encoding), _pin_keys(frame),
                        Level.PIN)


class _BoardIndex:
    """Per-pin feature rows and board codes, shared by all component pivots."""

    def __init__(self, frame: PinFrame, encoding: EncodingConfig):
        self.frame = frame
        self.encoding = encoding
        self.X = frame.feature_matrix(encoding)
        boards = pd.MultiIndex.from_arrays([frame.panel_id.astype(np.int64),
                                            frame.figure_id.astype(np.int64)])
        codes, uniques = boards.factorize(sort=True)
        self.board_code = codes
        self.boards = uniques
        self.by_component = pd.Series(np.arange(len(frame))).groupby(
            frame.component_id.astype(object)).indices

    def board_key(self, code: int) -> BoardKey:
        panel, figure = self.boards[code]
        return BoardKey(int(panel), int(figure))

    def pivot(self, component_id: str, pin_count: int) -> tuple[list[str], np.ndarray]:
        n_boards = len(self.boards)
        rows = self.by_component.get(component_id)
        if rows is None:
            raise StructuralError(f"component {component_id!r} is missing on board {self.board_key(0)}")
        pin_numbers = self.frame.pin_number[rows].astype(np.int64)
        numbers = np.unique(pin_numbers)
        board = self.board_code[rows]
        if len(numbers) != pin_count:
            # name a board whose pin set differs from the layout
            counts = np.bincount(board, minlength=n_boards)
            odd = int(np.flatnonzero(counts != pin_count)[0]) if (counts != pin_count).any() else int(board[0])
            raise StructuralError(
                f"component {component_id!r} on board {self.board_key(odd)}: pin numbers "
                f"{numbers[:10].tolist()} do not form {pin_count} pins")
        slot = np.searchsorted(numbers, pin_numbers)
        cell = board * pin_count + slot
        filled = np.bincount(cell, minlength=n_boards * pin_count).reshape(n_boards, pin_count)
        if (filled != 1).any():
            b, p = np.argwhere(filled != 1)[0]
            what = "missing" if filled[b, p] == 0 else "duplicated"
            raise StructuralError(
                f"component {component_id!r} on board {self.board_key(int(b))}: pin "
                f"{int(numbers[p])} is {what}")
        width = self.X.shape[1]
        out = np.empty((n_boards, pin_count, width))
        out[board, slot] = self.X[rows]
        names = [f"{c}@pin{k}" for k in numbers for c in self.encoding.column_names()]
        return names, out.reshape(n_boards, pin_count * width)

    def board_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"panel_id": self.boards.get_level_values(0).astype(np.int64),
                             "figure_id": self.boards.get_level_values(1).astype(np.int64)})


def _component_table(index: _BoardIndex, component_id: str, pin_count: int) -> FeatureTable:
    names, rows = index.pivot(component_id, pin_count)
    keys = index.board_frame()
    keys["component_id"] = component_id
    return FeatureTable(names, rows, keys, Level.COMPONENT, meta={"component_id": component_id})


def build_component_table(pins, component_id: str, layout: BoardLayout,
                          encoding: EncodingConfig = EncodingConfig()) -> FeatureTable:
    """One row per board: the component's pin vectors side by side, ascending pin number."""
    if component_id not in layout.components:
        raise ConfigError(f"component {component_id!r} is not in the layout")
    index = _BoardIndex(_as_frame(pins), encoding)
    return _component_table(index, component_id, layout.components[component_id])


def iter_component_tables(pins, layout: BoardLayout, encoding: EncodingConfig = EncodingConfig(),
                          components: Sequence[str] | None = None) -> Iterator[FeatureTable]:
    """Component tables in layout order, sharing one pass over the pin data."""
    index = _BoardIndex(_as_frame(pins), encoding)
    for cid in components if components is not None else layout.component_ids:
        yield _component_table(index, cid, layout.components[cid])


def build_board_table(pins, layout: BoardLayout,
                      encoding: EncodingConfig = EncodingConfig()) -> FeatureTable:
    index = _BoardIndex(_as_frame(pins), encoding)
    names, blocks = [], []
    for cid in layout.component_ids:
        cols, rows = index.pivot(cid, layout.components[cid])
        names += [f"{cid}/{c}" for c in cols]
        blocks.append(rows)
    return FeatureTable(names, np.hstack(blocks), index.board_frame(), Level.BOARD)


def build_combined_component_table(pins, layout: BoardLayout,
                                   encoding: EncodingConfig = EncodingConfig(),
                                   components: Sequence[str] | None = None) -> FeatureTable:
    """All component rows in one table, zero-padded to the widest component.

    Slot ``k`` holds the k-th pin in ascending pin-number order; a ``PinCount``
    column tells the model how many slots are real.
    """
    index = _BoardIndex(_as_frame(pins), encoding)
    cids = list(components if components is not None else layout.component_ids)
    max_pins = max(layout.components[c] for c in cids)
    width = len(encoding.column_names())
    names = ["PinCount"] + [f"{c}@slot{k}" for k in range(1, max_pins + 1)
                            for c in encoding.column_names()]
    n_boards = len(index.boards)
    rows = np.zeros((n_boards * len(cids), 1 + max_pins * width))
    keys = []
    for j, cid in enumerate(cids):
        count = layout.components[cid]
        _, block = index.pivot(cid, count)
        part = slice(j * n_boards, (j + 1) * n_boards)
        rows[part, 0] = count
        rows[part, 1:1 + count * width] = block
        k = index.board_frame()
        k["component_id"] = cid
        keys.append(k)
    # board-major order so every board's components are adjacent
    keys = pd.concat(keys, ignore_index=True)
    order = np.lexsort((np.repeat(np.arange(len(cids)), n_boards), np.tile(np.arange(n_boards), len(cids))))
    return FeatureTable(names, rows[order], keys.iloc[order], Level.COMPONENT,
                        meta={"component_id": "All"})


# -- label joins ---------------------------------------------------------------

def aoi_frame(aoi: Sequence[AoiRecord]) -> pd.DataFrame:
    """AOI records as a DataFrame; ``pin_number`` is nullable, labels are 0/1 codes."""
    return pd.DataFrame({
        "panel_id": pd.array([a.panel_id for a in aoi], dtype="int64"),
        "figure_id": pd.array([a.figure_id for a in aoi], dtype="int64"),
        "component_id": pd.array([a.component_id for a in aoi], dtype=object),
        "pin_number": pd.array([a.pin_number for a in aoi], dtype="Int64"),
        "machine_label": pd.array([a.machine_label if a.machine_label in MACHINE_LABELS else OTHER_TOKEN
                                   for a in aoi], dtype=object),
        "bad": pd.array([int(a.operator_label is OperatorLabel.BAD) for a in aoi], dtype="int8"),
        "not_repairable": pd.array(
            [None if a.repair_label is None else int(a.repair_label is RepairLabel.NOT_POSSIBLE_TO_REPAIR)
             for a in aoi], dtype="Int8"),
    })


def _frame_of(aoi) -> pd.DataFrame:
    return aoi if isinstance(aoi, pd.DataFrame) else aoi_frame(aoi)


def _join_keys(table: FeatureTable, component_id: str | None) -> tuple[pd.DataFrame, list[str]]:
    """Row keys to match AOI records against, plus the join columns."""
    keys = table.row_keys[list(KEY_COLUMNS[table.level])].copy()
    if table.level is Level.BOARD:
        if component_id is None:
            raise ConfigError("board-level labels need a target component_id")
        keys["component_id"] = component_id
        return keys, ["panel_id", "figure_id", "component_id"]
    return keys, list(KEY_COLUMNS[table.level])


def _usable_aoi(table: FeatureTable, frame: pd.DataFrame, meta: dict) -> pd.DataFrame:
    if table.level is Level.PIN:
        blank = frame["pin_number"].isna()
        meta["aoi_without_pin_number"] = int(blank.sum())
        frame = frame[~blank].astype({"pin_number": "int64"})
    return frame


def _scope(table: FeatureTable, frame: pd.DataFrame, component_id, meta: dict) -> pd.DataFrame:
    """Restrict AOI records to the component a table is about, if it is about one."""
    if table.level is Level.BOARD:
        meta["component_id"] = component_id
        return frame[frame["component_id"] == component_id]
    own = table.meta.get("component_id")
    if table.level is Level.COMPONENT and own not in (None, "All"):
        return frame[frame["component_id"] == own]
    return frame


def _match(keys: pd.DataFrame, on: list[str], agg: pd.DataFrame) -> pd.DataFrame:
    left = keys.assign(_row=np.arange(len(keys)))
    return left.merge(agg, on=on, how="inner").sort_values("_row", kind="stable")


def _unmatched(frame: pd.DataFrame, keys: pd.DataFrame, on: list[str]) -> int:
    if len(frame) == 0:
        return 0
    hit = pd.MultiIndex.from_frame(frame[on]).isin(pd.MultiIndex.from_frame(keys[on]))
    return int((~hit).sum())


def attach_labels_c1(table: FeatureTable, aoi: Sequence[AoiRecord],
                     component_id: str | None = None) -> FeatureTable:
    """Left join: every row kept, target 1 iff some AOI record matches its key.

    Pin rows match on the full pin key (AOI records without a pin number are
    ignored); component rows ignore the pin number; board rows match the AOI
    records of ``component_id`` on that board.
    """
    meta = dict(table.meta, task=ClassificationTask.C1.value)
    keys, on = _join_keys(table, component_id)
    frame = _usable_aoi(table, _frame_of(aoi), meta)
    frame = _scope(table, frame, component_id, meta)
    meta["aoi_unmatched"] = _unmatched(frame, keys, on)
    target = np.zeros(table.n_rows, dtype=np.int8)
    if len(frame):
        hit = pd.MultiIndex.from_frame(keys[on]).isin(pd.MultiIndex.from_frame(frame[on]))
        target[hit] = 1
    meta["positives"] = int(target.sum())
    out = table.with_target(target)
    out.meta = meta
    return out


def _attach_inner(table, aoi, component_id, task, frame_filter, value_col, extra_operator):
    meta = dict(table.meta, task=task.value)
    keys, on = _join_keys(table, component_id)
    frame = _usable_aoi(table, _frame_of(aoi), meta)
    frame = _scope(table, frame, component_id, meta)
    frame = frame_filter(frame, meta)
    onehot = pd.DataFrame({col: (frame["machine_label"] == tok).astype(np.int8).to_numpy()
                           for col, tok in zip(MACHINE_LABEL_COLUMNS, MACHINE_LABELS)},
                          index=frame.index)
    per_key = pd.concat([frame[on], onehot, frame[[value_col]].astype("int8")], axis=1)
    # several AOI records on one key: multi-hot fault labels, any positive wins
    agg = per_key.groupby(on, sort=False, as_index=False).max()
    matched = _match(keys, on, agg)
    meta["aoi_unmatched"] = _unmatched(frame, keys, on)
    rows_idx = matched["_row"].to_numpy()
    extra = matched[list(MACHINE_LABEL_COLUMNS)].to_numpy(dtype=np.float64)
    names = list(table.column_names) + list(MACHINE_LABEL_COLUMNS)
    if extra_operator:
        extra = np.hstack([extra, np.ones((len(rows_idx), 1))])
        names.append(OPERATOR_LABEL_COLUMN)
    target = matched[value_col].to_numpy(dtype=np.int8)
    meta["rows_dropped_unmatched"] = table.n_rows - len(rows_idx)
    meta["positives"] = int(target.sum())
    return FeatureTable(names, np.hstack([table.rows[rows_idx], extra]),
                        table.row_keys.iloc[rows_idx], table.level, target, meta)


def attach_labels_c2(table: FeatureTable, aoi: Sequence[AoiRecord],
                     component_id: str | None = None) -> FeatureTable:
    """Inner join on AOI records; machine label one-hot appended; target = operator Bad."""
    return _attach_inner(table, aoi, component_id, ClassificationTask.C2,
                         lambda f, meta: f, "bad", extra_operator=False)


def attach_labels_c3(table: FeatureTable, aoi: Sequence[AoiRecord],
                     component_id: str | None = None) -> FeatureTable:
    """Inner join on operator-Bad records; target = not possible to repair.

    Machine label one-hot and the operator label (always Bad here, so a
    constant 1 column) are appended as features.
    """
    def keep_bad(frame, meta):
        bad = frame[frame["bad"] == 1]
        no_repair = bad["not_repairable"].isna()
        meta["c3_dropped_missing_repair"] = int(no_repair.sum())
        return bad[~no_repair]

    return _attach_inner(table, aoi, component_id, ClassificationTask.C3, keep_bad,
                         "not_repairable", extra_operator=True)


ATTACH = {
    ClassificationTask.C1: attach_labels_c1,
    ClassificationTask.C2: attach_labels_c2,
    ClassificationTask.C3: attach_labels_c3,
}


def attach_labels(task: ClassificationTask, table: FeatureTable, aoi: Sequence[AoiRecord],
                  component_id: str | None = None) -> FeatureTable:
    return ATTACH[ClassificationTask(task)](table, aoi, component_id)


# -- folds ---------------------------------------------------------------------

def split_groups(table: FeatureTable) -> np.ndarray:
    """Group id per row: the row itself for pin tables, its board otherwise."""
    if table.level is Level.PIN:
        return np.arange(table.n_rows)
    return table.board_ids()


def kfold_split(table: FeatureTable, k: int = 5, seed: int = 0,
                stratified: bool = False) -> list[tuple[np.ndarray, np.ndarray]]:
    """Group-aware k-fold partition of row indices.

    Groups are shuffled with ``seed`` and dealt round-robin, so fold sizes (in
    groups) differ by at most one. In stratified mode positive groups (any
    positive row) are dealt first and the negatives continue the rotation,
    which also keeps per-fold positive counts within one of each other.
    """
    if k < 2:
        raise ConfigError("k must be at least 2")
    groups = split_groups(table)
    n_groups = int(groups.max()) + 1 if len(groups) else 0
    if n_groups < k:
        raise ConfigError(f"cannot split {n_groups} groups into {k} folds")
    rng = np.random.default_rng(seed)
    if stratified:
        if table.target is None:
            raise ConfigError("stratified split needs a target")
        positive = np.zeros(n_groups, dtype=bool)
        positive[groups[table.target == 1]] = True
        if positive.sum() < k:
            raise ConfigError(
                f"only {int(positive.sum())} positive groups for {k} folds; use an unstratified split")
        pos = rng.permutation(np.flatnonzero(positive))
        neg = rng.permutation(np.flatnonzero(~positive))
        dealt = np.concatenate([pos, neg])
    else:
        dealt = rng.permutation(n_groups)
    fold_of_group = np.empty(n_groups, dtype=np.int64)
    fold_of_group[dealt] = np.arange(n_groups) % k
    fold_of_row = fold_of_group[groups]
    folds = []
    for f in range(k):
        test = np.flatnonzero(fold_of_row == f)
        train = np.flatnonzero(fold_of_row != f)
        folds.append((train, test))
    return folds
