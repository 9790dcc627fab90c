"""Domain types: identity keys, SPI/AOI records, board layout and feature tables."""
from __future__ import annotations

import datetime as dt
import enum
import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import pandas as pd

from .errors import RecordError

# SPI measurement columns, in the order the SPI machine exports them.
NUMERIC_COLUMNS = (
    "Volume(%)",
    "Height(um)",
    "Area(%)",
    "OffsetX(%)",
    "OffsetY(%)",
    "SizeX",
    "SizeY",
    "Volume(um3)",
    "Area(um2)",
    "Shape(um)",
    "PosX(mm)",
    "PosY(mm)",
)
NUMERIC_FIELDS = (
    "volume_pct",
    "height_um",
    "area_pct",
    "offset_x_pct",
    "offset_y_pct",
    "size_x",
    "size_y",
    "volume_um3",
    "area_um2",
    "shape_um",
    "pos_x_mm",
    "pos_y_mm",
)
NONNEGATIVE_FIELDS = ("height_um", "volume_um3", "area_um2")

OTHER_TOKEN = "other"
GOOD_TOKEN = "Good"
DEFAULT_SPI_VOCABULARY = ("Good", "W.Insufficient", "E.shape", OTHER_TOKEN)

MACHINE_LABELS = ("lean soldering", "translated", "misaligned", OTHER_TOKEN)


class PinKey(NamedTuple):
    panel_id: int
    figure_id: int
    component_id: str
    pin_number: int

    def component_key(self) -> "ComponentKey":
        return ComponentKey(self.panel_id, self.figure_id, self.component_id)

    def board_key(self) -> "BoardKey":
        return BoardKey(self.panel_id, self.figure_id)


class ComponentKey(NamedTuple):
    panel_id: int
    figure_id: int
    component_id: str

    def board_key(self) -> "BoardKey":
        return BoardKey(self.panel_id, self.figure_id)


class BoardKey(NamedTuple):
    panel_id: int
    figure_id: int


class OperatorLabel(str, enum.Enum):
    GOOD = "Good"
    BAD = "Bad"


class RepairLabel(str, enum.Enum):
    FALSE_SCRAP = "FalseScrap"
    NOT_POSSIBLE_TO_REPAIR = "NotPossibleToRepair"


class Level(str, enum.Enum):
    PIN = "pin"
    COMPONENT = "component"
    BOARD = "board"


KEY_COLUMNS = {
    Level.PIN: ("panel_id", "figure_id", "component_id", "pin_number"),
    Level.COMPONENT: ("panel_id", "figure_id", "component_id"),
    Level.BOARD: ("panel_id", "figure_id"),
}
KEY_TYPES = {Level.PIN: PinKey, Level.COMPONENT: ComponentKey, Level.BOARD: BoardKey}


@dataclass(frozen=True)
class PinRecord:
    key: PinKey
    date: dt.date
    time: dt.time
    pad_id: int
    pad_type: int
    volume_pct: float
    height_um: float
    area_pct: float
    offset_x_pct: float
    offset_y_pct: float
    size_x: float
    size_y: float
    volume_um3: float
    area_um2: float
    shape_um: float
    pos_x_mm: float
    pos_y_mm: float
    spi_result: str = GOOD_TOKEN

    def __post_init__(self):
        for name in NUMERIC_FIELDS:
            if not math.isfinite(getattr(self, name)):
                raise RecordError(f"non-finite value in field {name!r} for pin {self.key}")
        for name in NONNEGATIVE_FIELDS:
            if getattr(self, name) < 0:
                raise RecordError(f"negative value in field {name!r} for pin {self.key}")
        if self.pad_type not in (0, 1):
            raise RecordError(f"pad_type must be 0 or 1, got {self.pad_type!r}")

    def numeric_values(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in NUMERIC_FIELDS)


@dataclass(frozen=True)
class AoiRecord:
    panel_id: int
    figure_id: int
    component_id: str
    pin_number: int | None
    machine_label: str
    operator_label: OperatorLabel
    repair_label: RepairLabel | None = None

    def __post_init__(self):
        if self.repair_label is not None and self.operator_label is not OperatorLabel.BAD:
            raise RecordError("repair_label is only defined for operator_label=Bad")

    @property
    def component_key(self) -> ComponentKey:
        return ComponentKey(self.panel_id, self.figure_id, self.component_id)

    @property
    def pin_key(self) -> PinKey | None:
        if self.pin_number is None:
            return None
        return PinKey(self.panel_id, self.figure_id, self.component_id, self.pin_number)


@dataclass(frozen=True)
class BoardLayout:
    """Design map of one PCB: component id -> pin count, in layout order."""

    components: dict[str, int]
    figures_per_panel: int = 8

    def __post_init__(self):
        if not self.components:
            raise RecordError("layout has no components")
        if any(n < 1 for n in self.components.values()):
            raise RecordError("every component needs at least one pin")
        if self.figures_per_panel < 1:
            raise RecordError("figures_per_panel must be positive")

    @property
    def component_ids(self) -> tuple[str, ...]:
        return tuple(self.components)

    def pin_count_histogram(self) -> dict[int, int]:
        """Number of components per pin count, ascending by pin count."""
        hist: dict[int, int] = {}
        for n in self.components.values():
            hist[n] = hist.get(n, 0) + 1
        return dict(sorted(hist.items()))

    def to_dict(self) -> dict:
        return {"figures_per_panel": self.figures_per_panel, "components": dict(self.components)}


# (number of components, pins per component) for the production board
DEFAULT_PIN_GROUPS = ((108, 2), (1, 3), (3, 5), (7, 6), (8, 8), (1, 49))


def default_layout() -> BoardLayout:
    components = {}
    idx = 1
    for count, pins in DEFAULT_PIN_GROUPS:
        for _ in range(count):
            components[f"C{idx:03d}"] = pins
            idx += 1
    return BoardLayout(components, figures_per_panel=8)


def total_pins(layout: BoardLayout) -> int:
    return sum(layout.components.values())


@dataclass(frozen=True)
class EncodingConfig:
    """How a pin record becomes a numeric feature vector.

    Out-of-vocabulary SPI result tokens are mapped to ``other``, which must
    therefore be part of ``spi_vocabulary``.
    """

    spi_vocabulary: tuple[str, ...] = DEFAULT_SPI_VOCABULARY
    use_spi_result: bool = True
    include_pad_id: bool = False
    include_datetime: bool = False

    def __post_init__(self):
        object.__setattr__(self, "spi_vocabulary", tuple(self.spi_vocabulary))
        if len(set(self.spi_vocabulary)) != len(self.spi_vocabulary):
            raise RecordError("spi_vocabulary has duplicate tokens")

    def column_names(self) -> tuple[str, ...]:
        names = list(NUMERIC_COLUMNS) + ["PadType"]
        if self.use_spi_result:
            names += [f"Result={tok}" for tok in self.spi_vocabulary]
        if self.include_pad_id:
            names.append("PadID")
        if self.include_datetime:
            names += ["DateOrdinal", "TimeSeconds"]
        return tuple(names)

    @property
    def width(self) -> int:
        return len(self.column_names())

    def result_index(self, token: str) -> int:
        try:
            return self.spi_vocabulary.index(token)
        except ValueError:
            pass
        try:
            return self.spi_vocabulary.index(OTHER_TOKEN)
        except ValueError:
            raise RecordError(
                f"SPI result {token!r} not in vocabulary and no {OTHER_TOKEN!r} bucket configured"
            ) from None


def per_pin_feature_vector(record: PinRecord, encoding: EncodingConfig = EncodingConfig()):
    """Return ``(column_names, vector)`` for one pin."""
    values = list(record.numeric_values())
    for name, v in zip(NUMERIC_FIELDS, values):
        if not math.isfinite(v):
            raise RecordError(f"non-finite value in field {name!r}")
    values.append(float(record.pad_type))
    if encoding.use_spi_result:
        onehot = [0.0] * len(encoding.spi_vocabulary)
        onehot[encoding.result_index(record.spi_result)] = 1.0
        values += onehot
    if encoding.include_pad_id:
        values.append(float(record.pad_id))
    if encoding.include_datetime:
        values.append(float(record.date.toordinal()))
        values.append(float(record.time.hour * 3600 + record.time.minute * 60 + record.time.second))
    return encoding.column_names(), np.asarray(values, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class PinFrame:
    """Columnar store of pin records.

    Behaves as a read-only sequence of :class:`PinRecord` but keeps the data in
    numpy arrays, which is what full-scale (millions of pins) processing needs.
    Dates and times are held as ISO strings.
    """

    panel_id: np.ndarray
    figure_id: np.ndarray
    component_id: np.ndarray
    pin_number: np.ndarray
    date: np.ndarray
    time: np.ndarray
    pad_id: np.ndarray
    pad_type: np.ndarray
    numeric: np.ndarray
    spi_result: np.ndarray

    def __post_init__(self):
        n = len(self.panel_id)
        if self.numeric.shape != (n, len(NUMERIC_FIELDS)):
            raise RecordError(f"numeric block has shape {self.numeric.shape}, expected ({n}, 12)")
        for name in ("figure_id", "component_id", "pin_number", "date", "time", "pad_id",
                     "pad_type", "spi_result"):
            if len(getattr(self, name)) != n:
                raise RecordError(f"column {name} has length {len(getattr(self, name))}, expected {n}")
        if n and not np.isfinite(self.numeric).all():
            bad = np.argwhere(~np.isfinite(self.numeric))[0]
            raise RecordError(f"non-finite value in field {NUMERIC_FIELDS[bad[1]]!r} at row {bad[0]}")

    def __len__(self) -> int:
        return len(self.panel_id)

    def __iter__(self) -> Iterator[PinRecord]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, item):
        if isinstance(item, (int, np.integer)):
            i = int(item)
            if i < 0:
                i += len(self)
            nums = self.numeric[i]
            return PinRecord(
                key=self.key(i),
                date=dt.date.fromisoformat(self.date[i]),
                time=dt.time.fromisoformat(self.time[i]),
                pad_id=int(self.pad_id[i]),
                pad_type=int(self.pad_type[i]),
                **{name: float(v) for name, v in zip(NUMERIC_FIELDS, nums)},
                spi_result=str(self.spi_result[i]),
            )
        return self.take(item)

    def key(self, i: int) -> PinKey:
        return PinKey(int(self.panel_id[i]), int(self.figure_id[i]), str(self.component_id[i]),
                      int(self.pin_number[i]))

    def keys(self) -> list[PinKey]:
        return [PinKey(int(p), int(f), str(c), int(n)) for p, f, c, n in
                zip(self.panel_id, self.figure_id, self.component_id, self.pin_number)]

    def take(self, idx) -> "PinFrame":
        return PinFrame(**{name: getattr(self, name)[idx] for name in _FRAME_FIELDS})

    def column(self, field_name: str) -> np.ndarray:
        return self.numeric[:, NUMERIC_FIELDS.index(field_name)]

    def equals(self, other: "PinFrame", rtol: float = 0.0) -> bool:
        if len(self) != len(other):
            return False
        for name in _FRAME_FIELDS:
            a, b = getattr(self, name), getattr(other, name)
            if name == "numeric":
                if not np.allclose(a, b, rtol=rtol, atol=0.0):
                    return False
            elif not np.array_equal(a, b):
                return False
        return True

    @classmethod
    def from_records(cls, records: Sequence[PinRecord]) -> "PinFrame":
        n = len(records)
        return cls(
            panel_id=np.array([r.key.panel_id for r in records], dtype=np.int64),
            figure_id=np.array([r.key.figure_id for r in records], dtype=np.int64),
            component_id=np.array([r.key.component_id for r in records], dtype=object),
            pin_number=np.array([r.key.pin_number for r in records], dtype=np.int64),
            date=np.array([r.date.isoformat() for r in records], dtype=object),
            time=np.array([r.time.isoformat() for r in records], dtype=object),
            pad_id=np.array([r.pad_id for r in records], dtype=np.int64),
            pad_type=np.array([r.pad_type for r in records], dtype=np.int64),
            numeric=np.array([r.numeric_values() for r in records], dtype=np.float64).reshape(n, 12),
            spi_result=np.array([r.spi_result for r in records], dtype=object),
        )

    def feature_matrix(self, encoding: EncodingConfig = EncodingConfig()) -> np.ndarray:
        """Vectorised :func:`per_pin_feature_vector` over all rows."""
        n = len(self)
        blocks = [self.numeric, self.pad_type.astype(np.float64).reshape(n, 1)]
        if encoding.use_spi_result:
            codes = _result_codes(self.spi_result, encoding)
            onehot = np.zeros((n, len(encoding.spi_vocabulary)))
            onehot[np.arange(n), codes] = 1.0
            blocks.append(onehot)
        if encoding.include_pad_id:
            blocks.append(self.pad_id.astype(np.float64).reshape(n, 1))
        if encoding.include_datetime:
            dates = pd.to_datetime(pd.Series(self.date), format="%Y-%m-%d")
            ordinal = (dates - pd.Timestamp("0001-01-01")).dt.days.to_numpy() + 1
            times = pd.to_timedelta(pd.Series(self.time)).dt.total_seconds().to_numpy()
            blocks += [ordinal.astype(np.float64).reshape(n, 1), times.reshape(n, 1)]
        return np.ascontiguousarray(np.hstack(blocks), dtype=np.float64)


_FRAME_FIELDS = ("panel_id", "figure_id", "component_id", "pin_number", "date", "time",
                 "pad_id", "pad_type", "numeric", "spi_result")


def _result_codes(tokens: np.ndarray, encoding: EncodingConfig) -> np.ndarray:
    uniques, inverse = np.unique(tokens.astype(str), return_inverse=True)
    mapping = np.array([encoding.result_index(tok) for tok in uniques], dtype=np.int64)
    return mapping[inverse]


@dataclass(eq=False)
class FeatureTable:
    """Dense feature matrix plus row identities and an optional 0/1 target.

    ``row_keys`` is a DataFrame holding the key columns of ``level`` (see
    ``KEY_COLUMNS``), one row per matrix row.
    """

    column_names: tuple[str, ...]
    rows: np.ndarray
    row_keys: pd.DataFrame
    level: Level
    target: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.column_names = tuple(self.column_names)
        self.rows = np.ascontiguousarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[1] != len(self.column_names):
            raise RecordError(
                f"rows have shape {self.rows.shape} but there are {len(self.column_names)} columns")
        if len(set(self.column_names)) != len(self.column_names):
            dupes = sorted({c for c in self.column_names if self.column_names.count(c) > 1})
            raise RecordError(f"duplicate column names: {dupes[:5]}")
        if len(self.row_keys) != self.rows.shape[0]:
            raise RecordError("row_keys and rows differ in length")
        missing = [c for c in KEY_COLUMNS[self.level] if c not in self.row_keys.columns]
        if missing:
            raise RecordError(f"row_keys lack key columns {missing}")
        self.row_keys = self.row_keys.reset_index(drop=True)
        if self.target is not None:
            self.target = np.asarray(self.target, dtype=np.int8)
            if self.target.shape != (self.rows.shape[0],):
                raise RecordError("target length differs from row count")
            if not np.isin(self.target, (0, 1)).all():
                raise RecordError("target must be 0/1")
        if self.rows.size and not np.isfinite(self.rows).all():
            raise RecordError("feature table contains non-finite values")

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def width(self) -> int:
        return self.rows.shape[1]

    def keys(self) -> list[tuple]:
        key_type = KEY_TYPES[self.level]
        cols = [self.row_keys[c].tolist() for c in KEY_COLUMNS[self.level]]
        return [key_type(*vals) for vals in zip(*cols)]

    def board_ids(self) -> np.ndarray:
        """Integer id per row identifying its board (for group-aware splits)."""
        return pd.MultiIndex.from_frame(self.row_keys[["panel_id", "figure_id"]]).factorize()[0]

    def take(self, idx) -> "FeatureTable":
        idx = np.asarray(idx)
        return FeatureTable(
            self.column_names,
            self.rows[idx],
            self.row_keys.iloc[idx],
            self.level,
            None if self.target is None else self.target[idx],
            dict(self.meta),
        )

    def select_columns(self, names: Sequence[str]) -> "FeatureTable":
        pos = {c: i for i, c in enumerate(self.column_names)}
        missing = [n for n in names if n not in pos]
        if missing:
            raise RecordError(f"unknown columns: {missing[:5]}")
        cols = [pos[n] for n in names]
        return FeatureTable(tuple(names), self.rows[:, cols], self.row_keys, self.level,
                            self.target, dict(self.meta))

    def with_target(self, target) -> "FeatureTable":
        return FeatureTable(self.column_names, self.rows, self.row_keys, self.level, target,
                            dict(self.meta))

    def to_csv(self, path) -> None:
        """Write key columns (``__key_*``), features, then ``__target__``."""
        out = pd.DataFrame({f"__key_{c}": self.row_keys[c].to_numpy() for c in KEY_COLUMNS[self.level]})
        feats = pd.DataFrame(self.rows, columns=list(self.column_names))
        out = pd.concat([out, feats], axis=1)
        if self.target is not None:
            out["__target__"] = self.target
        out.to_csv(path, index=False, lineterminator="\n")

    @classmethod
    def from_csv(cls, path, level: Level) -> "FeatureTable":
        df = pd.read_csv(path, dtype={"__key_component_id": str})
        key_cols = [c for c in df.columns if c.startswith("__key_")]
        keys = df[key_cols].rename(columns=lambda c: c[len("__key_"):])
        target = df["__target__"].to_numpy() if "__target__" in df.columns else None
        feat_cols = [c for c in df.columns if c not in key_cols and c != "__target__"]
        return cls(tuple(feat_cols), df[feat_cols].to_numpy(dtype=np.float64), keys, level, target)
