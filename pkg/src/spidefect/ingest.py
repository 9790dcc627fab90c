"""Read, validate and write the SPI and AOI CSV files."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import polars as pl

from .core import (
    NONNEGATIVE_FIELDS,
    NUMERIC_COLUMNS,
    NUMERIC_FIELDS,
    OTHER_TOKEN,
    AoiRecord,
    OperatorLabel,
    PinFrame,
    RepairLabel,
)
from .errors import EmptyInputError, SchemaError

log = logging.getLogger(__name__)

SPI_HEADER = ("PanelID", "FigureID", "Date", "Time", "ComponentID", "PinNumber", "PadID", "PadType",
              *NUMERIC_COLUMNS, "Result")
AOI_HEADER = ("PanelID", "FigureID", "ComponentID", "PinNumber", "MachineLabel", "OperatorLabel",
              "RepairLabel")

NAN_TOKENS = frozenset({"", "nan", "na", "n/a", "null", "none", "inf", "+inf", "-inf", "infinity",
                        "-infinity", "+infinity"})

_OPERATOR_TOKENS = {"good": OperatorLabel.GOOD, "bad": OperatorLabel.BAD}
_REPAIR_TOKENS = {
    "falsescrap": RepairLabel.FALSE_SCRAP,
    "notpossibletorepair": RepairLabel.NOT_POSSIBLE_TO_REPAIR,
}


@dataclass(frozen=True)
class SchemaConfig:
    """Header overrides and number format for files that differ from the defaults.

    ``spi_columns`` / ``aoi_columns`` map a canonical column name to the header
    actually used in the file.
    """

    spi_columns: dict = field(default_factory=dict)
    aoi_columns: dict = field(default_factory=dict)
    decimal: str = "."
    delimiter: str = ","

    def spi_header(self, canonical: str) -> str:
        return self.spi_columns.get(canonical, canonical)

    def aoi_header(self, canonical: str) -> str:
        return self.aoi_columns.get(canonical, canonical)


@dataclass
class ColumnStats:
    count: int = 0
    total: float = 0.0
    min: float = float("inf")
    max: float = float("-inf")

    @property
    def mean(self) -> float:
        return self.total / self.count if self.count else float("nan")

    def merge(self, other: "ColumnStats") -> "ColumnStats":
        return ColumnStats(self.count + other.count, self.total + other.total,
                           min(self.min, other.min), max(self.max, other.max))


@dataclass
class IngestReport:
    kind: str
    rows_read: int = 0
    rows_kept: int = 0
    rows_dropped_nan: int = 0
    rows_dropped_malformed: int = 0
    columns: dict = field(default_factory=dict)
    dropped: list = field(default_factory=list)  # (line number, reason)

    def merge(self, other: "IngestReport") -> "IngestReport":
        cols = dict(self.columns)
        for name, st in other.columns.items():
            cols[name] = cols[name].merge(st) if name in cols else st
        return IngestReport(
            self.kind,
            self.rows_read + other.rows_read,
            self.rows_kept + other.rows_kept,
            self.rows_dropped_nan + other.rows_dropped_nan,
            self.rows_dropped_malformed + other.rows_dropped_malformed,
            cols,
            sorted(self.dropped + other.dropped),
        )

    def to_text(self) -> str:
        lines = [
            f"kind={self.kind}",
            f"rows_read={self.rows_read}",
            f"rows_kept={self.rows_kept}",
            f"rows_dropped_nan={self.rows_dropped_nan}",
            f"rows_dropped_malformed={self.rows_dropped_malformed}",
        ]
        for name, st in self.columns.items():
            lines += [f"column.{name}.min={st.min:.6g}", f"column.{name}.max={st.max:.6g}",
                      f"column.{name}.mean={st.mean:.6g}"]
        lines += [f"dropped_line.{line}={reason}" for line, reason in self.dropped]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())


def _read_raw(path, delimiter: str) -> pl.DataFrame:
    if os.path.getsize(path) == 0:
        raise EmptyInputError(f"{path} is empty")
    try:
        df = pl.read_csv(path, separator=delimiter, infer_schema_length=0, encoding="utf8",
                         missing_utf8_is_empty_string=True, raise_if_empty=True)
    except pl.exceptions.NoDataError:
        raise EmptyInputError(f"{path} has no header row") from None
    df = df.rename({c: c.strip() for c in df.columns})
    return df.with_columns(pl.all().str.strip_chars().str.strip_suffix("\r"))


def _check_header(df, canonical, header_of, path):
    wanted = {c: header_of(c) for c in canonical}
    missing = [w for w in wanted.values() if w not in df.columns]
    if missing:
        raise SchemaError(missing, path)
    return {c: df[h] for c, h in wanted.items()}


def _parse_numeric(text: pl.Series, decimal: str):
    """Return (values, missing_mask, malformed_mask)."""
    if decimal != ".":
        text = text.str.replace_all(decimal, ".", literal=True)
    parsed = text.cast(pl.Float64, strict=False)
    values = parsed.fill_null(np.nan).to_numpy().astype(np.float64)
    nan_token = text.str.to_lowercase().is_in(list(NAN_TOKENS)).to_numpy()
    unparsed = parsed.is_null().to_numpy()
    malformed = unparsed & ~nan_token
    missing = ~malformed & ~np.isfinite(values)
    return values, missing, malformed


def _parse_int(text: pl.Series):
    values = text.cast(pl.Float64, strict=False).fill_null(np.nan).to_numpy().astype(np.float64)
    bad = ~np.isfinite(values)
    bad[~bad] = values[~bad] != np.round(values[~bad])
    return np.where(bad, 0, values).astype(np.int64), bad


def _normalize(text: pl.Series, pattern: str, fmt: str, check):
    """Validate date/time strings; non-canonical spellings are re-formatted."""
    out = text.to_numpy().astype(object)
    canon = text.str.contains(pattern).to_numpy()
    bad = np.zeros(len(text), dtype=bool)
    if canon.any():
        bad[canon] = check(text.filter(pl.Series(canon)))
    if not canon.all():
        rest = pd.to_datetime(pd.Series(out[~canon]), errors="coerce", format="mixed")
        bad[~canon] = rest.isna().to_numpy()
        out[~canon] = rest.dt.strftime(fmt).to_numpy(dtype=object)
    return out, bad


def _bad_dates(text: pl.Series) -> np.ndarray:
    return text.str.strptime(pl.Date, "%Y-%m-%d", strict=False).is_null().to_numpy()


def _bad_times(text: pl.Series) -> np.ndarray:
    return text.str.strptime(pl.Time, "%H:%M:%S", strict=False).is_null().to_numpy()


def _record_drops(report, nan_rows, malformed_rows, reasons):
    for i in np.flatnonzero(nan_rows | malformed_rows):
        # header is line 1
        report.dropped.append((int(i) + 2, reasons[i]))
    report.rows_dropped_nan = int(nan_rows.sum())
    report.rows_dropped_malformed = int(malformed_rows.sum())
    if report.dropped:
        log.warning("%s: dropped %d of %d rows (%d missing/non-finite, %d malformed)", report.kind,
                    len(report.dropped), report.rows_read, report.rows_dropped_nan,
                    report.rows_dropped_malformed)


def read_spi(path, schema: SchemaConfig = SchemaConfig(), report_path=None):
    """Parse an SPI export into a :class:`PinFrame`, dropping unusable rows."""
    df = _read_raw(path, schema.delimiter)
    cols = _check_header(df, SPI_HEADER, schema.spi_header, path)
    n = len(df)
    report = IngestReport("spi", rows_read=n)
    reasons = np.full(n, "", dtype=object)

    nan_rows = np.zeros(n, dtype=bool)
    malformed = np.zeros(n, dtype=bool)
    numeric = np.empty((n, len(NUMERIC_COLUMNS)))
    for j, (name, fname) in enumerate(zip(NUMERIC_COLUMNS, NUMERIC_FIELDS)):
        values, miss, bad = _parse_numeric(cols[name], schema.decimal)
        if fname in NONNEGATIVE_FIELDS:
            bad |= np.isfinite(values) & (values < 0)
        reasons[miss & (reasons == "")] = f"missing or non-finite {name}"
        reasons[bad & (reasons == "")] = f"unparseable {name}"
        nan_rows |= miss
        malformed |= bad
        numeric[:, j] = values

    ints = {}
    for name in ("PanelID", "FigureID", "PinNumber", "PadID", "PadType"):
        ints[name], bad = _parse_int(cols[name])
        reasons[bad & (reasons == "")] = f"unparseable {name}"
        malformed |= bad
    bad = ~np.isin(ints["PadType"], (0, 1))
    reasons[bad & (reasons == "")] = "PadType not 0/1"
    malformed |= bad
    dates, bad = _normalize(cols["Date"], r"^\d{4}-\d{2}-\d{2}$", "%Y-%m-%d", _bad_dates)
    reasons[bad & (reasons == "")] = "unparseable Date"
    malformed |= bad
    times, bad = _normalize(cols["Time"], r"^\d{2}:\d{2}:\d{2}$", "%H:%M:%S", _bad_times)
    reasons[bad & (reasons == "")] = "unparseable Time"
    malformed |= bad
    for name in ("ComponentID", "Result"):
        bad = (cols[name] == "").to_numpy()
        reasons[bad & (reasons == "")] = f"empty {name}"
        malformed |= bad

    # a row with a missing measurement counts as a NaN drop even if something else is off too
    malformed &= ~nan_rows
    keep = ~(nan_rows | malformed)
    _record_drops(report, nan_rows, malformed, reasons)
    report.rows_kept = int(keep.sum())

    frame = PinFrame(
        panel_id=ints["PanelID"][keep],
        figure_id=ints["FigureID"][keep],
        component_id=cols["ComponentID"].to_numpy().astype(object)[keep],
        pin_number=ints["PinNumber"][keep],
        date=dates[keep],
        time=times[keep],
        pad_id=ints["PadID"][keep],
        pad_type=ints["PadType"][keep],
        numeric=np.ascontiguousarray(numeric[keep]),
        spi_result=cols["Result"].to_numpy().astype(object)[keep],
    )
    for j, name in enumerate(NUMERIC_COLUMNS):
        col = frame.numeric[:, j]
        if len(col):
            report.columns[name] = ColumnStats(len(col), float(col.sum()), float(col.min()), float(col.max()))
    if report_path is not None:
        report.write(report_path)
    return frame, report


def read_aoi(path, schema: SchemaConfig = SchemaConfig(), report_path=None):
    """Parse an AOI defect export into :class:`AoiRecord` objects (file order)."""
    df = _read_raw(path, schema.delimiter)
    cols = _check_header(df, AOI_HEADER, schema.aoi_header, path)
    n = len(df)
    report = IngestReport("aoi", rows_read=n)
    records = []
    nan_rows = np.zeros(n, dtype=bool)
    malformed = np.zeros(n, dtype=bool)
    reasons = np.full(n, "", dtype=object)
    panel, bad_p = _parse_int(cols["PanelID"])
    figure, bad_f = _parse_int(cols["FigureID"])
    pin_text = cols["PinNumber"]
    pin_blank = (pin_text == "").to_numpy()
    pin, bad_pin = _parse_int(pin_text)
    bad_pin &= ~pin_blank
    comp, machine, operator, repair = (
        cols[c].to_list() for c in ("ComponentID", "MachineLabel", "OperatorLabel", "RepairLabel"))

    for i in range(n):
        if bad_p[i] or bad_f[i] or bad_pin[i] or comp[i] == "":
            malformed[i] = True
            reasons[i] = "unparseable identity columns"
            continue
        op = _OPERATOR_TOKENS.get(operator[i].casefold().replace(" ", ""))
        if op is None:
            malformed[i] = True
            reasons[i] = f"unknown OperatorLabel {operator[i]!r}"
            continue
        rep = None
        rep_text = repair[i]
        if rep_text and op is OperatorLabel.BAD:
            rep = _REPAIR_TOKENS.get("".join(ch for ch in rep_text.casefold() if ch.isalnum()))
            if rep is None:
                malformed[i] = True
                reasons[i] = f"unknown RepairLabel {rep_text!r}"
                continue
        records.append(AoiRecord(
            panel_id=int(panel[i]),
            figure_id=int(figure[i]),
            component_id=comp[i],
            pin_number=None if pin_blank[i] else int(pin[i]),
            machine_label=machine[i] or OTHER_TOKEN,
            operator_label=op,
            repair_label=rep,
        ))
    _record_drops(report, nan_rows, malformed, reasons)
    report.rows_kept = len(records)
    if report_path is not None:
        report.write(report_path)
    return records, report


def spi_dataframe(frame: PinFrame) -> pd.DataFrame:
    data = {
        "PanelID": frame.panel_id,
        "FigureID": frame.figure_id,
        "Date": frame.date,
        "Time": frame.time,
        "ComponentID": frame.component_id,
        "PinNumber": frame.pin_number,
        "PadID": frame.pad_id,
        "PadType": frame.pad_type,
    }
    for j, name in enumerate(NUMERIC_COLUMNS):
        data[name] = frame.numeric[:, j]
    data["Result"] = frame.spi_result
    return pd.DataFrame(data, columns=list(SPI_HEADER))


def write_spi(frame: PinFrame, path) -> None:
    """Write an SPI CSV; measurements are written with at most 6 significant digits."""
    from .synthgen import round_significant

    df = spi_dataframe(frame)
    for j, name in enumerate(NUMERIC_COLUMNS):
        df[name] = round_significant(frame.numeric[:, j])
    pl.from_pandas(df).write_csv(path, line_terminator="\n")


def write_aoi(records, path) -> None:
    rows = [
        (r.panel_id, r.figure_id, r.component_id, "" if r.pin_number is None else r.pin_number,
         r.machine_label, r.operator_label.value, "" if r.repair_label is None else r.repair_label.value)
        for r in records
    ]
    pd.DataFrame(rows, columns=list(AOI_HEADER)).to_csv(path, index=False, lineterminator="\n")
