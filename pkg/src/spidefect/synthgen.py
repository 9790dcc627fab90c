"""Synthetic SPI/AOI tables with the production line's defect cascade.

Every panel draws from its own random substream seeded by ``(seed, panel_id)``,
so the output does not depend on the order in which panels are produced.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np
from scipy import integrate
from scipy.special import expit

from .core import (
    MACHINE_LABELS,
    NUMERIC_COLUMNS,
    NUMERIC_FIELDS,
    NONNEGATIVE_FIELDS,
    AoiRecord,
    BoardLayout,
    OperatorLabel,
    PinFrame,
    RepairLabel,
    default_layout,
    total_pins,
)
from .errors import CalibrationError, ConfigError

DEFAULT_SPI_DEFECT_MIX = {"W.Insufficient": 0.98, "E.shape": 0.008, "E.Position": 0.008, "other": 0.004}
DEFAULT_AOI_FAULT_MIX = {label: 0.25 for label in MACHINE_LABELS}

DEFAULT_FEATURE_MEANS = {
    "Volume(%)": 100.0,
    "Height(um)": 150.0,
    "Area(%)": 100.0,
    "OffsetX(%)": 0.0,
    "OffsetY(%)": 0.0,
    "SizeX": 800.0,
    "SizeY": 600.0,
    "Volume(um3)": 7.2e7,
    "Area(um2)": 4.8e5,
    "Shape(um)": 10.0,
    "PosX(mm)": 50.0,
    "PosY(mm)": 40.0,
}
DEFAULT_FEATURE_STDDEVS = {
    "Volume(%)": 5.0,
    "Height(um)": 10.0,
    "Area(%)": 5.0,
    "OffsetX(%)": 5.0,
    "OffsetY(%)": 5.0,
    "SizeX": 20.0,
    "SizeY": 20.0,
    "Volume(um3)": 3.6e6,
    "Area(um2)": 2.4e4,
    "Shape(um)": 2.0,
    "PosX(mm)": 25.0,
    "PosY(mm)": 20.0,
}

SIGNIFICANT_DIGITS = 6
SPAN_SECONDS = 9 * 86400
START_DATE = np.datetime64("2024-03-04T06:00:00")


@dataclass
class GeneratorConfig:
    seed: int = 0
    num_panels: int = 200
    layout: BoardLayout = field(default_factory=default_layout)
    pin_defect_rate: float = 0.004
    operator_bad_rate: float = 0.040
    not_repairable_rate: float = 0.805
    spi_flag_rate: float = 0.01
    spi_result_defect_mix: dict = field(default_factory=lambda: dict(DEFAULT_SPI_DEFECT_MIX))
    aoi_fault_mix: dict = field(default_factory=lambda: dict(DEFAULT_AOI_FAULT_MIX))
    planted_signal_strength: float = 0.0
    missing_pin_number_rate: float = 0.05
    feature_means: dict = field(default_factory=lambda: dict(DEFAULT_FEATURE_MEANS))
    feature_stddevs: dict = field(default_factory=lambda: dict(DEFAULT_FEATURE_STDDEVS))
    num_boards: int | None = None  # None: every panel full; else the last panel is partial

    @property
    def board_count(self) -> int:
        if self.num_boards is None:
            return self.num_panels * self.layout.figures_per_panel
        return self.num_boards

    def validate(self) -> None:
        if self.num_panels < 1:
            raise ConfigError(f"num_panels must be positive, got {self.num_panels}")
        if self.num_boards is not None:
            figs = self.layout.figures_per_panel
            if not (self.num_panels - 1) * figs < self.num_boards <= self.num_panels * figs:
                raise ConfigError(
                    f"num_boards={self.num_boards} does not fit {self.num_panels} panels of {figs}")
        if not self.layout.components:
            raise ConfigError("layout has no components")
        for name in ("pin_defect_rate", "operator_bad_rate", "not_repairable_rate",
                     "spi_flag_rate", "missing_pin_number_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        for name in ("spi_result_defect_mix", "aoi_fault_mix"):
            mix = getattr(self, name)
            if not mix or any(p < 0 for p in mix.values()):
                raise ConfigError(f"{name} must be a non-empty distribution")
            if abs(sum(mix.values()) - 1.0) > 1e-9:
                raise ConfigError(f"{name} sums to {sum(mix.values())}, not 1")
        if self.planted_signal_strength < 0 or not math.isfinite(self.planted_signal_strength):
            raise ConfigError("planted_signal_strength must be a finite nonnegative number")
        for name in ("feature_means", "feature_stddevs"):
            missing = [c for c in NUMERIC_COLUMNS if c not in getattr(self, name)]
            if missing:
                raise ConfigError(f"{name} lacks entries for {missing}")
        if any(self.feature_stddevs[c] <= 0 for c in NUMERIC_COLUMNS):
            raise ConfigError("feature_stddevs must be positive")


def defect_probability(deficit, intercept: float, strength: float):
    """Per-pin AOI defect probability given the standardized volume deficit."""
    return expit(intercept + strength * np.asarray(deficit, dtype=np.float64))


def _expected_rate(intercept: float, strength: float) -> float:
    phi = NormalDist().pdf
    value, _ = integrate.quad(lambda z: expit(intercept + strength * z) * phi(z), -14.0, 14.0,
                              epsabs=1e-14, epsrel=1e-12, limit=400)
    return value


def calibrate_signal(config: GeneratorConfig, max_steps: int = 200) -> float:
    """Intercept ``b`` with E[logistic(b + s*Z)] = pin_defect_rate for standard normal Z."""
    p = config.pin_defect_rate
    s = config.planted_signal_strength
    if not 0.0 < p < 1.0:
        raise CalibrationError(f"pin_defect_rate must lie strictly inside (0, 1), got {p}")
    if s == 0.0:
        return math.log(p / (1.0 - p))
    lo, hi = -60.0 - 10.0 * s, 60.0 + 10.0 * s
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        rate = _expected_rate(mid, s)
        if abs(rate - p) <= 1e-13 or hi - lo <= 1e-13:
            return mid
        if rate < p:
            lo = mid
        else:
            hi = mid
    mid = 0.5 * (lo + hi)
    if abs(_expected_rate(mid, s) - p) > 1e-4:
        raise CalibrationError(f"intercept search did not converge after {max_steps} steps")
    return mid


def round_significant(x: np.ndarray, digits: int = SIGNIFICANT_DIGITS) -> np.ndarray:
    """Round to ``digits`` significant decimal digits.

    The result is the double nearest to a decimal with at most ``digits``
    significant digits, so ``float(format(v, f".{digits}g")) == v`` holds and the
    value survives a CSV round trip unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    nz = (x != 0) & np.isfinite(x)
    vals = x[nz]
    scale = digits - 1 - np.floor(np.log10(np.abs(vals))).astype(np.int64)
    res = np.empty_like(vals)
    # powers of ten are exact doubles only up to 1e22; format anything beyond
    near = np.abs(scale) <= 22
    up = near & (scale >= 0)
    down = near & (scale < 0)
    p10 = 10.0 ** scale[up]
    res[up] = np.round(vals[up] * p10) / p10
    n10 = 10.0 ** (-scale[down])
    res[down] = np.round(vals[down] / n10) * n10
    for i in np.flatnonzero(~near):
        res[i] = float(format(vals[i], f".{digits}g"))
    out[nz] = res
    return out


def _layout_arrays(layout: BoardLayout):
    comp, pins, ptype = [], [], []
    for cid, count in layout.components.items():
        comp += [cid] * count
        pins += list(range(1, count + 1))
        ptype += [0 if count == 2 else 1] * count
    return np.array(comp, dtype=object), np.array(pins, dtype=np.int64), np.array(ptype, dtype=np.int64)


def generate(config: GeneratorConfig):
    """Return ``(PinFrame, list[AoiRecord])`` for the configured production run."""
    config.validate()
    layout = config.layout
    figs = layout.figures_per_panel
    per_board = total_pins(layout)
    per_panel = figs * per_board
    comp, pins, ptype = _layout_arrays(layout)

    means = np.array([config.feature_means[c] for c in NUMERIC_COLUMNS])
    stds = np.array([config.feature_stddevs[c] for c in NUMERIC_COLUMNS])
    nonneg = np.array([f in NONNEGATIVE_FIELDS for f in NUMERIC_FIELDS])
    vol = NUMERIC_FIELDS.index("volume_pct")

    strength = config.planted_signal_strength
    rate = config.pin_defect_rate
    intercept = None
    if strength > 0 and 0 < rate < 1:
        intercept = calibrate_signal(config)
    flag_cut = NormalDist().inv_cdf(1.0 - config.spi_flag_rate) if 0 < config.spi_flag_rate < 1 else None
    spi_tokens = list(config.spi_result_defect_mix)
    spi_probs = np.array([config.spi_result_defect_mix[t] for t in spi_tokens])
    aoi_tokens = list(config.aoi_fault_mix)
    aoi_probs = np.array([config.aoi_fault_mix[t] for t in aoi_tokens])

    n_total = config.num_panels * per_panel
    numeric = np.empty((n_total, len(NUMERIC_FIELDS)))
    spi_result = np.empty(n_total, dtype=object)
    stamps = np.empty(config.num_panels, dtype="datetime64[s]")
    aoi: list[AoiRecord] = []
    interval = SPAN_SECONDS / config.num_panels

    for t in range(config.num_panels):
        panel_id = t + 1
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, panel_id]))
        block = means + stds * rng.standard_normal((per_panel, len(NUMERIC_FIELDS)))
        block[:, nonneg] = np.maximum(block[:, nonneg], 0.0)
        block = round_significant(block)
        deficit = (means[vol] - block[:, vol]) / stds[vol]

        u_defect = rng.random(per_panel)
        u_token = rng.random(per_panel)
        if rate <= 0:
            defective = np.zeros(per_panel, dtype=bool)
        elif intercept is None:
            defective = u_defect < rate
        else:
            defective = u_defect < defect_probability(deficit, intercept, strength)

        tokens = np.full(per_panel, "Good", dtype=object)
        if flag_cut is not None or config.spi_flag_rate >= 1:
            flagged = deficit > flag_cut if flag_cut is not None else np.ones(per_panel, dtype=bool)
            picks = np.searchsorted(np.cumsum(spi_probs), u_token[flagged] * spi_probs.sum(), side="right")
            tokens[flagged] = np.array(spi_tokens, dtype=object)[np.minimum(picks, len(spi_tokens) - 1)]

        lo = t * per_panel
        numeric[lo:lo + per_panel] = block
        spi_result[lo:lo + per_panel] = tokens
        stamps[t] = START_DATE + np.timedelta64(int(t * interval), "s")

        idx = np.flatnonzero(defective)
        k = len(idx)
        u_op, u_rep, u_miss, u_lab = (rng.random(k) for _ in range(4))
        lab_pick = np.minimum(np.searchsorted(np.cumsum(aoi_probs), u_lab * aoi_probs.sum(), side="right"),
                              len(aoi_tokens) - 1)
        for j, i in enumerate(idx):
            fig, pos = divmod(int(i), per_board)
            bad = u_op[j] < config.operator_bad_rate
            repair = None
            if bad:
                repair = (RepairLabel.NOT_POSSIBLE_TO_REPAIR if u_rep[j] < config.not_repairable_rate
                          else RepairLabel.FALSE_SCRAP)
            aoi.append(AoiRecord(
                panel_id=panel_id,
                figure_id=fig + 1,
                component_id=str(comp[pos]),
                pin_number=None if u_miss[j] < config.missing_pin_number_rate else int(pins[pos]),
                machine_label=aoi_tokens[lab_pick[j]],
                operator_label=OperatorLabel.BAD if bad else OperatorLabel.GOOD,
                repair_label=repair,
            ))

    panel_ids = np.repeat(np.arange(1, config.num_panels + 1, dtype=np.int64), per_panel)
    figure_ids = np.tile(np.repeat(np.arange(1, figs + 1, dtype=np.int64), per_board), config.num_panels)
    pad_in_panel = np.tile(np.arange(1, per_panel + 1, dtype=np.int64), config.num_panels)
    stamp_str = np.datetime_as_string(stamps, unit="s")
    dates = np.array([s[:10] for s in stamp_str], dtype=object)
    times = np.array([s[11:] for s in stamp_str], dtype=object)
    frame = PinFrame(
        panel_id=panel_ids,
        figure_id=figure_ids,
        component_id=np.tile(comp, figs * config.num_panels),
        pin_number=np.tile(pins, figs * config.num_panels),
        date=np.repeat(dates, per_panel),
        time=np.repeat(times, per_panel),
        pad_id=pad_in_panel,
        pad_type=np.tile(ptype, figs * config.num_panels),
        numeric=numeric,
        spi_result=spi_result,
    )
    if config.num_boards is not None and config.num_boards < config.num_panels * figs:
        # trailing boards of the last panel were never produced
        keep = config.num_boards * per_board
        frame = frame.take(slice(0, keep))
        last_figs = config.num_boards - (config.num_panels - 1) * figs
        aoi = [a for a in aoi if a.panel_id < config.num_panels or a.figure_id <= last_figs]
    return frame, aoi
