"""Command-line front end: ``spidefect generate | inspect | run``.

Exit codes: 0 success, 2 usage or configuration error, 3 data or schema
error, 4 training error, 5 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from collections import Counter
from pathlib import Path

import yaml

from .core import BoardLayout, EncodingConfig, Level, OperatorLabel, RepairLabel
from .errors import (
    ConfigError,
    EmptyInputError,
    RecordError,
    SchemaError,
    SpiDefectError,
    StructuralError,
    TrainingError,
)
from .features import ClassificationTask
from .gbdt import TrainConfig
from .ingest import SchemaConfig, read_aoi, read_spi, write_aoi, write_spi
from .pipeline import ComponentMode, FusionKind, FusionRule, PipelineError, RunConfig, infer_layout, run
from .synthgen import GeneratorConfig, generate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING, EXIT_IO = 0, 2, 3, 4, 5
HELP_WIDTH = 100
DEFAULT_TOP_K = 10
CONFIG_SECTIONS = ("generator", "run", "train", "schema", "encoding")


# -- config file ---------------------------------------------------------------

def _check_keys(section: str, values: dict, allowed) -> None:
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {', '.join(unknown)}")


def load_config(path) -> dict:
    """Read a YAML config; every key must be known (typos are errors, not ignored)."""
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping of sections")
    _check_keys("<top level>", data, CONFIG_SECTIONS)
    field_names = {
        "generator": [f.name for f in dataclasses.fields(GeneratorConfig)],
        "train": [f.name for f in dataclasses.fields(TrainConfig)],
        "schema": [f.name for f in dataclasses.fields(SchemaConfig)],
        "encoding": [f.name for f in dataclasses.fields(EncodingConfig)],
        "run": ["task", "levels", "component_mode", "top_n_components", "folds", "fusion",
                "fusion_threshold", "seed", "allow_board_c2c3"],
    }
    for section, values in data.items():
        if values is None:
            data[section] = {}
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        _check_keys(section, values, field_names[section])
    if "layout" in data.get("generator", {}):
        layout = data["generator"]["layout"]
        if not isinstance(layout, dict):
            raise ConfigError("generator.layout must be a mapping")
        _check_keys("generator.layout", layout, ("components", "figures_per_panel"))
    return data


def _build(cls, values: dict, section: str):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} settings: {exc}") from exc


def generator_config(cfg: dict) -> GeneratorConfig:
    values = dict(cfg.get("generator", {}))
    if "layout" in values:
        lay = values["layout"]
        values["layout"] = BoardLayout({str(k): int(v) for k, v in lay["components"].items()},
                                       int(lay.get("figures_per_panel", 8)))
    return _build(GeneratorConfig, values, "generator")


def schema_config(cfg: dict) -> SchemaConfig:
    return _build(SchemaConfig, dict(cfg.get("schema", {})), "schema")


def run_config(cfg: dict, args) -> RunConfig:
    values = dict(cfg.get("run", {}))
    train = _build(TrainConfig, dict(cfg.get("train", {})), "train")
    enc = dict(cfg.get("encoding", {}))
    if "spi_vocabulary" in enc:
        enc["spi_vocabulary"] = tuple(enc["spi_vocabulary"])
    encoding = _build(EncodingConfig, enc, "encoding")
    overrides = {"task": args.task, "levels": args.levels, "component_mode": args.component_mode,
                 "top_n_components": args.top_n, "folds": args.folds, "fusion": args.fusion,
                 "seed": args.seed}
    values.update({k: v for k, v in overrides.items() if v is not None})
    if args.rounds is not None:
        train = dataclasses.replace(train, num_rounds=args.rounds)
    if args.max_depth is not None:
        train = dataclasses.replace(train, max_depth=args.max_depth)
    if args.top_k is not None:
        train = dataclasses.replace(train, feature_top_k=args.top_k)
    levels = values.pop("levels", ["pin"])
    if isinstance(levels, str):
        levels = levels.split(",")
    fusion = FusionRule(values.pop("fusion", FusionKind.ANY_POSITIVE.value),
                        float(values.pop("fusion_threshold", 0.5)))
    try:
        return RunConfig(levels=tuple(Level(v.strip()) for v in levels), train=train,
                         encoding=encoding, fusion=fusion, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid run settings: {exc}") from exc


# -- argument parsing ----------------------------------------------------------

def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH, max_help_position=32)


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def _levels(text: str) -> list[str]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    valid = [l.value for l in Level]
    bad = [p for p in parts if p not in valid]
    if bad or not parts:
        raise argparse.ArgumentTypeError(
            f"invalid level(s) {','.join(bad) or text!r}; choose from {','.join(valid)}")
    return parts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spidefect", formatter_class=_formatter,
        description="PCB defect detection from solder-paste-inspection data with boosted trees.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    gen = sub.add_parser("generate", formatter_class=_formatter,
                         help="write synthetic SPI and AOI CSV files",
                         description="Write seeded synthetic SPI and AOI CSV files.")
    gen.add_argument("--config", metavar="PATH", help="YAML config file (generator section)")
    gen.add_argument("--out-spi", metavar="PATH", required=True, help="SPI CSV to write")
    gen.add_argument("--out-aoi", metavar="PATH", required=True, help="AOI CSV to write")
    gen.add_argument("--panels", type=_positive_int, metavar="N", help="number of panels")
    gen.add_argument("--seed", type=int, metavar="N", help="random seed")
    gen.add_argument("--signal", type=float, metavar="S",
                     help="planted signal strength (0 = labels independent of features)")
    gen.add_argument("--defect-rate", type=float, metavar="P", help="pin defect rate")

    ins = sub.add_parser("inspect", formatter_class=_formatter,
                         help="summarize an SPI or AOI CSV file",
                         description="Print the ingest report and summary histograms of one file.")
    which = ins.add_mutually_exclusive_group(required=True)
    which.add_argument("--spi", metavar="PATH", help="SPI CSV to inspect")
    which.add_argument("--aoi", metavar="PATH", help="AOI CSV to inspect")
    ins.add_argument("--config", metavar="PATH", help="YAML config file (schema section)")

    r = sub.add_parser("run", formatter_class=_formatter, help="train and evaluate models",
                       description="Build datasets, cross-validate models, fuse verdicts and "
                                   "write the run report.")
    r.add_argument("--config", metavar="PATH", help="YAML config file")
    r.add_argument("--spi", metavar="PATH", required=True, help="SPI CSV input")
    r.add_argument("--aoi", metavar="PATH", required=True, help="AOI CSV input")
    r.add_argument("--task", choices=[t.value for t in ClassificationTask],
                   help="c1 AOI defect, c2 operator label, c3 repair label")
    r.add_argument("--levels", type=_levels, metavar="LIST",
                   help="comma-separated subset of pin,component,board")
    r.add_argument("--out-dir", metavar="DIR", required=True, help="directory for all outputs")
    r.add_argument("--jobs", type=_positive_int, metavar="N",
                   help="worker threads (default: available cores); results do not depend on it")
    r.add_argument("--seed", type=int, metavar="N", help="seed for fold assignment")
    r.add_argument("--folds", type=_positive_int, metavar="K", help="number of folds")
    r.add_argument("--component-mode", choices=[m.value for m in ComponentMode],
                   help="one model per component or one combined model")
    r.add_argument("--top-n", type=_positive_int, metavar="N",
                   help="board level: model the N components with most AOI defects")
    r.add_argument("--fusion", choices=[k.value for k in FusionKind], help="verdict fusion rule")
    r.add_argument("--rounds", type=int, metavar="N", help="boosting rounds")
    r.add_argument("--max-depth", type=int, metavar="N", help="maximum tree depth")
    r.add_argument("--top-k", type=_positive_int, metavar="K", nargs="?", const=DEFAULT_TOP_K,
                   help=f"keep only the K most important features (K={DEFAULT_TOP_K} if omitted)")
    return parser


# -- commands ------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    gcfg = generator_config(cfg)
    overrides = {"num_panels": args.panels, "seed": args.seed,
                 "planted_signal_strength": args.signal, "pin_defect_rate": args.defect_rate}
    gcfg = dataclasses.replace(gcfg, **{k: v for k, v in overrides.items() if v is not None})
    gcfg.validate()
    pins, aoi = generate(gcfg)
    write_spi(pins, args.out_spi)
    write_aoi(aoi, args.out_aoi)
    bad = sum(a.operator_label is OperatorLabel.BAD for a in aoi)
    nrep = sum(a.repair_label is RepairLabel.NOT_POSSIBLE_TO_REPAIR for a in aoi)
    print(f"spi_records={len(pins)}")
    print(f"aoi_records={len(aoi)}")
    print(f"pin_defect_rate={len(aoi) / len(pins):.6f}")
    print(f"operator_bad_rate={bad / len(aoi) if aoi else 0.0:.6f}")
    print(f"not_repairable_rate={nrep / bad if bad else 0.0:.6f}")
    return EXIT_OK


def _histogram(title: str, counts: dict, total: int) -> list[str]:
    lines = [f"[{title}]"]
    for key, n in counts.items():
        lines.append(f"{key}={n} ({n / total:.4f})" if total else f"{key}={n}")
    return lines


def cmd_inspect(args) -> int:
    schema = schema_config(load_config(args.config))
    if args.spi:
        pins, report = read_spi(args.spi, schema)
        print(report.to_text(), end="")
        if len(pins):
            layout = infer_layout(pins)
            boards = len({(p, f) for p, f in zip(pins.panel_id.tolist(), pins.figure_id.tolist())})
            print(f"components={len(layout.components)}")
            print(f"pins_per_board={sum(layout.components.values())}")
            print(f"boards={boards}")
            hist = dict(sorted(layout.pin_count_histogram().items()))
            print("\n".join(_histogram("pins per component (pins=components)",
                                       {f"pins.{k}": v for k, v in hist.items()},
                                       len(layout.components))))
            results = Counter(pins.spi_result.tolist())
            print("\n".join(_histogram("spi result", dict(sorted(results.items())), len(pins))))
    else:
        aoi, report = read_aoi(args.aoi, schema)
        print(report.to_text(), end="")
        n = len(aoi)
        faults = Counter(a.machine_label for a in aoi)
        print("\n".join(_histogram("fault type", dict(sorted(faults.items())), n)))
        bad = sum(a.operator_label is OperatorLabel.BAD for a in aoi)
        nrep = sum(a.repair_label is RepairLabel.NOT_POSSIBLE_TO_REPAIR for a in aoi)
        blank = sum(a.pin_number is None for a in aoi)
        print("[cascade]")
        print(f"aoi_records={n}")
        print(f"operator_bad={bad} ({bad / n if n else 0.0:.4f})")
        print(f"not_repairable={nrep} ({nrep / bad if bad else 0.0:.4f} of operator_bad)")
        print(f"missing_pin_number={blank} ({blank / n if n else 0.0:.4f})")
        by_component = Counter(a.component_id for a in aoi)
        top = sorted(by_component, key=lambda c: (-by_component[c], c))[:10]
        print("\n".join(_histogram("faults by component (top 10)",
                                   {c: by_component[c] for c in top}, n)))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    rcfg = run_config(cfg, args)
    report = run(rcfg, args.spi, args.aoi, schema_config(cfg), jobs=args.jobs, out_dir=args.out_dir)
    for row in report.level_summary():
        print(f"{row['level']}: components={row['components']} f1={row['f1']:.4f} "
              f"macro_f1={row['macro_f1']:.4f} auc={row['auc']:.4f}")
    print(f"report={Path(args.out_dir) / 'report.txt'}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "inspect": cmd_inspect, "run": cmd_run}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, PipelineError):
        exc = exc.cause
    if isinstance(exc, ConfigError):
        return EXIT_USAGE
    if isinstance(exc, TrainingError):
        return EXIT_TRAINING
    if isinstance(exc, (SchemaError, EmptyInputError, RecordError, StructuralError)):
        return EXIT_DATA
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, SpiDefectError):
        return EXIT_DATA
    return EXIT_DATA


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except EmptyInputError as exc:
        print(f"error: empty input: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SpiDefectError, OSError, ValueError) as exc:
        code = exit_code_for(exc)
        kind = {EXIT_USAGE: "usage", EXIT_DATA: "data", EXIT_TRAINING: "training",
                EXIT_IO: "i/o"}[code]
        print(f"error ({kind}): {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
