"""Defect detection for PCB assembly from solder-paste-inspection measurements.

Modules, bottom up: ``core`` (records, keys, tables), ``synthgen`` (seeded
synthetic SPI/AOI data), ``ingest`` (CSV parsing and cleaning), ``features``
(pin/component/board tables and label joins), ``gbdt`` (boosted trees),
``evaluation`` (F1, ROC, cross-validation), ``pipeline`` (end-to-end runs)
and ``cli``.
"""
__version__ = "0.1.0"
