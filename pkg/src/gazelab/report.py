"""Result tables in the fixed-effect / SE / variance-component layouts.

A :class:`Table` holds raw numbers (``None`` for an empty cell) and renders
either as aligned text or as a JSON-ready dict. Numbers are rounded to six
significant digits in both renderings so repeated runs diff cleanly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .cox import HazardFit, total_effect
from .design import LAG
from .glm import FitResult
from .rle import TO_TARGET

TERMS = ("Intercept", LAG, "Privileged", "Contrast", "Time", "Priv*Time", "Contrast*Time")
METHODS = ("GLM", "AR1", "MA25", "LAG", "COX")
VARIANCE_MODELS = ("GLM", "LAG", "AR1", "MA25")
VARIANCE_COLUMNS = ("Subject variance", "Item variance", "phi", "alpha")
# hazard-model terms reported as main + 0->1 interaction
TOTAL_EFFECT_TERMS = ("Privileged", "Contrast")
EMPTY = "--"


def sig6(x):
    """Round to six significant digits; non-finite values pass through."""
    if x is None or isinstance(x, str):
        return x
    x = float(x)
    if not math.isfinite(x) or x == 0.0:
        return x
    return float(f"{x:.6g}")


def format_cell(x) -> str:
    if x is None:
        return EMPTY
    if isinstance(x, str):
        return x
    return f"{float(x):.6g}"


@dataclass
class Table:
    title: str
    row_label: str
    rows: tuple
    columns: tuple
    cells: dict = field(default_factory=dict)   # (row, col) -> number | str | None
    note: str = ""

    def get(self, row, col):
        return self.cells.get((row, col))

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "row_label": self.row_label,
            "rows": list(self.rows),
            "columns": list(self.columns),
            "cells": {r: {c: sig6(self.get(r, c)) for c in self.columns} for r in self.rows},
            "note": self.note,
        }

    def render(self) -> str:
        header = [self.row_label, *self.columns]
        body = [[r, *(format_cell(self.get(r, c)) for c in self.columns)] for r in self.rows]
        widths = [max(len(line[k]) for line in [header, *body]) for k in range(len(header))]

        def line(cells):
            first = cells[0].ljust(widths[0])
            rest = (c.rjust(w) for c, w in zip(cells[1:], widths[1:]))
            return "  ".join([first, *rest]).rstrip()

        rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
        out = [self.title, rule, line(header), rule, *(line(b) for b in body), rule]
        if self.note:
            out.append(self.note)
        return "\n".join(out) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "Table":
        cells = {(r, c): v for r, row in d["cells"].items() for c, v in row.items()}
        return cls(d["title"], d["row_label"], tuple(d["rows"]), tuple(d["columns"]), cells,
                   d.get("note", ""))


def _column_values(fit, robust):
    """Per-term (estimate, se) for one fitted model."""
    if isinstance(fit, HazardFit):
        out = {}
        for term in TOTAL_EFFECT_TERMS:
            inter = f"{term}:{TO_TARGET}"
            if term in fit.names and inter in fit.names:
                te = total_effect(fit, term, inter)
                out[term] = (te.estimate, te.se)
        return out
    se = fit.std_errors(robust=robust)
    return {name: (float(fit[name]), float(se[name])) for name in fit.names}


def _se_is_robust(fit):
    return isinstance(fit, HazardFit) or getattr(fit, "covariance_robust", None) is not None


def coefficient_table(fits: dict, columns=None) -> Table:
    """Fixed-effect estimates. ``fits`` maps a column label to a fit object."""
    columns = tuple(columns or fits)
    table = Table("Fixed-effect estimates", "Term", TERMS, columns,
                  note="COX: total effects (main + 0->1 transition interaction).")
    for col in columns:
        fit = fits.get(col)
        if fit is None:
            continue
        for term, (est, _) in _column_values(fit, None).items():
            if term in TERMS:
                table.cells[(term, col)] = est
    return table


def se_table(fits: dict, columns=None) -> Table:
    """Standard errors: cluster-robust where the fitter provides them."""
    columns = tuple(columns or fits)
    table = Table("Standard errors", "Term", TERMS, columns,
                  note="Robust (cluster sandwich) SEs for GEE and COX; "
                       "COX SEs are for total effects.")
    for col in columns:
        fit = fits.get(col)
        if fit is None:
            continue
        for term, (_, se) in _column_values(fit, _se_is_robust(fit) or None).items():
            if term in TERMS:
                table.cells[(term, col)] = se
    return table


def phi_cell(used, estimated):
    """``"0.95 (0.948)"``: working phi, then the free estimate or ``--``."""
    if used is None:
        return None
    est = EMPTY if estimated is None else format_cell(estimated)
    return f"{format_cell(used)} ({est})"


def variance_table(fits: dict, rows=None, phi_estimates: dict | None = None) -> Table:
    """Random-effect variances for mixed fits; working phi and scale for GEE fits.

    ``phi_estimates`` maps a row label to the freely estimated phi shown in
    parentheses; rows without an entry fall back to the fit's own moment
    estimate for AR(1), and ``--`` otherwise.
    """
    rows = tuple(rows or (r for r in VARIANCE_MODELS if r in fits))
    phi_estimates = phi_estimates or {}
    table = Table("Random-effect variances and correlation parameters", "Model", rows,
                  VARIANCE_COLUMNS,
                  note="phi: working value (free estimate in parentheses; -- if not estimated).")
    for row in rows:
        fit = fits.get(row)
        if not isinstance(fit, FitResult):
            continue
        if fit.variance_components:
            table.cells[(row, "Subject variance")] = fit.variance_components.get("subject")
            table.cells[(row, "Item variance")] = fit.variance_components.get("item")
        if fit.model.startswith("gee"):
            kind = fit.diagnostics.get("kind")
            if kind != "independence":
                est = phi_estimates.get(row)
                if est is None and kind == "ar1":
                    est = fit.diagnostics.get("phi_moment")
                table.cells[(row, "phi")] = phi_cell(fit.correlation, est)
            table.cells[(row, "alpha")] = fit.dispersion
    return table


def tables_to_json(tables: dict, manifest_ref: str | None = None) -> str:
    doc = {"manifest": manifest_ref, "tables": {k: t.to_dict() for k, t in tables.items()}}
    return json.dumps(doc, indent=2) + "\n"


def tables_to_text(tables: dict, manifest_ref: str | None = None) -> str:
    parts = [t.render() for t in tables.values()]
    if manifest_ref:
        parts.append(f"manifest: {manifest_ref}\n")
    return "\n".join(parts)
