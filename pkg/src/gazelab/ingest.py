"""Long-format loading and trial selection.

The loader returns a :class:`pandas.DataFrame` with canonical column names
(``subject, item, trial, time, y, contrast, privileged``) rather than a list of
row objects; a million-row eye-tracking export does not fit comfortably in
per-row Python objects. :func:`iter_records` yields :class:`ObservationRecord`
views when row objects are wanted.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np
import pandas as pd

from .errors import EmptyInputError, ParseError, SchemaError, StructureError

logger = logging.getLogger(__name__)

CANONICAL_COLUMNS = ("subject", "item", "trial", "time", "y", "contrast", "privileged")
DEFAULT_SCHEMA = {name: name for name in CANONICAL_COLUMNS}
DEFAULT_BIN_SECONDS = 0.01
_BINARY_COLUMNS = ("y", "contrast", "privileged")


@dataclass(frozen=True)
class ObservationRecord:
    subject_id: str
    item_id: str
    trial_index: int
    time_index: int
    y: int
    contrast: int
    privileged: int


@dataclass
class TrialSeries:
    """One subject x item trial: ordered 0/1 samples on a fixed time grid."""

    subject_id: str
    item_id: str
    samples: np.ndarray
    bin_seconds: float = DEFAULT_BIN_SECONDS
    contrast: int = 0
    privileged: int = 0
    trial_index: int = 1
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.int8)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise EmptyInputError(f"series {self.key} has no samples")
        if self.bin_seconds <= 0:
            raise ValueError("bin_seconds must be positive")

    @property
    def key(self):
        return (self.subject_id, self.item_id)

    @property
    def duration(self):
        return len(self.samples) * self.bin_seconds

    def __len__(self):
        return len(self.samples)

    def __eq__(self, other):
        if not isinstance(other, TrialSeries):
            return NotImplemented
        return (self.key == other.key
                and self.bin_seconds == other.bin_seconds
                and (self.contrast, self.privileged, self.trial_index)
                == (other.contrast, other.privileged, other.trial_index)
                and self.extra == other.extra
                and np.array_equal(self.samples, other.samples))


@dataclass
class ExclusionSummary:
    input_series: int = 0
    input_samples: int = 0
    repeated_trials: int = 0
    repeated_samples: int = 0
    constant_series: int = 0
    constant_samples: int = 0
    retained_series: int = 0
    retained_samples: int = 0

    @property
    def excluded_samples(self):
        return self.repeated_samples + self.constant_samples


def load_long_format(path, schema: Mapping[str, str] | None = None) -> pd.DataFrame:
    """Read a comma-separated long-format file.

    Parameters
    ----------
    path : str or Path
    schema : mapping, optional
        Canonical name -> column name in the file. Missing keys fall back to
        the canonical name.

    Returns
    -------
    DataFrame with the canonical columns, in file order. Identifiers are kept
    as strings.
    """
    path = Path(path)
    colmap = dict(DEFAULT_SCHEMA)
    if schema:
        colmap.update(schema)
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8",
                      skiprows=_leading_comments(path))
    for canon in CANONICAL_COLUMNS:
        if colmap[canon] not in raw.columns:
            raise SchemaError(colmap[canon], path)
    if raw.empty:
        raise EmptyInputError(f"{path} contains a header but no data rows")

    df = pd.DataFrame({canon: raw[colmap[canon]].str.strip() for canon in CANONICAL_COLUMNS})
    for canon in ("trial", "time") + _BINARY_COLUMNS:
        values = pd.to_numeric(df[canon], errors="coerce")
        bad = values.isna() | (values != values.round())
        if canon in _BINARY_COLUMNS:
            bad |= ~values.isin([0, 1])
        elif canon == "trial":
            bad |= values < 1
        else:
            bad |= values < 0
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0]) + 1
            raise ParseError(row, f"invalid {canon} value {df[canon].iloc[row - 1]!r}")
        df[canon] = values.astype(np.int64)
    return df


def _leading_comments(path) -> int:
    """Number of ``#`` lines before the header (used for provenance notes)."""
    n = 0
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            n += 1
    return n


def iter_records(frame: pd.DataFrame) -> Iterator[ObservationRecord]:
    for row in frame.itertuples(index=False):
        yield ObservationRecord(str(row.subject), str(row.item), int(row.trial), int(row.time),
                                int(row.y), int(row.contrast), int(row.privileged))


def records_frame(records) -> pd.DataFrame:
    """Coerce records (DataFrame, ObservationRecords or TrialSeries) to a canonical frame."""
    if isinstance(records, pd.DataFrame):
        return records
    records = list(records)
    if not records:
        raise EmptyInputError("no observation records")
    if isinstance(records[0], TrialSeries):
        parts = []
        for s in records:
            n = len(s.samples)
            parts.append(pd.DataFrame({
                "subject": s.subject_id, "item": s.item_id, "trial": s.trial_index,
                "time": np.arange(n), "y": s.samples.astype(np.int64),
                "contrast": s.contrast, "privileged": s.privileged}))
        return pd.concat(parts, ignore_index=True)
    return pd.DataFrame(
        [(r.subject_id, r.item_id, r.trial_index, r.time_index, r.y, r.contrast, r.privileged)
         for r in records], columns=list(CANONICAL_COLUMNS))


def apply_exclusions(records, bin_seconds: float = DEFAULT_BIN_SECONDS,
                     return_summary: bool = False, drop_constant: bool = True):
    """Keep the first trial per subject-item pair and drop constant series.

    ``records`` may be a canonical DataFrame, an iterable of
    :class:`ObservationRecord`, or previously selected :class:`TrialSeries`
    (the operation is idempotent; series keep their own ``bin_seconds``).
    Output is sorted by (subject, item). With ``drop_constant=False`` only the
    first-trial rule is applied.
    """
    if not isinstance(records, pd.DataFrame):
        records = list(records)
        if records and isinstance(records[0], TrialSeries):
            out, summary = _exclude_series(records, drop_constant)
            return _finish(out, summary, return_summary)
    df = records_frame(records)
    if df.empty:
        raise EmptyInputError("no observation records")
    summary = ExclusionSummary(input_samples=len(df))

    varying = df.groupby(["subject", "item"], sort=True)[["contrast", "privileged"]].nunique() > 1
    if varying.to_numpy().any():
        (subject, item), row = next(iter(varying[varying.any(axis=1)].iterrows()))
        cond = "contrast" if row["contrast"] else "privileged"
        raise StructureError(f"{cond} varies within subject {subject!r} item {item!r}")

    trial_sizes = df.groupby(["subject", "item", "trial"], sort=True).size()
    summary.input_series = len(trial_sizes)
    first = trial_sizes.reset_index().groupby(["subject", "item"], sort=True)["trial"].min()

    keyed = df.set_index(["subject", "item"])
    keep = keyed["trial"].to_numpy() == first.reindex(keyed.index).to_numpy()
    summary.repeated_trials = len(trial_sizes) - len(first)
    summary.repeated_samples = int((~keep).sum())
    kept = df.loc[keep].sort_values(["subject", "item", "time"], kind="stable")

    subj = kept["subject"].to_numpy()
    item = kept["item"].to_numpy()
    t = kept["time"].to_numpy()
    y = kept["y"].to_numpy()
    con = kept["contrast"].to_numpy()
    priv = kept["privileged"].to_numpy()
    trial = kept["trial"].to_numpy()
    new_group = np.ones(len(kept), bool)
    new_group[1:] = (subj[1:] != subj[:-1]) | (item[1:] != item[:-1])
    starts = np.flatnonzero(new_group)
    stops = np.append(starts[1:], len(kept))

    # time grid must run 0, 1, 2, ... within every group
    expected = np.arange(len(kept)) - np.repeat(starts, stops - starts)
    bad = np.flatnonzero(t != expected)
    if bad.size:
        g = np.searchsorted(starts, bad[0], side="right") - 1
        raise StructureError(f"time grid of subject {subj[starts[g]]!r} item "
                             f"{item[starts[g]]!r} is not consecutive from 0")

    out: list[TrialSeries] = []
    for a, b in zip(starts, stops):
        ys = y[a:b]
        if drop_constant and np.all(ys == ys[0]):
            summary.constant_series += 1
            summary.constant_samples += int(b - a)
            continue
        out.append(TrialSeries(str(subj[a]), str(item[a]), ys, bin_seconds,
                               contrast=int(con[a]), privileged=int(priv[a]),
                               trial_index=int(trial[a])))
    return _finish(out, summary, return_summary)


def _exclude_series(series, drop_constant=True):
    summary = ExclusionSummary(input_series=len(series),
                               input_samples=sum(len(s) for s in series))
    first: dict = {}
    for s in series:
        cur = first.get(s.key)
        if cur is not None and (cur.contrast, cur.privileged) != (s.contrast, s.privileged):
            raise StructureError(f"conditions vary within subject {s.subject_id!r} "
                                 f"item {s.item_id!r}")
        if cur is None or s.trial_index < cur.trial_index:
            first[s.key] = s
    out = []
    for key in sorted(first):
        s = first[key]
        if drop_constant and np.all(s.samples == s.samples[0]):
            summary.constant_series += 1
            summary.constant_samples += len(s)
            continue
        out.append(s)
    summary.repeated_trials = len(series) - len(first)
    summary.repeated_samples = summary.input_samples - sum(len(s) for s in first.values())
    return out, summary


def _finish(out, summary, return_summary):
    summary.retained_series = len(out)
    summary.retained_samples = sum(len(s) for s in out)
    logger.info("exclusions: %d repeated trials (%d samples), %d constant series "
                "(%d samples); %d series retained",
                summary.repeated_trials, summary.repeated_samples,
                summary.constant_series, summary.constant_samples, summary.retained_series)
    if return_summary:
        return out, summary
    return out


def series_by_key(series: Iterable[TrialSeries]) -> dict:
    counts = Counter(s.key for s in series)
    dup = [k for k, n in counts.items() if n > 1]
    if dup:
        raise StructureError(f"duplicate subject-item pairs: {dup[:3]}")
    return {s.key: s for s in series}
