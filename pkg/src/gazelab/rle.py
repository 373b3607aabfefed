"""Run-length encoding of binary series and conversion of runs to survival records."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import EmptyInputError, SchemaError, StructureError
from .ingest import DEFAULT_BIN_SECONDS, TrialSeries

TO_TARGET = "to_target"      # 0 -> 1, ends an off-target run
FROM_TARGET = "from_target"  # 1 -> 0, ends an on-target run
EPISODE_COLUMNS = ("subject", "item", "run", "state", "length", "start", "stop", "event")
COVARIATE_COLUMNS = ("contrast", "privileged")


class RunEpisode(NamedTuple):
    """One maximal constant block. ``event`` is 0 only for a trial's last run."""

    subject_id: str
    item_id: str
    run_index: int
    state: int
    length: int
    start_time: float
    stop_time: float
    event: int


@dataclass(frozen=True)
class SurvivalRecord:
    start: float
    stop: float
    event: int
    state: int
    covariates: Mapping[str, float]
    cluster_key: tuple

    @property
    def stratum(self):
        return FROM_TARGET if self.state == 1 else TO_TARGET

    @property
    def transition_type(self):
        return "1->0" if self.state == 1 else "0->1"


@dataclass
class SurvivalSet:
    """Survival records plus the final runs that were dropped to build them."""

    records: list = field(default_factory=list)
    dropped: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]


def run_lengths(samples) -> tuple[np.ndarray, np.ndarray]:
    """Return (states, lengths) of the maximal constant blocks of ``samples``."""
    x = np.asarray(samples)
    if x.size == 0:
        raise EmptyInputError("cannot encode an empty series")
    change = np.flatnonzero(x[1:] != x[:-1]) + 1
    starts = np.concatenate(([0], change))
    lengths = np.diff(np.concatenate((starts, [x.size])))
    return x[starts].astype(int), lengths.astype(int)


def rle_encode(series: TrialSeries) -> list[RunEpisode]:
    states, lengths = run_lengths(series.samples)
    stops = np.cumsum(lengths)
    bin_s = series.bin_seconds
    # round away float noise so 3 * 0.01 is stored as 0.03
    stop_s = np.round(stops * bin_s, 12)
    start_s = np.concatenate(([0.0], stop_s[:-1]))
    n = len(lengths)
    events = [1] * (n - 1) + [0]
    sid, iid = series.subject_id, series.item_id
    return [RunEpisode(sid, iid, k + 1, st, ln, a, b, ev)
            for k, (st, ln, a, b, ev) in enumerate(zip(states.tolist(), lengths.tolist(),
                                                       start_s.tolist(), stop_s.tolist(),
                                                       events))]


def rle_decode(episodes: Sequence[RunEpisode], bin_seconds: float = DEFAULT_BIN_SECONDS,
               **series_kwargs) -> TrialSeries:
    """Rebuild the series, checking alternation, contiguity and run durations."""
    if not episodes:
        raise EmptyInputError("cannot decode an empty episode list")
    cols = np.array(list(zip(*episodes))[2:7], dtype=float)
    runs, states, lengths = cols[:3].astype(np.int64)
    starts, stops = cols[3], cols[4]
    if np.any(cols[:3] != np.round(cols[:3])):
        raise StructureError("run index, state and length must be integers")
    tol = 1e-9 * max(1.0, bin_seconds)

    def fail(mask, message):
        k = int(np.argmax(mask))
        raise StructureError(message(k))

    if np.any(lengths < 1):
        fail(lengths < 1, lambda k: f"run {runs[k]} has non-positive length {lengths[k]}")
    if np.any((states != 0) & (states != 1)):
        fail((states != 0) & (states != 1),
             lambda k: f"run {runs[k]} has non-binary state {states[k]}")
    same = states[1:] == states[:-1]
    if np.any(same):
        fail(same, lambda k: f"runs {runs[k]} and {runs[k + 1]} do not alternate state")
    expected = np.concatenate(([0.0], stops[:-1]))
    off = np.abs(starts - expected) > tol + 1e-9 * np.abs(expected)
    if np.any(off):
        fail(off, lambda k: f"run {runs[k]} starts at {starts[k]}, expected {expected[k]}")
    span = lengths * bin_seconds
    bad = np.abs((stops - starts) - span) > tol + 1e-9 * span
    if np.any(bad):
        fail(bad, lambda k: f"run {runs[k]} spans {stops[k] - starts[k]}s but has "
                            f"{lengths[k]} bins")
    first = episodes[0]
    return TrialSeries(first.subject_id, first.item_id, np.repeat(states, lengths),
                       bin_seconds, **series_kwargs)


def episodes_to_survival(trials: Iterable[Sequence[RunEpisode]],
                         covariates: Mapping[tuple, Mapping[str, float]] | None = None
                         ) -> SurvivalSet:
    """Turn per-trial runs into (start, stop] transition records.

    The final run of each trial has no observed transition and is moved to
    ``SurvivalSet.dropped``. Covariates for a trial are looked up by
    (subject, item) and expanded with their products with the to-target
    indicator.
    """
    covariates = covariates or {}
    out = SurvivalSet()
    for episodes in trials:
        episodes = list(episodes)
        if not episodes:
            continue
        key = (episodes[0].subject_id, episodes[0].item_id)
        base = dict(covariates.get(key, {}))
        for ep in episodes[:-1]:
            out.records.append(SurvivalRecord(
                ep.start_time, ep.stop_time, 1, ep.state,
                transition_covariates(base, ep.state), key))
        out.dropped.append(episodes[-1])
    return out


def transition_covariates(base: Mapping[str, float], state: int) -> dict:
    """Main covariates plus their interaction with the 0->1 indicator."""
    to_target = 1.0 if state == 0 else 0.0
    cov = {name: float(v) for name, v in base.items()}
    for name, v in base.items():
        cov[f"{name}:{TO_TARGET}"] = float(v) * to_target
    return cov


def trial_covariates(series: TrialSeries) -> dict:
    return {"Privileged": float(series.privileged), "Contrast": float(series.contrast),
            **{k: float(v) for k, v in series.extra.items()}}


def write_episode_file(path, episodes_by_trial: Iterable[Sequence[RunEpisode]],
                       bin_seconds: float, covariates: Mapping[tuple, Mapping] | None = None,
                       comments: Sequence[str] = ()):
    """Write runs as CSV with a ``# bin_seconds=`` header comment.

    When ``covariates`` is given, ``contrast`` and ``privileged`` columns are
    appended so the file is self-sufficient for hazard models.
    """
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# bin_seconds={bin_seconds!r}\n")
        for line in comments:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        cols = list(EPISODE_COLUMNS) + (list(COVARIATE_COLUMNS) if covariates is not None else [])
        writer.writerow(cols)
        for episodes in episodes_by_trial:
            for ep in episodes:
                row = [ep.subject_id, ep.item_id, ep.run_index, ep.state, ep.length,
                       repr(ep.start_time), repr(ep.stop_time), ep.event]
                if covariates is not None:
                    cov = covariates[(ep.subject_id, ep.item_id)]
                    row += [int(cov["Contrast"]), int(cov["Privileged"])]
                writer.writerow(row)


def read_episode_file(path):
    """Read an episode file.

    Returns
    -------
    trials : list of list of RunEpisode, in file order
    bin_seconds : float
    covariates : dict keyed by (subject, item), empty if the file has none
    """
    path = Path(path)
    bin_seconds = None
    with path.open(encoding="utf-8") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("bin_seconds="):
                    bin_seconds = float(body.split("=", 1)[1])
                continue
            lines.append(line)
    if bin_seconds is None:
        raise SchemaError("# bin_seconds", path)
    reader = csv.DictReader(lines)
    if reader.fieldnames is None:
        raise EmptyInputError(f"{path} is empty")
    for col in EPISODE_COLUMNS:
        if col not in reader.fieldnames:
            raise SchemaError(col, path)
    has_cov = all(c in reader.fieldnames for c in COVARIATE_COLUMNS)
    trials: list[list[RunEpisode]] = []
    covariates = {}
    current_key = None
    for row in reader:
        ep = RunEpisode(row["subject"], row["item"], int(row["run"]), int(row["state"]),
                        int(row["length"]), float(row["start"]), float(row["stop"]),
                        int(row["event"]))
        key = (ep.subject_id, ep.item_id)
        if key != current_key:
            trials.append([])
            current_key = key
        trials[-1].append(ep)
        if has_cov:
            covariates[key] = {"Contrast": float(row["contrast"]),
                               "Privileged": float(row["privileged"])}
    return trials, bin_seconds, covariates


def is_episode_file(path) -> bool:
    with Path(path).open(encoding="utf-8") as fh:
        first = fh.readline()
    return first.startswith("# bin_seconds=")
