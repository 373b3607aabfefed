"""Response vectors and design matrices for the regression fitters."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyInputError
from .ingest import TrialSeries

INTERCEPT = "Intercept"
LAG = "Ylag-1"
BASE_COLUMNS = ("Intercept", "Contrast", "Privileged", "Time", "Contrast*Time", "Priv*Time")


@dataclass
class ModelFrame:
    """Rows grouped into contiguous, time-ordered subject x item clusters.

    ``cluster`` holds an integer code per row into ``cluster_labels``;
    ``subject`` and ``item`` hold codes into ``subject_labels`` /
    ``item_labels`` for the crossed random-effects fitter.
    """

    response: np.ndarray
    design: np.ndarray
    column_names: list
    cluster: np.ndarray
    cluster_labels: list
    subject: np.ndarray
    subject_labels: list
    item: np.ndarray
    item_labels: list
    time: np.ndarray

    @property
    def n_rows(self):
        return len(self.response)

    @property
    def n_clusters(self):
        return len(self.cluster_labels)

    @property
    def cluster_keys(self):
        return [self.cluster_labels[c] for c in self.cluster]

    @property
    def has_lag(self):
        return LAG in self.column_names

    def cluster_bounds(self) -> np.ndarray:
        """Row offsets: cluster c spans rows ``bounds[c]:bounds[c + 1]``."""
        counts = np.bincount(self.cluster, minlength=self.n_clusters)
        return np.concatenate(([0], np.cumsum(counts)))

    def column(self, name):
        return self.design[:, self.column_names.index(name)]

    def subset_columns(self, names: Sequence[str]) -> "ModelFrame":
        idx = [self.column_names.index(n) for n in names]
        return ModelFrame(self.response, self.design[:, idx], list(names), self.cluster,
                          self.cluster_labels, self.subject, self.subject_labels, self.item,
                          self.item_labels, self.time)


def build_frame(series: Sequence[TrialSeries], lag: bool = False, time_scale: str = "unit",
                extra: Sequence[str] = ()) -> ModelFrame:
    """Stack trial series into a model frame.

    Parameters
    ----------
    series : sequence of TrialSeries
    lag : bool
        Append the previous sample as column ``Ylag-1`` and drop each
        series' first row. Length-1 series are skipped with a warning.
    time_scale : {"unit", "seconds"}
        ``unit`` maps sample t of a length-T series to t / (T - 1);
        ``seconds`` uses t * bin_seconds.
    extra : sequence of str
        Names of additional covariates taken from ``TrialSeries.extra``.
    """
    if time_scale not in ("unit", "seconds"):
        raise ValueError(f"unknown time_scale {time_scale!r}")
    series = sorted(series, key=lambda s: s.key)
    if lag:
        short = [s.key for s in series if len(s) < 2]
        if short:
            warnings.warn(f"{len(short)} length-1 series have no lagged row and were skipped",
                          stacklevel=2)
        series = [s for s in series if len(s) >= 2]
    if not series:
        raise EmptyInputError("no series to build a frame from")

    subject_labels = sorted({s.subject_id for s in series})
    item_labels = sorted({s.item_id for s in series})
    s_code = {k: i for i, k in enumerate(subject_labels)}
    i_code = {k: i for i, k in enumerate(item_labels)}

    ys, times, contrasts, privs, clusters, subjects, items, lags = [], [], [], [], [], [], [], []
    extras = {name: [] for name in extra}
    for c, s in enumerate(series):
        y = s.samples.astype(float)
        T = len(y)
        t = np.arange(T, dtype=float)
        if time_scale == "unit":
            t = t / (T - 1) if T > 1 else np.zeros(1)
        else:
            t = t * s.bin_seconds
        if lag:
            lags.append(y[:-1])
            y, t = y[1:], t[1:]
        n = len(y)
        ys.append(y)
        times.append(t)
        contrasts.append(np.full(n, float(s.contrast)))
        privs.append(np.full(n, float(s.privileged)))
        clusters.append(np.full(n, c))
        subjects.append(np.full(n, s_code[s.subject_id]))
        items.append(np.full(n, i_code[s.item_id]))
        for name in extra:
            extras[name].append(np.full(n, float(s.extra[name])))

    time = np.concatenate(times)
    contrast = np.concatenate(contrasts)
    priv = np.concatenate(privs)
    cols = [np.ones_like(time), contrast, priv, time, time * contrast, time * priv]
    names = list(BASE_COLUMNS)
    for name in extra:
        cols.append(np.concatenate(extras[name]))
        names.append(name)
    if lag:
        cols.append(np.concatenate(lags))
        names.append(LAG)

    return ModelFrame(
        response=np.concatenate(ys),
        design=np.column_stack(cols),
        column_names=names,
        cluster=np.concatenate(clusters),
        cluster_labels=[s.key for s in series],
        subject=np.concatenate(subjects),
        subject_labels=subject_labels,
        item=np.concatenate(items),
        item_labels=item_labels,
        time=time,
    )
