"""Synthetic gaze series with known ground truth.

Two generators:

``two_state_markov``
    Each bin the gaze switches state with a probability whose logit depends
    on the current state, the item conditions, time and the random intercepts.
``latent_ar1``
    A stationary Gaussian AR(1) path ``z_t`` is thresholded so that
    ``P(y_t = 1) = expit(x_t' beta + u + v)`` exactly; with no random
    intercepts that is the marginal logistic mean model.

Random numbers come from numpy's counter-based Philox generator. Every trial
draws from its own stream keyed by ``(seed, 0, subject, item)``; subject and
item intercepts use ``(seed, 1, subject)`` and ``(seed, 2, item)``. Output
is therefore independent of generation order.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit, logit, ndtr

from .design import BASE_COLUMNS
from .errors import DomainError, EmptyInputError
from .ingest import DEFAULT_BIN_SECONDS, TrialSeries
from .rle import SurvivalRecord, run_lengths, transition_covariates

MECHANISMS = ("two_state_markov", "latent_ar1")


@dataclass
class SimConfig:
    n_subjects: int = 10
    n_items: int = 8
    T: int = 112
    bin_seconds: float = DEFAULT_BIN_SECONDS
    mechanism: str = "two_state_markov"
    # latent_ar1: marginal logit coefficients keyed by design column name
    true_beta: dict = field(default_factory=dict)
    latent_phi: float = 0.9
    # two_state_markov: per-bin switch probabilities at zero covariates, plus
    # logit-scale effects keyed by Privileged / Contrast / Time
    leave_prob: float = 0.03
    enter_prob: float = 0.03
    leave_effects: dict = field(default_factory=dict)
    enter_effects: dict = field(default_factory=dict)
    initial_p: float = 0.5
    sigma_u2: float = 0.0
    sigma_v2: float = 0.0
    seed: int = 0

    def validate(self):
        if self.mechanism not in MECHANISMS:
            raise DomainError(f"mechanism must be one of {MECHANISMS}, got {self.mechanism!r}")
        for name in ("n_subjects", "n_items", "T"):
            if int(getattr(self, name)) < 1:
                raise DomainError(f"{name} must be >= 1")
        if self.bin_seconds <= 0:
            raise DomainError("bin_seconds must be positive")
        for name in ("leave_prob", "enter_prob", "initial_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"{name} must be a probability, got {v}")
        if not -1.0 < self.latent_phi < 1.0:
            raise DomainError(f"latent_phi must satisfy |phi| < 1, got {self.latent_phi}")
        if self.sigma_u2 < 0 or self.sigma_v2 < 0:
            raise DomainError("random-intercept variances must be nonnegative")
        unknown = set(self.true_beta) - set(BASE_COLUMNS)
        if unknown:
            raise DomainError(f"unknown true_beta terms: {sorted(unknown)}")
        for eff in (self.leave_effects, self.enter_effects):
            bad = set(eff) - {"Privileged", "Contrast", "Time"}
            if bad:
                raise DomainError(f"unknown switch effects: {sorted(bad)}")
        if not 0 <= int(self.seed) < 2**64:
            raise DomainError("seed must be a 64-bit unsigned integer")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known - {"preset"}
        if unknown:
            raise DomainError(f"unknown config fields: {sorted(unknown)}")
        base = asdict(PRESETS[d["preset"]]) if "preset" in d else {}
        base.update({k: v for k, v in d.items() if k != "preset"})
        return cls(**base).validate()


@dataclass
class SimResult:
    series: list
    truth: dict


@dataclass(frozen=True)
class RunStats:
    median: float
    mean: float
    count: int
    lengths: tuple = ()


def item_conditions(j: int) -> tuple[int, int]:
    """(contrast, privileged) for item index j; cycles through the 2x2 design."""
    return j % 2, (j // 2) % 2


def _stream(seed, *key):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *key])))


def simulate(config: SimConfig) -> SimResult:
    config.validate()
    ns, ni, T = int(config.n_subjects), int(config.n_items), int(config.T)
    u = np.array([_stream(config.seed, 1, s).normal() for s in range(ns)]) \
        * math.sqrt(config.sigma_u2)
    v = np.array([_stream(config.seed, 2, j).normal() for j in range(ni)]) \
        * math.sqrt(config.sigma_v2)
    keys = [(s, j) for s in range(ns) for j in range(ni)]
    cond = np.array([item_conditions(j) for _, j in keys], dtype=float)
    contrast, priv = cond[:, 0], cond[:, 1]
    re = np.array([u[s] + v[j] for s, j in keys])
    time = np.arange(T) / (T - 1) if T > 1 else np.zeros(1)

    if config.mechanism == "latent_ar1":
        noise = np.stack([_stream(config.seed, 0, s, j).standard_normal(T) for s, j in keys])
        y = _latent_ar1(config, noise, contrast, priv, re, time)
    else:
        unif = np.stack([_stream(config.seed, 0, s, j).random(T) for s, j in keys])
        y = _markov(config, unif, contrast, priv, re, time)

    series = []
    for k, (s, j) in enumerate(keys):
        series.append(TrialSeries(subject_label(s), item_label(j), y[k], config.bin_seconds,
                                  contrast=int(contrast[k]), privileged=int(priv[k]),
                                  trial_index=j + 1))
    truth = {
        "config": asdict(config),
        "subject_intercepts": {subject_label(s): float(u[s]) for s in range(ns)},
        "item_intercepts": {item_label(j): float(v[j]) for j in range(ni)},
    }
    if config.mechanism == "latent_ar1":
        truth["marginal_beta"] = {name: float(config.true_beta.get(name, 0.0))
                                  for name in BASE_COLUMNS}
    return SimResult(series, truth)


def subject_label(s):
    return f"s{s:03d}"


def item_label(j):
    return f"i{j:03d}"


def marginal_linear_predictor(beta: dict, contrast, priv, time):
    b = {name: float(beta.get(name, 0.0)) for name in BASE_COLUMNS}
    return (b["Intercept"] + b["Contrast"] * contrast + b["Privileged"] * priv
            + b["Time"] * time + b["Contrast*Time"] * time * contrast
            + b["Priv*Time"] * time * priv)


def _latent_ar1(config, noise, contrast, priv, re, time):
    phi = config.latent_phi
    z = np.empty_like(noise)
    z[:, 0] = noise[:, 0]
    innov = math.sqrt(1.0 - phi * phi)
    for t in range(1, noise.shape[1]):
        z[:, t] = phi * z[:, t - 1] + innov * noise[:, t]
    eta = marginal_linear_predictor(config.true_beta, contrast[:, None], priv[:, None],
                                    time[None, :]) + re[:, None]
    return (ndtr(z) < expit(eta)).astype(np.int8)


def _switch_logit(base_prob, effects, contrast, priv, time):
    with np.errstate(divide="ignore"):
        base = logit(base_prob)
    return (base + effects.get("Privileged", 0.0) * priv[:, None]
            + effects.get("Contrast", 0.0) * contrast[:, None]
            + effects.get("Time", 0.0) * time[None, :])


def _markov(config, unif, contrast, priv, re, time):
    n, T = unif.shape
    p_leave = expit(_switch_logit(config.leave_prob, config.leave_effects, contrast, priv, time)
                    - re[:, None])
    p_enter = expit(_switch_logit(config.enter_prob, config.enter_effects, contrast, priv, time)
                    + re[:, None])
    y = np.empty((n, T), dtype=np.int8)
    y[:, 0] = unif[:, 0] < config.initial_p
    for t in range(1, T):
        prev = y[:, t - 1]
        switch_p = np.where(prev == 1, p_leave[:, t], p_enter[:, t])
        y[:, t] = np.where(unif[:, t] < switch_p, 1 - prev, prev)
    return y


def summarize_runs(series) -> RunStats:
    series = list(series)
    if not series:
        raise EmptyInputError("no series to summarize")
    lengths = np.concatenate([run_lengths(s.samples)[1] for s in series])
    return RunStats(float(np.median(lengths)), float(lengths.mean()), int(lengths.size),
                    tuple(int(x) for x in lengths))


def to_long_frame(series) -> pd.DataFrame:
    parts = []
    for s in series:
        n = len(s.samples)
        parts.append(pd.DataFrame({
            "subject": s.subject_id, "item": s.item_id, "trial": s.trial_index,
            "time": np.arange(n), "y": s.samples.astype(int),
            "contrast": s.contrast, "privileged": s.privileged}))
    return pd.concat(parts, ignore_index=True)


def write_simulation(result: SimResult, out_dir, stem="simulated",
                     manifest: str | None = None) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (long format) and ``<stem>_truth.json``.

    ``manifest`` is recorded as a ``#`` comment above the CSV header and as a
    key in the truth file.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_path = out_dir / f"{stem}.csv"
    truth_path = out_dir / f"{stem}_truth.json"
    with data_path.open("w", encoding="utf-8", newline="") as fh:
        if manifest:
            fh.write(f"# manifest={manifest}\n")
        to_long_frame(result.series).to_csv(fh, index=False, lineterminator="\n")
    truth = dict(result.truth, manifest=manifest) if manifest else result.truth
    truth_path.write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    return data_path, truth_path


def simulate_dwell_episodes(n_episodes, leave_rate=8.0, enter_rate=8.0, leave_effects=None,
                            enter_effects=None, horizon=1.12, seed=0):
    """Alternating on/off dwell episodes with exponential holding times.

    Each trial gets item-level Bernoulli(1/2) Privileged and Contrast. The
    hazard of leaving state 1 is ``leave_rate * exp(leave_effects . x)``,
    of leaving state 0 ``enter_rate * exp(enter_effects . x)``. The run in
    progress at ``horizon`` is kept as a censored record (event 0).

    Returns a list of exactly ``n_episodes`` :class:`SurvivalRecord`.
    """
    leave_effects = leave_effects or {}
    enter_effects = enter_effects or {}
    rng = _stream(seed, 3)
    records = []
    trial = 0
    while len(records) < n_episodes:
        x = {"Privileged": float(rng.integers(2)), "Contrast": float(rng.integers(2))}
        rates = {
            1: leave_rate * math.exp(sum(leave_effects.get(k, 0.0) * x[k] for k in x)),
            0: enter_rate * math.exp(sum(enter_effects.get(k, 0.0) * x[k] for k in x)),
        }
        state = int(rng.integers(2))
        t = 0.0
        key = (f"t{trial:05d}", "dwell")
        while t < horizon and len(records) < n_episodes:
            stop = t + rng.exponential(1.0 / rates[state])
            event = 1
            if stop >= horizon:
                stop, event = horizon, 0
            records.append(SurvivalRecord(t, stop, event, state,
                                          transition_covariates(x, state), key))
            t = stop
            state = 1 - state
        trial += 1
    return records


PRESETS = {
    # run lengths on the scale of the original recordings: median 35 of 112 bins
    "paper-like": SimConfig(
        n_subjects=40, n_items=16, T=112, mechanism="two_state_markov",
        leave_prob=0.011, enter_prob=0.013,
        leave_effects={"Privileged": -0.1, "Contrast": 0.1, "Time": -0.8},
        enter_effects={"Privileged": 0.05, "Contrast": -0.05, "Time": 0.8},
        initial_p=0.35, sigma_u2=0.1, sigma_v2=0.05, seed=2015),
    "minimal": SimConfig(n_subjects=2, n_items=2, T=4, mechanism="two_state_markov",
                         leave_prob=0.3, enter_prob=0.3, seed=1),
}
