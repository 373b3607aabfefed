import json

import numpy as np
import pytest
from scipy.special import expit

from gazelab.errors import DomainError
from gazelab.ingest import apply_exclusions, load_long_format
from gazelab.sim import (PRESETS, SimConfig, item_conditions, marginal_linear_predictor,
                         simulate, simulate_dwell_episodes, summarize_runs, write_simulation)


def test_minimal_preset():
    res = simulate(PRESETS["minimal"])
    assert len(res.series) == 4 and all(len(s) == 4 for s in res.series)


def test_seed_determinism_and_sensitivity():
    cfg = SimConfig(n_subjects=3, n_items=4, T=20, seed=9)
    a, b = simulate(cfg), simulate(cfg)
    assert all(x == y for x, y in zip(a.series, b.series))
    c = simulate(SimConfig(n_subjects=3, n_items=4, T=20, seed=10))
    assert any(x != y for x, y in zip(a.series, c.series))


def test_streams_independent_of_design_size():
    # trial (s, j) draws from its own stream, so growing the design keeps it fixed
    small = simulate(SimConfig(n_subjects=2, n_items=2, T=30, seed=4)).series
    big = simulate(SimConfig(n_subjects=5, n_items=6, T=30, seed=4)).series
    lookup = {s.key: s for s in big}
    assert all(lookup[s.key] == s for s in small)


def test_item_conditions_balanced():
    assert [item_conditions(j) for j in range(4)] == [(0, 0), (1, 0), (0, 1), (1, 1)]


def test_latent_ar1_marginal_mean():
    beta = {"Intercept": -0.5, "Contrast": 0.7, "Time": 1.0, "Priv*Time": -0.4}
    cfg = SimConfig(n_subjects=200, n_items=4, T=50, mechanism="latent_ar1",
                    latent_phi=0.8, true_beta=beta, seed=1)
    res = simulate(cfg)
    y = np.array([s.samples for s in res.series], float)
    con = np.array([s.contrast for s in res.series], float)[:, None]
    priv = np.array([s.privileged for s in res.series], float)[:, None]
    t = (np.arange(50) / 49)[None, :]
    p = expit(marginal_linear_predictor(beta, con, priv, t))
    # cell means by (condition, time) agree with the marginal model
    for c in (0, 1):
        for q in (0, 1):
            rows = (con[:, 0] == c) & (priv[:, 0] == q)
            se = np.sqrt(p[rows].mean(0) * (1 - p[rows].mean(0)) / rows.sum())
            z = (y[rows].mean(0) - p[rows].mean(0)) / se
            assert np.mean(np.abs(z) < 3) > 0.95


def test_latent_ar1_lag_correlation_rises_with_phi():
    def lag1(phi):
        res = simulate(SimConfig(n_subjects=30, n_items=4, T=80, mechanism="latent_ar1",
                                 latent_phi=phi, seed=3))
        y = np.array([s.samples for s in res.series], float)
        return np.corrcoef(y[:, 1:].ravel(), y[:, :-1].ravel())[0, 1]
    assert abs(lag1(0.0)) < 0.05 < lag1(0.5) < lag1(0.9)


def test_paper_like_calibration():
    res = simulate(PRESETS["paper-like"])
    kept = apply_exclusions(res.series)
    assert abs(summarize_runs(kept).median - 35) <= 5
    stats = summarize_runs(kept)
    assert stats.count / sum(len(s) for s in kept) == pytest.approx(0.023, abs=0.005)


def test_markov_switch_rate():
    cfg = SimConfig(n_subjects=40, n_items=4, T=200, leave_prob=0.05, enter_prob=0.05,
                    seed=5)
    runs = summarize_runs(simulate(cfg).series)
    # interior runs are geometric with mean 20; truncation shortens the average
    assert 12 < runs.mean < 22


@pytest.mark.parametrize("bad", [{"mechanism": "x"}, {"n_items": 0}, {"leave_prob": 1.5},
                                 {"latent_phi": 1.0}, {"sigma_u2": -1},
                                 {"true_beta": {"Slope": 1}}, {"enter_effects": {"Age": 1}},
                                 {"seed": -1}])
def test_config_validation(bad):
    with pytest.raises(DomainError):
        SimConfig(**bad).validate()


def test_from_dict_unknown_field_named():
    with pytest.raises(DomainError, match="colour"):
        SimConfig.from_dict({"colour": 3})
    cfg = SimConfig.from_dict({"preset": "paper-like", "seed": 5})
    assert cfg.seed == 5 and cfg.n_subjects == PRESETS["paper-like"].n_subjects


def test_write_simulation(tmp_path):
    res = simulate(SimConfig(n_subjects=2, n_items=3, T=6, sigma_u2=0.5, seed=8))
    data, truth = write_simulation(res, tmp_path, manifest="manifest.json")
    df = load_long_format(data)
    assert len(df) == 36
    info = json.loads(truth.read_text())
    assert info["config"]["seed"] == 8 and info["manifest"] == "manifest.json"
    assert set(info["subject_intercepts"]) == {"s000", "s001"}
    again = tmp_path / "again"
    write_simulation(simulate(SimConfig(n_subjects=2, n_items=3, T=6, sigma_u2=0.5, seed=8)),
                     again, manifest="manifest.json")
    assert (again / "simulated.csv").read_bytes() == data.read_bytes()


def test_dwell_episodes():
    recs = simulate_dwell_episodes(500, leave_rate=5, enter_rate=5, seed=1)
    assert len(recs) == 500
    assert all(r.stop > r.start for r in recs)
    assert all(r.event in (0, 1) for r in recs)
    # censored records end exactly at the horizon
    assert all(r.stop == 1.12 for r in recs if r.event == 0)
    dur = np.array([r.stop - r.start for r in recs if r.event == 1])
    assert dur.mean() < 0.2
