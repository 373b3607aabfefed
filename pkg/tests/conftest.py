import sys

import numpy as np
import pytest

from gazelab.ingest import TrialSeries
from gazelab.sim import SimConfig, simulate


def series_from_string(bits, subject="A", item="1", **kw):
    return TrialSeries(subject, item, np.array([int(c) for c in bits]), **kw)


@pytest.fixture
def table1():
    return series_from_string("1110001111")


@pytest.fixture(scope="session")
def small_markov():
    cfg = SimConfig(n_subjects=6, n_items=8, T=40, leave_prob=0.15, enter_prob=0.15,
                    leave_effects={"Privileged": -0.3}, enter_effects={"Time": 0.5},
                    sigma_u2=0.2, sigma_v2=0.1, seed=3)
    return [s for s in simulate(cfg).series if np.ptp(s.samples) > 0]


def write_long(path, rows, header="subject,item,trial,time,y,contrast,privileged"):
    lines = [header] + [",".join(map(str, r)) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.summary_lines():
        terminalreporter.write_line(line)
