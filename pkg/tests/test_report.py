import numpy as np
import pytest

from gazelab.glm import FitResult
from gazelab.report import (TERMS, Table, coefficient_table, format_cell, phi_cell, se_table,
                            sig6, variance_table)


def glm_fit(model="glm", **kw):
    names = ["Intercept", "Contrast", "Privileged", "Time", "Contrast*Time", "Priv*Time"]
    return FitResult(names, np.arange(6) / 3.0, np.eye(6) * 0.04, model=model, **kw)


def test_sig6():
    assert sig6(0.123456789) == 0.123457
    assert sig6(-12345678.9) == -12345700.0
    assert sig6(None) is None and sig6(0.0) == 0.0
    assert format_cell(None) == "--" and format_cell(2.0) == "2"


def test_coefficient_rows_and_empty_cells():
    t = coefficient_table({"GLM": glm_fit()}, ["GLM", "COX"])
    assert t.rows == TERMS
    assert t.get("Ylag-1", "GLM") is None and t.get("Time", "COX") is None
    assert t.get("Time", "GLM") == pytest.approx(1.0)
    text = t.render()
    assert text.count("\n") > len(TERMS) and "--" in text


def test_se_uses_model_cov_without_robust():
    t = se_table({"GLM": glm_fit()})
    assert t.get("Intercept", "GLM") == pytest.approx(0.2)


def test_variance_rows():
    gee = glm_fit("gee-ar1", dispersion=0.98, correlation=0.95,
                  diagnostics={"kind": "ar1", "phi_moment": 0.948})
    mixed = glm_fit("glmm", variance_components={"subject": 0.07, "item": 0.069})
    t = variance_table({"GLM": mixed, "AR1": gee})
    assert t.rows == ("GLM", "AR1")
    assert t.get("AR1", "phi") == "0.95 (0.948)"
    assert t.get("GLM", "phi") is None and t.get("AR1", "Subject variance") is None
    assert phi_cell(0.95, None) == "0.95 (--)"


def test_table_dict_round_trip():
    t = coefficient_table({"GLM": glm_fit()})
    back = Table.from_dict(t.to_dict())
    assert back.render() == t.render()
