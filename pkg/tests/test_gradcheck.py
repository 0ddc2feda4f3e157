import numpy as np
import pytest

from caw.gradcheck import COMPONENTS, GradcheckConfig, relative_error, run_gradcheck


def test_components_cover_every_loss():
    assert {"ce", "reg", "total"} <= set(COMPONENTS)
    assert sum(c.startswith("ca[") for c in COMPONENTS) == 4


def test_few_states_pass():
    rep = run_gradcheck(GradcheckConfig(states=4))
    assert rep.passed, rep.to_dict()
    assert all(c["max_rel_error"] < 1e-6 for c in rep.components.values())


@pytest.mark.parametrize("component", COMPONENTS)
def test_injected_fault_is_caught(component):
    rep = run_gradcheck(GradcheckConfig(states=1), inject_fault=component)
    assert rep.failing == [component]


def test_fault_everywhere():
    assert set(run_gradcheck(GradcheckConfig(states=1), inject_fault="all").failing) == set(COMPONENTS)


def test_zero_parameter_model_is_vacuous_pass():
    rep = run_gradcheck(GradcheckConfig(states=3, identity=True))
    assert rep.passed
    vacuous = {k for k, c in rep.components.items() if c["vacuous"]}
    assert vacuous == set(COMPONENTS) - {"ce_input", "cw_margin_input"}


def test_relative_error():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert relative_error(np.array([1.0, 2.2]), np.array([1.0, 2.0])) == pytest.approx(0.2 / 2.2)
    assert relative_error(np.zeros(0), np.zeros(0)) == 0.0
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_report_dict():
    d = run_gradcheck(GradcheckConfig(states=1)).to_dict(timing=False)
    assert d["passed"] and d["failing"] == [] and "seconds" not in d and d["states"] == 1
