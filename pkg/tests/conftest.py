import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from asdexplain import nn

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_relu_net():
    """8-6-4-2 ReLU classifier with non-trivial random weights."""
    model = nn.init_mlp([8, 6, 4, 2], ["relu", "relu", "softmax"], seed=3)
    r = np.random.default_rng(5)
    for layer in model.layers:
        layer.bias[:] = r.normal(0, 0.3, size=layer.bias.shape)
    return model


@pytest.fixture(scope="session")
def linear_net():
    """Single softmax layer: the class-1 logit is w . x + c."""
    r = np.random.default_rng(11)
    w = r.normal(size=(2, 6))
    return nn.MlpModel([nn.Layer(w, np.array([0.2, -0.1]), "softmax")])


_CRITERIA = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or report.outcome != "passed":
        entry = _CRITERIA.setdefault(props["criterion"], {"ok": True, "notes": []})
        entry["ok"] &= report.outcome == "passed"
        if report.when == "call" and props.get("detail"):
            entry["notes"].append(props["detail"])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entry = _CRITERIA[n]
        notes = "; ".join(entry["notes"])
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if entry['ok'] else 'FAIL'}"
                                    + (f"  ({notes})" if notes else ""))
