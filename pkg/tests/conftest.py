import numpy as np
import pytest

from neural_gaits import barriers as bar
from neural_gaits import dynamics as dyn
from neural_gaits import training as tr


@pytest.fixture(scope="session")
def model():
    return dyn.ModelParams()


@pytest.fixture(scope="session")
def regions(model):
    return bar.default_regions(model)


@pytest.fixture(scope="session")
def specs():
    return bar.default_specs()


@pytest.fixture(scope="session")
def prior_policy(model, regions):
    """Anchored net on the phase prior: output equals the prior at init."""
    return tr.default_policy(regions, model=model, output_scale=1.0, anchored=True)


@pytest.fixture(scope="session")
def net_policy(model, regions):
    """Prior plus a live random net, so every parameter matters."""
    return tr.default_policy(regions, seed=3, model=model, output_scale=0.05)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = next((m for k, m in list(sys.modules.items()) if k.rsplit(".", 1)[-1] == "test_acceptance"), None)
    rows = getattr(mod, "RESULTS", [])
    if rows:
        terminalreporter.section("acceptance criteria")
        for row in rows:
            terminalreporter.write_line(row)
