import numpy as np
import pytest

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []

from grpecm.likelihood import concentrate
from grpecm.model import EcmParams, ModelSpec, PanelDataset


def random_panel(rng, N=10, T=40, d_x=1):
    """Random-walk-ish panel with no group structure."""
    x = np.cumsum(rng.standard_normal((N, T, d_x)), axis=1) * 0.3
    y = np.cumsum(rng.standard_normal((N, T)), axis=1) * 0.3 + x.sum(axis=2)
    return PanelDataset(y, x)


def random_point(rng, spec: ModelSpec, N: int, simplex: bool = True):
    """Feasible (params, U) drawn uniformly from the boxes and simplex columns."""
    phi = rng.uniform(-1, 1, spec.G) * spec.box_phi
    theta = rng.uniform(-1, 1, (spec.G, spec.d_x)) * spec.box_theta
    if simplex:
        u = rng.dirichlet(np.ones(spec.G), size=N).T
    else:
        u = np.zeros((spec.G, N))
        u[rng.integers(0, spec.G, N), np.arange(N)] = 1.0
    return EcmParams(theta, phi), u


def grouped_panel(rng, sizes=(5, 5), phi=(-0.6, -0.3), theta=(1.0, -2.0), T=60, noise=0.0,
                  lam=0.0, mu=0.1):
    """Simple p=1, q=0 ECM panel (no short-run terms) with known groups."""
    ys, xs, labels = [], [], []
    for g, n in enumerate(sizes):
        x = np.cumsum(rng.standard_normal((n, T)), axis=1)
        y = np.zeros((n, T))
        for t in range(1, T):
            dy = phi[g] * (y[:, t - 1] - theta[g] * x[:, t]) + mu + noise * rng.standard_normal(n)
            y[:, t] = y[:, t - 1] + dy
        ys.append(y)
        xs.append(x)
        labels += [g] * n
    return PanelDataset(np.vstack(ys), np.vstack(xs)[:, :, None]), np.array(labels)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_problem(rng):
    d = random_panel(rng, N=8, T=30, d_x=2)
    spec = ModelSpec.uniform(2, 1, 2, 2, phi_bound=1.5, theta_bound=3.0)
    return d, spec, concentrate(d, spec)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
