import numpy as np
import pytest

from dtemix import dte, nmf, sim
from dtemix.core import CondProbMatrix


@pytest.fixture(scope="session")
def dgp701():
    return sim.builtin_dgp("701")


@pytest.fixture(scope="session")
def dgp310():
    return sim.builtin_dgp("310")


def collapsed_gamma_x(dgp):
    groups = sim.X_COLLAPSE.cell_index(np.arange(dgp.m_x, dtype=float))
    out = np.zeros((int(groups.max()) + 1, dgp.k))
    for x_old, x_new in enumerate(groups):
        out[x_new] += dgp.gamma_x[x_old]
    return out


def exact_fit(dgp):
    """MixtureFit holding the true (X-collapsed) factors."""
    return nmf.MixtureFit(
        gamma_x=CondProbMatrix(collapsed_gamma_x(dgp)),
        gamma_y0=CondProbMatrix(dgp.gamma_y0),
        gamma_y1=CondProbMatrix(dgp.gamma_y1),
        lambda0=CondProbMatrix(dgp.lam),
        lambda1=CondProbMatrix(dgp.lam),
        objective=0.0,
        restarts_used=1,
        converged=True,
    )


@pytest.fixture(scope="session")
def population701(dgp701):
    cells = dte.CellTable.from_probs(sim.exact_cells(dgp701, sim.X_COLLAPSE))
    return cells, exact_fit(dgp701)
