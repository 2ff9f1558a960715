"""Session fixtures shared across module suites and the acceptance gate.

The trend runs and the refinement chain are the most expensive
computations in the suite; building them once keeps repeated use cheap.
"""
import math

import pytest

from hyperwave.fuchsian import SurfacePoint, bolza_group, cyclic_cover, trivial_cover
from hyperwave.geometry import HPoint
from hyperwave.kernels import WindowSpec
from hyperwave.qvar import QVarConfig, trend_experiment
from hyperwave.spectral import BASE_AREA, assemble_operator, sample_surface

TREND_WIN = WindowSpec(1.25, 9.25, 1.25, 12.25)
TREND_POT = {"kind": "induced_bump", "radius": 0.5, "height": 3.0,
             "center": SurfacePoint(HPoint(0.35, 1.15), 0)}
TREND_OBS = {"kind": "bump", "center": (-0.4, 1.3), "radius": 1.2}


@pytest.fixture(scope="session")
def trend_cfg():
    return QVarConfig(window=TREND_WIN, tau=0.5, delta=0.2, T=100.0,
                      observable=dict(TREND_OBS), points_per_sheet=600)


@pytest.fixture(scope="session")
def calibration_reports(trend_cfg):
    covers = [trivial_cover(bolza_group())] * 3
    return trend_experiment(covers, TREND_POT, trend_cfg, seed=21)


@pytest.fixture(scope="session")
def trend_reports(trend_cfg):
    g = bolza_group()
    covers = [trivial_cover(g), cyclic_cover(g, 2), cyclic_cover(g, 4)]
    return trend_experiment(covers, TREND_POT, trend_cfg, seed=21)


@pytest.fixture(scope="session")
def chain():
    """Eigenvalues of the free operator at three refinement levels."""
    cover = trivial_cover(bolza_group())
    out = {}
    for pps in (500, 1000, 2000):
        eps = 0.25 * math.sqrt(BASE_AREA / pps)
        s = sample_surface(cover, pps, seed=11, eps=eps)
        out[pps] = assemble_operator(s, None, eps).eigenvalues
    return out
