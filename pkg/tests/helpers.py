"""Small instance builders shared by the test modules."""

import math

import numpy as np

from cems_forge.geometry import ArrayGeometry, CemsGeometry, GlobalConfig, Placement
from cems_forge.unstructured import ScenarioDistribution, build_distribution

LAM = GlobalConfig().wavelength_m


def random_cascade(rng, X, L, snr_db=10.0, cfg=GlobalConfig()):
    """Gaussian cascade scaled so a coherent sum sits near ``snr_db``."""
    scale = math.sqrt(10 ** (snr_db / 10) / cfg.transmit_snr_linear) / L
    C = scale * (rng.normal(size=(X, L)) + 1j * rng.normal(size=(X, L))) / math.sqrt(2)
    return ScenarioDistribution(C, np.full(X, 1.0 / X))


def physical_instance(rng, X=3, M=2, N=2, lam=LAM):
    """Random Tx/Rx placements around a small curved surface."""
    geom = CemsGeometry(M, N, lam / 4, lam / 4, 2.0)
    placements = []
    for _ in range(X):
        ri, ro = rng.uniform(3.0, 12.0, 2)
        ti, to = rng.uniform(-1.3, 1.3, 2)
        placements.append(Placement((ri * math.cos(ti), ri * math.sin(ti), 2.0),
                                    (ro * math.cos(to), ro * math.sin(to), 2.0), (0.0, 0.0, 2.0)))
    arr = ArrayGeometry(8, lam / 2)
    return build_distribution(placements, geom, arr, arr, lam), geom
