"""Cylindrical CEMS lattice, array geometry and placements.

Frames
------
Global frame: cars move along ``y``, ``x`` is the cross-motion axis and ``z``
is vertical.  The CEMS local frame has its origin at the surface centroid and
the outward normal of the central row along ``+x``.  A CEMS mounted on a
vehicle is rotated about ``z`` by ``yaw_rad`` (0 for a door facing ``+x``,
``pi`` for one facing ``-x``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299792458.0


def db2lin(x):
    return 10.0 ** (np.asarray(x, dtype=float) / 10.0)


def lin2db(x):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class GlobalConfig:
    carrier_frequency_hz: float = 28e9
    bandwidth_hz: float = 200e6
    tx_power_dbm: float = 23.0
    noise_power_dbm: float = -82.0
    coverage_threshold_db: float = 0.0

    def __post_init__(self):
        if self.carrier_frequency_hz <= 0:
            raise ValueError("carrier_frequency_hz must be positive")

    @property
    def wavelength_m(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency_hz

    @property
    def transmit_snr_db(self) -> float:
        return self.tx_power_dbm - self.noise_power_dbm

    @property
    def transmit_snr_linear(self) -> float:
        return float(db2lin(self.transmit_snr_db))

    @property
    def coverage_threshold_linear(self) -> float:
        return float(db2lin(self.coverage_threshold_db))


@dataclass(frozen=True)
class CemsGeometry:
    """M x N cylindrical skin split into P column modules.

    ``rows`` (M) runs along the curved coordinate, ``cols`` (N) along the
    cylinder axis.  Elements are flattened row-major: ``l = mi * N + ni`` with
    ``mi = m + M/2`` and ``ni = n + N/2``.
    """

    rows: int
    cols: int
    spacing_m: float
    spacing_n: float
    curvature_radius_m: float
    module_count: int = 1
    centered_columns: bool = False

    def __post_init__(self):
        M, N = self.rows, self.cols
        if M < 2 or N < 2 or M % 2 or N % 2:
            raise ValueError(f"rows and cols must be even and >= 2, got M={M}, N={N}")
        if self.spacing_m <= 0 or self.spacing_n <= 0:
            raise ValueError("element spacings must be positive")
        if self.curvature_radius_m <= 0:
            raise ValueError("curvature radius must be positive")
        if self.spacing_m >= 2 * self.curvature_radius_m:
            raise ValueError("spacing_m must be below 2R (arcsin domain)")
        if M * self.spacing_m >= math.pi * self.curvature_radius_m:
            raise ValueError("curved arc M*d_m must stay below pi*R")
        if self.module_count < 1 or N % self.module_count:
            raise ValueError(f"module_count={self.module_count} must divide cols={N}")

    @property
    def L(self) -> int:
        return self.rows * self.cols

    @property
    def elements_per_module(self) -> int:
        return self.rows * self.cols // self.module_count

    @property
    def m_values(self) -> np.ndarray:
        return np.arange(-self.rows // 2, self.rows // 2)

    @property
    def n_values(self) -> np.ndarray:
        return np.arange(-self.cols // 2, self.cols // 2)

    @property
    def psi(self) -> np.ndarray:
        """Angular position of every row, ``psi_m = 2 m arcsin(d_m / 2R)``."""
        return 2.0 * self.m_values * np.arcsin(self.spacing_m / (2.0 * self.curvature_radius_m))

    @property
    def row_x(self) -> np.ndarray:
        return self.curvature_radius_m * (np.cos(self.psi) - 1.0)

    @property
    def row_z(self) -> np.ndarray:
        return self.curvature_radius_m * np.sin(self.psi)

    @property
    def col_y(self) -> np.ndarray:
        n = self.n_values
        return self.spacing_n * (n if self.centered_columns else n - 1)

    def with_modules(self, P: int) -> "CemsGeometry":
        return CemsGeometry(self.rows, self.cols, self.spacing_m, self.spacing_n,
                            self.curvature_radius_m, P, self.centered_columns)

    def module_columns(self, p: int) -> slice:
        """Column-index slice of module ``p`` (0-based)."""
        w = self.cols // self.module_count
        return slice(p * w, (p + 1) * w)

    def module_of_element(self) -> np.ndarray:
        ni = np.tile(np.arange(self.cols), self.rows)
        return ni // (self.cols // self.module_count)


def flatten_index(geom: CemsGeometry, m: int, n: int) -> int:
    mi, ni = m + geom.rows // 2, n + geom.cols // 2
    if not (0 <= mi < geom.rows and 0 <= ni < geom.cols):
        raise IndexError(f"(m={m}, n={n}) outside the lattice")
    return mi * geom.cols + ni


def unflatten_index(geom: CemsGeometry, ell: int) -> tuple[int, int]:
    if not 0 <= ell < geom.L:
        raise IndexError(f"element {ell} outside the lattice")
    mi, ni = divmod(ell, geom.cols)
    return mi - geom.rows // 2, ni - geom.cols // 2


def element_positions(geom: CemsGeometry) -> np.ndarray:
    """Local positions ``p_mn``, shape (L, 3), row-major over (m, n)."""
    M, N = geom.rows, geom.cols
    pos = np.empty((M, N, 3))
    pos[..., 0] = geom.row_x[:, None]
    pos[..., 1] = geom.col_y[None, :]
    pos[..., 2] = geom.row_z[:, None]
    return pos.reshape(M * N, 3)


def element_normals(geom: CemsGeometry) -> np.ndarray:
    """Outward unit normal of each element, ``[cos psi_m, 0, sin psi_m]``."""
    M, N = geom.rows, geom.cols
    nrm = np.zeros((M, N, 3))
    nrm[..., 0] = np.cos(geom.psi)[:, None]
    nrm[..., 2] = np.sin(geom.psi)[:, None]
    return nrm.reshape(M * N, 3)


def yaw_matrix(yaw_rad: float) -> np.ndarray:
    c, s = math.cos(yaw_rad), math.sin(yaw_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def global_positions(geom: CemsGeometry, x_cems_m, yaw_rad: float = 0.0) -> np.ndarray:
    """``x_mn = x_C + p_mn`` (with the mount yaw applied to ``p_mn``)."""
    p = element_positions(geom)
    if yaw_rad:
        p = p @ yaw_matrix(yaw_rad).T
    return np.asarray(x_cems_m, dtype=float)[None, :] + p


@dataclass(frozen=True)
class ArrayGeometry:
    """Horizontal ULA; the array axis is perpendicular to the boresight."""

    element_count: int = 1
    spacing_m: float = 0.0053534
    centroid_position_m: tuple = (0.0, 0.0, 0.0)
    boresight_azimuth_rad: float = 0.0

    def __post_init__(self):
        if self.element_count < 1:
            raise ValueError("element_count must be >= 1")
        if self.spacing_m <= 0:
            raise ValueError("spacing_m must be positive")

    @property
    def axis(self) -> np.ndarray:
        b = self.boresight_azimuth_rad
        return np.array([-math.sin(b), math.cos(b), 0.0])

    def positions(self, centroid=None) -> np.ndarray:
        c = np.asarray(self.centroid_position_m if centroid is None else centroid, dtype=float)
        k = np.arange(self.element_count) - (self.element_count - 1) / 2.0
        return c[None, :] + k[:, None] * self.spacing_m * self.axis[None, :]

    def moved_to(self, centroid) -> "ArrayGeometry":
        return ArrayGeometry(self.element_count, self.spacing_m,
                             tuple(float(v) for v in centroid), self.boresight_azimuth_rad)


@dataclass(frozen=True)
class Placement:
    """One (Tx, Rx, CEMS) configuration with its prior weight."""

    x_tx_m: tuple
    x_rx_m: tuple
    x_cems_m: tuple
    weight: float = 1.0
    cems_yaw_rad: float = 0.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("placement weight must be non-negative")
        c = np.asarray(self.x_cems_m, dtype=float)
        if np.allclose(np.asarray(self.x_tx_m, dtype=float), c) or \
                np.allclose(np.asarray(self.x_rx_m, dtype=float), c):
            raise ValueError("Tx/Rx must not coincide with the CEMS centroid")

    def to_local(self, point) -> np.ndarray:
        """Express a global point in the CEMS local frame."""
        d = np.asarray(point, dtype=float) - np.asarray(self.x_cems_m, dtype=float)
        return yaw_matrix(-self.cems_yaw_rad) @ d
