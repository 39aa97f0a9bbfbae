"""Anomalous-reflection phase profiles, modular assembly and codebooks.

Angle convention: ``theta_i`` and ``theta_o`` are the azimuths, measured in the
CEMS local frame from the outward normal (+x) toward +y, of the directions
from the surface toward the Tx and toward the Rx.  Specular reflection is
``theta_o = -theta_i``.  Elevations are polar angles from +z; ``pi/2`` lies in
the horizontal plane.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import CemsGeometry, Placement, element_positions

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class AnglePair:
    theta_i_rad: float
    theta_o_rad: float
    phi_i_rad: float = math.pi / 2
    phi_o_rad: float = math.pi / 2

    def swapped(self) -> "AnglePair":
        return AnglePair(self.theta_o_rad, self.theta_i_rad, self.phi_o_rad, self.phi_i_rad)

    @classmethod
    def from_degrees(cls, theta_i_deg, theta_o_deg):
        return cls(math.radians(theta_i_deg), math.radians(theta_o_deg))


@dataclass(frozen=True)
class ModuleAssignment:
    """Codebook index per module (0-based)."""

    indices: tuple

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))

    def __len__(self):
        return len(self.indices)


@dataclass
class PhaseProfile:
    phases_rad: np.ndarray
    provenance: str = "free-form"
    assignment: ModuleAssignment | None = None

    def __post_init__(self):
        self.phases_rad = np.mod(np.asarray(self.phases_rad, dtype=float), TWO_PI)

    def __len__(self):
        return self.phases_rad.size

    @property
    def coefficients(self) -> np.ndarray:
        return np.exp(1j * self.phases_rad)

    def as_grid(self, geom: CemsGeometry) -> np.ndarray:
        return self.phases_rad.reshape(geom.rows, geom.cols)


@dataclass(frozen=True)
class Codebook:
    entries: tuple
    delta_theta_rad: float
    theta_span_rad: tuple = field(default=())

    def __post_init__(self):
        if not self.entries:
            raise ValueError("codebook is empty")
        if self.delta_theta_rad <= 0:
            raise ValueError("grid step must be positive")
        if len(set(self.entries)) != len(self.entries):
            raise ValueError("codebook entries must be unique")

    @property
    def size(self) -> int:
        return len(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, a) -> AnglePair:
        return self.entries[a]

    def sums(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-entry ``cos ti + cos to`` and ``sin ti + sin to``."""
        ti = np.array([e.theta_i_rad for e in self.entries])
        to = np.array([e.theta_o_rad for e in self.entries])
        return np.cos(ti) + np.cos(to), np.sin(ti) + np.sin(to)


def wavevector(theta_rad, phi_rad, wavelength_m, literal: bool = False) -> np.ndarray:
    """``(2 pi / lambda) [sin phi cos theta, sin phi sin theta, cos phi]``.

    ``literal=True`` uses ``cos theta`` as the third component, reproducing the
    printed form for audit; it does not have norm ``2 pi / lambda``.
    """
    k = TWO_PI / wavelength_m
    third = math.cos(theta_rad) if literal else math.cos(phi_rad)
    return k * np.array([math.sin(phi_rad) * math.cos(theta_rad),
                         math.sin(phi_rad) * math.sin(theta_rad), third])


def anomalous_phase(geom: CemsGeometry, pair: AnglePair, wavelength_m: float,
                    literal_wavevector: bool = False) -> PhaseProfile:
    """General phase ``p . k_i + p . k_o`` over all elements."""
    p = element_positions(geom)
    k = (wavevector(pair.theta_i_rad, pair.phi_i_rad, wavelength_m, literal_wavevector)
         + wavevector(pair.theta_o_rad, pair.phi_o_rad, wavelength_m, literal_wavevector))
    return PhaseProfile(p @ k)


def _cylindrical_grid(geom, theta_i, theta_o, wavelength_m, cols=slice(None)):
    half_sum = 0.5 * (theta_i + theta_o)
    amp = 2.0 * TWO_PI / wavelength_m * math.cos(0.5 * (theta_i - theta_o))
    return amp * (geom.row_x[:, None] * math.cos(half_sum)
                  + geom.col_y[None, cols] * math.sin(half_sum))


def cylindrical_phase(geom: CemsGeometry, theta_i: float, theta_o: float,
                      wavelength_m: float) -> PhaseProfile:
    """Azimuth-only closed form of the anomalous phase on the cylinder."""
    return PhaseProfile(_cylindrical_grid(geom, theta_i, theta_o, wavelength_m).ravel())


def modular_phase_matrix(geom: CemsGeometry, codebook: Codebook,
                         assignment: ModuleAssignment, wavelength_m: float) -> PhaseProfile:
    P = geom.module_count
    if len(assignment) != P:
        raise ValueError(f"assignment has {len(assignment)} indices, geometry has P={P}")
    grid = np.empty((geom.rows, geom.cols))
    for p, a in enumerate(assignment.indices):
        if not 0 <= a < codebook.size:
            raise IndexError(f"codebook index {a} out of range [0, {codebook.size})")
        e = codebook[a]
        cols = geom.module_columns(p)
        grid[:, cols] = _cylindrical_grid(geom, e.theta_i_rad, e.theta_o_rad, wavelength_m, cols)
    return PhaseProfile(grid.ravel(), provenance="modular", assignment=assignment)


def specular_profile(geom: CemsGeometry, theta_deg: float, wavelength_m: float) -> PhaseProfile:
    """Curvature-compensating specular design for ``theta_o = -theta_i = theta``."""
    t = math.radians(theta_deg)
    prof = cylindrical_phase(geom, -t, t, wavelength_m)
    prof.provenance = "specular"
    return prof


def bare_profile(geom: CemsGeometry) -> PhaseProfile:
    return PhaseProfile(np.zeros(geom.L), provenance="bare")


def beamwidth_rad(geom: CemsGeometry) -> float:
    """Null-to-null azimuth beamwidth proxy ``2 / N``."""
    return 2.0 / geom.cols


def _axis_grid(lo, hi, step):
    count = int(math.floor((hi - lo) / step + 1e-9)) + 1
    if count < 1:
        raise ValueError("empty angle grid")
    offset = 0.5 * ((hi - lo) - (count - 1) * step)
    return lo + offset + step * np.arange(count)


def build_codebook(geom: CemsGeometry, span_theta=(-math.radians(80), math.radians(80)),
                   oversampling_factor: float = 1.0, span_theta_o=None,
                   points_per_axis: int | None = None, anchored: bool = False) -> Codebook:
    """Cartesian (theta_i, theta_o) grid quantized on the azimuth beamwidth.

    The step is ``(2/N) / oversampling_factor``; ``points_per_axis`` instead
    fixes the number of points on the wider axis and derives the step.  The
    grid is centered in each span unless ``anchored`` (starts at the span's
    lower edge, so coarser steps that are integer multiples give sub-grids).
    """
    span_i = tuple(span_theta)
    span_o = tuple(span_theta_o) if span_theta_o is not None else span_i
    for lo, hi in (span_i, span_o):
        if not (-math.pi / 2 < lo <= hi < math.pi / 2):
            raise ValueError("angle spans must lie inside (-pi/2, pi/2)")
    if points_per_axis is not None:
        if points_per_axis < 1:
            raise ValueError("points_per_axis must be >= 1")
        width = max(span_i[1] - span_i[0], span_o[1] - span_o[0])
        step = width / (points_per_axis - 1) if points_per_axis > 1 else max(width, 1e-3)
    else:
        if oversampling_factor <= 0:
            raise ValueError("oversampling_factor must be positive")
        step = beamwidth_rad(geom) / oversampling_factor

    def axis(lo, hi):
        if anchored:
            count = int(math.floor((hi - lo) / step + 1e-9)) + 1
            return lo + step * np.arange(count)
        return _axis_grid(lo, hi, step)

    gi, go = axis(*span_i), axis(*span_o)
    entries = tuple(AnglePair(float(a), float(b)) for a, b in itertools.product(gi, go))
    return Codebook(entries, step, (span_i, span_o))


def design_angles(placement: Placement) -> AnglePair:
    """True centroid AoI/AoR of a placement in the CEMS local frame."""

    def az_el(v):
        r = np.linalg.norm(v)
        return math.atan2(v[1], v[0]), math.acos(max(-1.0, min(1.0, v[2] / r)))

    ti, pi_ = az_el(placement.to_local(placement.x_tx_m))
    to, po = az_el(placement.to_local(placement.x_rx_m))
    return AnglePair(ti, to, pi_, po)


HEADER_PREFIX = "# cems-phase v1"


def write_profile_csv(path, profile: PhaseProfile, geom: CemsGeometry, preamble: str = "") -> None:
    """One CSV row per curved-coordinate row ``m``; ``preamble`` lines come first."""
    grid = profile.as_grid(geom)
    with open(path, "w") as fh:
        if preamble:
            fh.write(preamble.rstrip("\n") + "\n")
        fh.write(f"{HEADER_PREFIX} M={geom.rows} N={geom.cols} R={geom.curvature_radius_m!r}\n")
        for row in grid:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_profile_csv(path, geom: CemsGeometry | None = None) -> PhaseProfile:
    with open(path) as fh:
        header = fh.readline().strip()
        while header.startswith("#") and not header.startswith(HEADER_PREFIX):
            header = fh.readline().strip()
        if not header.startswith(HEADER_PREFIX):
            raise ValueError(f"{path}: not a cems-phase v1 file")
        fields = dict(tok.split("=", 1) for tok in header[len(HEADER_PREFIX):].split())
        M, N = int(fields["M"]), int(fields["N"])
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape != (M, N):
        raise ValueError(f"{path}: expected {M}x{N} phases, found {data.shape}")
    if geom is not None and (geom.rows, geom.cols) != (M, N):
        raise ValueError(f"{path}: profile is {M}x{N}, geometry is {geom.rows}x{geom.cols}")
    return PhaseProfile(data.ravel())
