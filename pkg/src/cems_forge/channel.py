"""Direct and CEMS-relayed channel models, beamformers and link metrics.

Phase convention: propagation over a distance ``R`` contributes
``exp(+j 2 pi R / lambda)`` to the incidence channel ``H_i`` and the relayed
path is ``H_o^H Phi H_i``; ``H_o`` is stored conjugated
(``exp(-j 2 pi R / lambda)``) so that ``H_o^H`` carries the physical
propagation factor of the reflected leg.  Under this convention the
generalized-Snell profile of :mod:`cems_forge.phase_profiles` co-phases every
element for the centroid angle pair, and the ULA steering vector equals the
per-antenna far-field propagation factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (ArrayGeometry, CemsGeometry, GlobalConfig, Placement,
                       element_normals, global_positions, yaw_matrix)
from .phase_profiles import AnglePair, PhaseProfile, anomalous_phase, design_angles

FOUR_PI = 4.0 * math.pi


@dataclass(frozen=True)
class ElementPattern:
    """Single-element amplitude gain as a function of the off-axis angle.

    ``isotropic`` radiates equally everywhere; ``cos`` is ``cos(angle)**q``
    in the front half-space and zero behind.
    """

    kind: str = "isotropic"
    q: float = 1.0

    def __post_init__(self):
        if self.kind not in ("isotropic", "cos"):
            raise ValueError(f"unknown element pattern {self.kind!r}")

    def gain(self, cos_angle):
        cos_angle = np.asarray(cos_angle, dtype=float)
        if self.kind == "isotropic":
            return np.ones_like(cos_angle)
        return np.where(cos_angle > 0, np.clip(cos_angle, 0.0, 1.0) ** self.q, 0.0)


ISOTROPIC = ElementPattern()


@dataclass(frozen=True)
class PatternConfig:
    cems: ElementPattern = ISOTROPIC
    tx: ElementPattern = ISOTROPIC
    rx: ElementPattern = ISOTROPIC


@dataclass(frozen=True)
class DirectChannelParams:
    blocker_count: int = 0
    blockage_extra_loss_db: float = 10.0
    shadowing_db: float = 0.0
    random_phase_rad: float = 0.0
    tx_pattern: ElementPattern = ISOTROPIC
    rx_pattern: ElementPattern = ISOTROPIC

    def path_loss_db(self, distance_m: float, wavelength_m: float) -> float:
        fspl = 20.0 * math.log10(FOUR_PI * distance_m / wavelength_m)
        extra = self.blocker_count * self.blockage_extra_loss_db if self.blocker_count else 0.0
        return fspl + extra + self.shadowing_db


@dataclass
class CemsLinkChannels:
    H_i: np.ndarray
    H_o: np.ndarray
    R_i: np.ndarray
    R_o: np.ndarray
    theta_i: np.ndarray
    phi_i: np.ndarray
    theta_o: np.ndarray
    phi_o: np.ndarray
    xi_tx: np.ndarray
    xi_rx: np.ndarray
    behind_count: int = 0


@dataclass
class EffectiveLink:
    h_i: np.ndarray
    h_o: np.ndarray
    placement: Placement | None = None

    @property
    def cascade(self) -> np.ndarray:
        """Per-element terms ``conj(h_o) * h_i`` of ``h_o^H Phi h_i``."""
        return np.conj(self.h_o) * self.h_i


@dataclass(frozen=True)
class LinkMetrics:
    snr_linear: float
    spectral_efficiency_bps_hz: float
    covered: bool

    @property
    def snr_db(self) -> float:
        return 10.0 * math.log10(self.snr_linear) if self.snr_linear > 0 else -math.inf


def _azimuth_relative(vec, boresight):
    az = np.arctan2(vec[..., 1], vec[..., 0]) - boresight
    return np.angle(np.exp(1j * az))


def steering_vector(array: ArrayGeometry, azimuth_rad: float, wavelength_m: float) -> np.ndarray:
    k = np.arange(array.element_count)
    return np.exp(-2j * math.pi / wavelength_m * k * array.spacing_m * math.sin(azimuth_rad))


def direct_channel(placement: Placement, tx_array: ArrayGeometry, rx_array: ArrayGeometry,
                   params: DirectChannelParams, wavelength_m: float):
    """Rank-one far-field Tx-Rx channel, shape (N_Rx, N_Tx).

    Returns ``(H_D, xi_tx, xi_rx)``; an infinite blockage loss yields zero.
    """
    x_tx = np.asarray(placement.x_tx_m, dtype=float)
    x_rx = np.asarray(placement.x_rx_m, dtype=float)
    d = float(np.linalg.norm(x_rx - x_tx))
    if d == 0:
        raise ValueError("Tx and Rx coincide")
    xi_tx = float(_azimuth_relative(x_rx - x_tx, tx_array.boresight_azimuth_rad))
    xi_rx = float(_azimuth_relative(x_tx - x_rx, rx_array.boresight_azimuth_rad))
    pl_db = params.path_loss_db(d, wavelength_m)
    if math.isinf(pl_db):
        return np.zeros((rx_array.element_count, tx_array.element_count), complex), xi_tx, xi_rx
    alpha = 10.0 ** (-pl_db / 20.0) * np.exp(1j * params.random_phase_rad)
    g = params.tx_pattern.gain(math.cos(xi_tx)) * params.rx_pattern.gain(math.cos(xi_rx))
    a_tx = steering_vector(tx_array, xi_tx, wavelength_m)
    a_rx = steering_vector(rx_array, xi_rx, wavelength_m)
    return alpha * g * np.outer(a_rx, a_tx.conj()), xi_tx, xi_rx


def _cems_frame(placement: Placement, geom: CemsGeometry):
    pos = global_positions(geom, placement.x_cems_m, placement.cems_yaw_rad)
    nrm = element_normals(geom)
    if placement.cems_yaw_rad:
        nrm = nrm @ yaw_matrix(placement.cems_yaw_rad).T
    return pos, nrm


def _leg(elements, normals, antennas, array, wavelength_m, cems_pattern, array_pattern, yaw):
    """Distances, angles and gains between all (element, antenna) pairs."""
    diff = antennas[None, :, :] - elements[:, None, :]
    R = np.linalg.norm(diff, axis=-1)
    if np.any(R <= 0):
        raise ValueError("antenna coincides with a CEMS element")
    unit = diff / R[..., None]
    cos_el = np.einsum("lk,lnk->ln", normals, unit)
    # AoI/AoR azimuths are reported in the CEMS local frame.
    theta = np.angle(np.exp(1j * (np.arctan2(unit[..., 1], unit[..., 0]) - yaw)))
    phi = np.arccos(np.clip(unit[..., 2], -1.0, 1.0))
    xi = _azimuth_relative(-diff, array.boresight_azimuth_rad)
    g = cems_pattern.gain(cos_el) * array_pattern.gain(np.cos(xi))
    behind = int(np.count_nonzero(cos_el <= 0))
    return R, theta, phi, xi, g, behind


def cems_link_channels(placement: Placement, geom: CemsGeometry, tx_array: ArrayGeometry,
                       rx_array: ArrayGeometry, wavelength_m: float,
                       patterns: PatternConfig = PatternConfig()) -> CemsLinkChannels:
    """Exact spherical-wave incidence/reflection channels (near-field capable)."""
    elements, normals = _cems_frame(placement, geom)
    tx = tx_array.positions(placement.x_tx_m)
    rx = rx_array.positions(placement.x_rx_m)
    k = 2.0 * math.pi / wavelength_m
    R_i, th_i, ph_i, xi_tx, g_i, b_i = _leg(elements, normals, tx, tx_array, wavelength_m,
                                            patterns.cems, patterns.tx, placement.cems_yaw_rad)
    R_o, th_o, ph_o, xi_rx, g_o, b_o = _leg(elements, normals, rx, rx_array, wavelength_m,
                                            patterns.cems, patterns.rx, placement.cems_yaw_rad)
    H_i = wavelength_m / (FOUR_PI * R_i) * g_i * np.exp(1j * k * R_i)
    H_o = wavelength_m / (FOUR_PI * R_o) * g_o * np.exp(-1j * k * R_o)
    return CemsLinkChannels(H_i, H_o, R_i, R_o, th_i, ph_i, th_o, ph_o, xi_tx, xi_rx,
                            behind_count=b_i + b_o)


def beamformers(placement: Placement, tx_array: ArrayGeometry, rx_array: ArrayGeometry,
                wavelength_m: float, target: str = "relay"):
    """Matched precoder/combiner with ``|f|^2 = N_Tx`` and ``|w|^2 = N_Rx``.

    ``relay`` co-phases the antennas on the CEMS centroid (phases referenced
    to the array centroid, so a single antenna gets weight 1); ``direct`` matches
    the far-field steering vectors of the Tx-Rx line.
    """
    k = 2.0 * math.pi / wavelength_m
    if target == "relay":
        c = np.asarray(placement.x_cems_m, dtype=float)
        r_tx = np.linalg.norm(tx_array.positions(placement.x_tx_m) - c, axis=1)
        r_rx = np.linalg.norm(rx_array.positions(placement.x_rx_m) - c, axis=1)
        return np.exp(-1j * k * (r_tx - r_tx.mean())), np.exp(1j * k * (r_rx - r_rx.mean()))
    if target == "direct":
        x_tx = np.asarray(placement.x_tx_m, dtype=float)
        x_rx = np.asarray(placement.x_rx_m, dtype=float)
        xi_tx = float(_azimuth_relative(x_rx - x_tx, tx_array.boresight_azimuth_rad))
        xi_rx = float(_azimuth_relative(x_tx - x_rx, rx_array.boresight_azimuth_rad))
        return steering_vector(tx_array, xi_tx, wavelength_m), steering_vector(rx_array, xi_rx, wavelength_m)
    raise ValueError(f"unknown beamforming target {target!r}")


def relayed_channel(chans: CemsLinkChannels, profile) -> np.ndarray:
    """``H_R = H_o^H diag(exp(j phi)) H_i``, shape (N_Rx, N_Tx)."""
    phases = profile.phases_rad if isinstance(profile, PhaseProfile) else np.asarray(profile, float)
    if phases.size != chans.H_i.shape[0]:
        raise ValueError(f"profile has {phases.size} phases, channel has {chans.H_i.shape[0]} elements")
    return chans.H_o.conj().T @ (np.exp(1j * phases)[:, None] * chans.H_i)


def effective_link(placement: Placement, geom: CemsGeometry, tx_array: ArrayGeometry,
                   rx_array: ArrayGeometry, wavelength_m: float,
                   patterns: PatternConfig = PatternConfig()) -> EffectiveLink:
    chans = cems_link_channels(placement, geom, tx_array, rx_array, wavelength_m, patterns)
    f, w = beamformers(placement, tx_array, rx_array, wavelength_m, "relay")
    return EffectiveLink(chans.H_i @ f, chans.H_o @ w, placement)


def leg_vectors(elements, normals, antenna_sets, spacing_m, boresight_rad, wavelength_m,
                cems_pattern: ElementPattern = ISOTROPIC, centroid=None):
    """Beamformed leg terms for many arrays against one CEMS.

    ``antenna_sets`` has shape (V, K, 3).  Row ``v`` of the result is
    ``H_i f`` for array ``v`` used as the Tx; for the same array used as the
    Rx it equals ``conj(H_o w)``.  Arrays are isotropic.
    """
    k = 2.0 * math.pi / wavelength_m
    c = elements.mean(axis=0) if centroid is None else np.asarray(centroid, dtype=float)
    out = np.zeros((antenna_sets.shape[0], elements.shape[0]), complex)
    for v, ants in enumerate(antenna_sets):
        diff = ants[None, :, :] - elements[:, None, :]
        R = np.sqrt(np.einsum("lnk,lnk->ln", diff, diff))
        r_c = np.linalg.norm(ants - c, axis=1)
        r_c -= r_c.mean()
        g = 1.0
        if cems_pattern.kind != "isotropic":
            g = cems_pattern.gain(np.einsum("lk,lnk->ln", normals, diff) / R)
        out[v] = (wavelength_m / (FOUR_PI * R) * g * np.exp(1j * k * (R - r_c[None, :]))).sum(axis=1)
    return out


def far_field_reference(placement: Placement, geom: CemsGeometry, pair_true: AnglePair | None,
                        pair_cfg: AnglePair, wavelength_m: float, array_gain: float = 1.0,
                        patterns: PatternConfig = PatternConfig()) -> complex:
    """Far-field approximation of ``w^H H_R f`` for a profile designed on ``pair_cfg``.

    ``array_gain`` is ``N_Tx * N_Rx`` when matched beamformers are used.
    """
    if pair_true is None:
        pair_true = design_angles(placement)
    c = np.asarray(placement.x_cems_m, dtype=float)
    r_i = float(np.linalg.norm(c - np.asarray(placement.x_tx_m, dtype=float)))
    r_o = float(np.linalg.norm(np.asarray(placement.x_rx_m, dtype=float) - c))
    k = 2.0 * math.pi / wavelength_m
    amp = wavelength_m ** 2 / (FOUR_PI ** 2 * r_i * r_o) * np.exp(1j * k * (r_i + r_o))
    cos_i = math.sin(pair_true.phi_i_rad) * math.cos(pair_true.theta_i_rad)
    cos_o = math.sin(pair_true.phi_o_rad) * math.cos(pair_true.theta_o_rad)
    g = float(patterns.cems.gain(cos_i) * patterns.cems.gain(cos_o))
    mismatch = (anomalous_phase(geom, pair_cfg, wavelength_m).phases_rad
                - anomalous_phase(geom, pair_true, wavelength_m).phases_rad)
    return complex(g * amp * array_gain * np.exp(1j * mismatch).sum())


def received_amplitude(H, f, w) -> complex:
    return complex(np.vdot(w, H @ f))


def link_metrics(H_D, H_R, f, w, cfg: GlobalConfig, mode: str = "relayed") -> LinkMetrics:
    if mode == "direct":
        H = H_D
    elif mode == "relayed":
        H = H_R
    elif mode == "combined":
        H = H_D + H_R
    else:
        raise ValueError(f"unknown link mode {mode!r}")
    return metrics_from_snr(cfg.transmit_snr_linear * abs(received_amplitude(H, f, w)) ** 2, cfg)


def metrics_from_snr(snr_linear: float, cfg: GlobalConfig) -> LinkMetrics:
    snr = float(snr_linear)
    return LinkMetrics(snr, math.log2(1.0 + snr), bool(snr > cfg.coverage_threshold_linear))
