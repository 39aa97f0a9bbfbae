"""Two-lane angle statistics, multi-lane scenes, blockage and connectivity.

Lanes run along ``y``; lane ``l`` is centered at ``x = l * lane_width_m``.
Vehicles are axis-aligned rectangles (length along ``y``) whose antenna sits
at the rectangle center.  Relaying vehicles carry a CEMS on both doors: the
right door at ``x + width/2`` faces ``+x`` (yaw 0) and the left door at
``x - width/2`` faces ``-x`` (yaw pi).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .channel import FOUR_PI, leg_vectors
from .geometry import (ArrayGeometry, CemsGeometry, GlobalConfig, Placement,
                       element_normals, global_positions, yaw_matrix)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrafficConfig:
    """Road and vehicle parameters.

    ``lane_width_m`` is the lateral distance between adjacent lane centers
    (for the two-lane statistics it is the Tx-lane to relay-lane offset).
    """

    lane_count: int = 2
    lane_width_m: float = 4.0
    car_density_per_km: float = 30.0
    min_pair_distance_m: float = 30.0
    vehicle_length_m: float = 5.0
    vehicle_width_m: float = 2.0
    antenna_height_m: float = 2.0
    cems_height_m: float = 2.0
    penetration_ratio: float = 1.0
    blockage_loss_db_per_blocker: float = 10.0
    road_length_m: float = 100.0
    direct_blockage: str = "attenuation"
    max_resample: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.car_density_per_km <= 0:
            raise ValueError("car_density_per_km must be positive")
        if not 0.0 <= self.penetration_ratio <= 1.0:
            raise ValueError("penetration_ratio must lie in [0, 1]")
        if self.lane_count < 1 or self.lane_width_m <= 0 or self.road_length_m <= 0:
            raise ValueError("lane_count, lane_width_m and road_length_m must be positive")
        if self.direct_blockage not in ("attenuation", "outage"):
            raise ValueError("direct_blockage must be 'attenuation' or 'outage'")


# -- two-lane statistics ------------------------------------------------------

@dataclass
class TwoLaneSamples:
    """Tx-Rx distances ``D``, relay offsets ``d`` and the derived angles.

    ``theta_i``/``theta_o`` are the magnitudes ``arctan(d/w)`` and
    ``arctan((D-d)/w)``; in the relay's local frame the Tx lies at azimuth
    ``-theta_i`` and the Rx at ``+theta_o``.
    """

    D: np.ndarray
    d: np.ndarray
    lane_offset_m: float
    antenna_height_m: float
    cems_height_m: float

    @property
    def theta_i(self) -> np.ndarray:
        return np.arctan(self.d / self.lane_offset_m)

    @property
    def theta_o(self) -> np.ndarray:
        return np.arctan((self.D - self.d) / self.lane_offset_m)

    def placements(self) -> list:
        w, ha, hc = self.lane_offset_m, self.antenna_height_m, self.cems_height_m
        n = len(self.D)
        return [Placement((w, -float(d), ha), (w, float(D - d), ha), (0.0, 0.0, hc), 1.0 / n)
                for D, d in zip(self.D, self.d)]


def sample_distance(cfg: TrafficConfig, rng, size):
    """Shifted exponential Tx-Rx distance ``min_pair_distance + Exp(density)``."""
    return cfg.min_pair_distance_m + rng.exponential(1000.0 / cfg.car_density_per_km, size)


def sample_two_lane(cfg: TrafficConfig, n_samples: int, rng=None) -> TwoLaneSamples:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    D = sample_distance(cfg, rng, n_samples)
    d = rng.uniform(0.0, D)
    return TwoLaneSamples(D, d, cfg.lane_width_m, cfg.antenna_height_m, cfg.cems_height_m)


def shifted_exponential_ks(D, cfg: TrafficConfig) -> float:
    """Kolmogorov-Smirnov distance of ``D`` to the shifted exponential law."""
    x = np.sort(np.asarray(D, dtype=float))
    n = x.size
    F = 1.0 - np.exp(-cfg.car_density_per_km / 1000.0 * (x - cfg.min_pair_distance_m))
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


# -- multi-lane scenes --------------------------------------------------------

@dataclass
class TrafficScene:
    positions: np.ndarray            # (V, 2) antenna (x, y)
    lanes: np.ndarray                # (V,)
    cems_equipped: np.ndarray        # (V,) bool
    equip_draws: np.ndarray          # (V,) uniforms behind the equipped flags
    tx_index: int
    rx_index: int
    cfg: TrafficConfig
    relay_candidates: list = field(default_factory=list)
    blocked_direct: bool = False
    direct_blockers: int = 0

    @property
    def vehicle_count(self) -> int:
        return len(self.lanes)

    def half_extents(self):
        return 0.5 * self.cfg.vehicle_width_m, 0.5 * self.cfg.vehicle_length_m

    def antenna(self, v) -> np.ndarray:
        x, y = self.positions[v]
        return np.array([x, y, self.cfg.antenna_height_m])

    def door(self, relay, a, b):
        """CEMS door of ``relay`` facing both ``a`` and ``b`` as ``(x_cems, yaw)``.

        Returns ``None`` when the two vehicles are on opposite sides.
        """
        xr, yr = self.positions[relay]
        sa = self.positions[a][0] - xr
        sb = self.positions[b][0] - xr
        hw = 0.5 * self.cfg.vehicle_width_m
        if sa > hw and sb > hw:
            return np.array([xr + hw, yr, self.cfg.cems_height_m]), 0.0
        if sa < -hw and sb < -hw:
            return np.array([xr - hw, yr, self.cfg.cems_height_m]), math.pi
        return None

    def placement(self, relay, a=None, b=None) -> Placement | None:
        a = self.tx_index if a is None else a
        b = self.rx_index if b is None else b
        dr = self.door(relay, a, b)
        if dr is None:
            return None
        return Placement(tuple(self.antenna(a)), tuple(self.antenna(b)), tuple(dr[0]), 1.0, dr[1],
                         meta={"relay": int(relay)})

    def with_penetration(self, penetration: float) -> "TrafficScene":
        """Same vehicles with the equipped flags re-drawn from the stored uniforms."""
        eq = self.equip_draws < penetration
        sc = TrafficScene(self.positions, self.lanes, eq, self.equip_draws, self.tx_index,
                          self.rx_index, self.cfg)
        sc.relay_candidates = _candidates(sc)
        sc.blocked_direct, sc.direct_blockers = self.blocked_direct, self.direct_blockers
        return sc


def _segment_box_hits(p0, p1, centers, hx, hy):
    """Liang-Barsky clipping of one segment against many axis-aligned boxes."""
    d = p1 - p0
    t0 = np.zeros(len(centers))
    t1 = np.ones(len(centers))
    ok = np.ones(len(centers), bool)
    for ax, h in ((0, hx), (1, hy)):
        lo = centers[:, ax] - h - p0[ax]
        hi = centers[:, ax] + h - p0[ax]
        if d[ax] == 0.0:
            ok &= (lo <= 0.0) & (hi >= 0.0)
        else:
            ta, tb = lo / d[ax], hi / d[ax]
            t0 = np.maximum(t0, np.minimum(ta, tb))
            t1 = np.minimum(t1, np.maximum(ta, tb))
    return ok & (t0 <= t1)


def blockage_test(scene: TrafficScene, a: int, b: int, point_a=None, point_b=None):
    """``(blocked, blocker_count)`` for the ground-projected segment a-b.

    Vehicles ``a`` and ``b`` themselves never block.  Optional points override
    the antenna positions (e.g. a door-mounted CEMS).
    """
    if a == b:
        raise ValueError("blockage test needs two distinct vehicles")
    p0 = np.asarray(scene.positions[a] if point_a is None else point_a[:2], dtype=float)
    p1 = np.asarray(scene.positions[b] if point_b is None else point_b[:2], dtype=float)
    hx, hy = scene.half_extents()
    hits = _segment_box_hits(p0, p1, scene.positions, hx, hy)
    hits[[a, b]] = False
    n = int(hits.sum())
    return n > 0, n


def _orient(a, b, c):
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_segment(a, b, c):
    return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])


def _segments_intersect(p1, p2, q1, q2):
    d1, d2 = _orient(q1, q2, p1), _orient(q1, q2, p2)
    d3, d4 = _orient(p1, p2, q1), _orient(p1, p2, q2)
    if ((d1 > 0 > d2) or (d1 < 0 < d2)) and ((d3 > 0 > d4) or (d3 < 0 < d4)):
        return True
    return ((d1 == 0 and _on_segment(q1, q2, p1)) or (d2 == 0 and _on_segment(q1, q2, p2))
            or (d3 == 0 and _on_segment(p1, p2, q1)) or (d4 == 0 and _on_segment(p1, p2, q2)))


def segment_hits_rectangle(p0, p1, center, half_x, half_y) -> bool:
    """Reference test by edge crossings plus endpoint containment (scalar code)."""
    cx, cy = center
    corners = [(cx - half_x, cy - half_y), (cx + half_x, cy - half_y),
               (cx + half_x, cy + half_y), (cx - half_x, cy + half_y)]
    for p in (p0, p1):
        if cx - half_x <= p[0] <= cx + half_x and cy - half_y <= p[1] <= cy + half_y:
            return True
    return any(_segments_intersect(tuple(p0), tuple(p1), corners[k], corners[(k + 1) % 4])
               for k in range(4))


def _candidates(scene: TrafficScene) -> list:
    out = []
    for r in np.flatnonzero(scene.cems_equipped):
        if r in (scene.tx_index, scene.rx_index):
            continue
        dr = scene.door(r, scene.tx_index, scene.rx_index)
        if dr is None:
            continue
        if blockage_test(scene, scene.tx_index, r, point_b=dr[0])[0]:
            continue
        if blockage_test(scene, r, scene.rx_index, point_a=dr[0])[0]:
            continue
        out.append(int(r))
    return out


def _draw_vehicles(cfg: TrafficConfig, rng):
    lam = cfg.car_density_per_km / 1000.0 * cfg.road_length_m
    pos, lanes = [], []
    for l in range(cfg.lane_count):
        n = rng.poisson(lam)
        y = np.sort(rng.uniform(0.0, cfg.road_length_m, n))
        pos.append(np.column_stack([np.full(n, l * cfg.lane_width_m), y]))
        lanes.append(np.full(n, l))
    return np.vstack(pos), np.concatenate(lanes)


def sample_multilane(cfg: TrafficConfig, rng=None) -> TrafficScene:
    """One snapshot: per-lane Poisson vehicles, a Tx/Rx pair and relay candidates."""
    if cfg.lane_count < 2:
        raise ValueError("multi-lane scenes need lane_count >= 2")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    for _ in range(cfg.max_resample):
        pos, lanes = _draw_vehicles(cfg, rng)
        draws = rng.uniform(size=len(lanes))
        if len(lanes) < 2:
            continue
        dd = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
        ii, jj = np.nonzero(dd >= cfg.min_pair_distance_m)
        if ii.size == 0:
            continue
        k = rng.integers(ii.size)
        scene = TrafficScene(pos, lanes, draws < cfg.penetration_ratio, draws, int(ii[k]), int(jj[k]), cfg)
        scene.blocked_direct, scene.direct_blockers = blockage_test(scene, scene.tx_index, scene.rx_index)
        scene.relay_candidates = _candidates(scene)
        return scene
    raise RuntimeError(f"no valid scene after {cfg.max_resample} draws")


def write_scene_csv(path, scene: TrafficScene, header: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header.rstrip("\n") + "\n")
        w = csv.writer(fh)
        w.writerow(["vehicle_id", "lane", "y_m", "cems_equipped"])
        for v in range(scene.vehicle_count):
            w.writerow([v, int(scene.lanes[v]), repr(float(scene.positions[v, 1])),
                        int(scene.cems_equipped[v])])


# -- link evaluation in scenes ------------------------------------------------

@dataclass
class LinkContext:
    """What a scene evaluation needs to turn geometry into SNRs."""

    geom: CemsGeometry
    array: ArrayGeometry
    cfg: GlobalConfig

    @property
    def wavelength_m(self) -> float:
        return self.cfg.wavelength_m


def door_legs(ctx: LinkContext, x_cems, yaw, antenna_points) -> np.ndarray:
    """Beamformed leg vectors of a door CEMS toward several vehicles, (V, L)."""
    el = global_positions(ctx.geom, x_cems, yaw)
    nr = element_normals(ctx.geom) @ yaw_matrix(yaw).T
    sets = np.stack([ctx.array.positions(p) for p in antenna_points])
    return leg_vectors(el, nr, sets, ctx.array.spacing_m, ctx.array.boresight_azimuth_rad,
                       ctx.wavelength_m, centroid=x_cems)


def relay_cascade(scene: TrafficScene, relay: int, ctx: LinkContext, a=None, b=None) -> np.ndarray | None:
    pl = scene.placement(relay, a, b)
    if pl is None:
        return None
    u = door_legs(ctx, np.asarray(pl.x_cems_m), pl.cems_yaw_rad, [pl.x_tx_m, pl.x_rx_m])
    return u[0] * u[1]


def direct_snr_db(scene: TrafficScene, a: int, b: int, ctx: LinkContext) -> float:
    """Matched-beam direct link with per-blocker attenuation (or outage)."""
    d = float(np.linalg.norm(scene.positions[a] - scene.positions[b]))
    blocked, n = blockage_test(scene, a, b)
    if blocked and scene.cfg.direct_blockage == "outage":
        return -math.inf
    pl = 20.0 * math.log10(FOUR_PI * d / ctx.wavelength_m) + n * scene.cfg.blockage_loss_db_per_blocker
    gain = 20.0 * math.log10(ctx.array.element_count ** 2)
    return ctx.cfg.transmit_snr_db + gain - pl


def _snr_db(amp, cfg):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(cfg.transmit_snr_linear * np.abs(amp) ** 2)


def relay_selection(scene: TrafficScene, policy: str, ctx: LinkContext | None = None, profile=None,
                    rng=None, snr_db=None):
    """Pick a relay among the scene's candidates.

    ``random`` draws uniformly with ``rng``; ``max_power`` maximizes the
    relayed SNR, either from precomputed ``snr_db`` (candidate -> dB) or
    evaluated with ``ctx`` and the designed ``profile`` phases.
    """
    cands = list(scene.relay_candidates)
    if not cands:
        return None
    if policy == "random":
        rng = np.random.default_rng(scene.cfg.seed) if rng is None else rng
        return cands[int(rng.integers(len(cands)))]
    if policy != "max_power":
        raise ValueError(f"unknown relay selection policy {policy!r}")
    if snr_db is None:
        phases = np.asarray(getattr(profile, "phases_rad", profile), dtype=float)
        snr_db = {r: float(_snr_db(relay_cascade(scene, r, ctx) @ np.exp(1j * phases), ctx.cfg))
                  for r in cands}
    return max(cands, key=lambda r: snr_db[r])


# -- connectivity ---------------------------------------------------------------

@dataclass(frozen=True)
class ConnectivityReport:
    fiedler_value: float
    normalized_connectivity: float
    node_count: int
    snr_threshold_db: float
    mode: str = "direct+relay"
    edge_count: int = 0


def algebraic_connectivity(adjacency) -> float:
    """Second smallest Laplacian eigenvalue of an undirected graph."""
    A = np.asarray(adjacency, dtype=float)
    A = np.maximum(A, A.T)
    np.fill_diagonal(A, 0.0)
    if A.shape[0] < 2:
        return 0.0
    lam = np.linalg.eigvalsh(np.diag(A.sum(1)) - A)
    return float(max(lam[1], 0.0)) if lam[1] > 1e-9 * max(1.0, lam[-1]) else 0.0


def direct_pair_snr_db(scene: TrafficScene, ctx: LinkContext) -> np.ndarray:
    V = scene.vehicle_count
    out = np.full((V, V), -np.inf)
    for a in range(V):
        for b in range(a + 1, V):
            out[a, b] = out[b, a] = direct_snr_db(scene, a, b, ctx)
    return out


def relay_pair_snr_db(scene: TrafficScene, ctx: LinkContext, profile, relays=None) -> list:
    """Per door: ``(relay, member indices, SNR matrix in dB)`` for every served pair.

    A door serves the vehicles in its front half-space whose leg to the door
    is unblocked; the pair amplitudes are ``U diag(e^{j phi}) U^T``.
    """
    V = scene.vehicle_count
    coef = np.exp(1j * np.asarray(getattr(profile, "phases_rad", profile), dtype=float))
    hw = 0.5 * scene.cfg.vehicle_width_m
    relays = np.flatnonzero(scene.cems_equipped) if relays is None else relays
    out = []
    for r in relays:
        xr, yr = scene.positions[r]
        for side, yaw in ((1.0, 0.0), (-1.0, math.pi)):
            door = np.array([xr + side * hw, yr, scene.cfg.cems_height_m])
            idx = [v for v in range(V) if v != r and side * (scene.positions[v, 0] - xr) > hw
                   and not blockage_test(scene, v, r, point_b=door)[0]]
            if len(idx) < 2:
                continue
            U = door_legs(ctx, door, yaw, [scene.antenna(v) for v in idx])
            out.append((int(r), np.array(idx), _snr_db((U * coef[None, :]) @ U.T, ctx.cfg)))
    return out


def combine_pair_snr(V: int, direct=None, relay_terms=(), allowed=None) -> np.ndarray:
    """Best SNR per pair from a direct matrix and the relay terms of allowed relays."""
    best = np.full((V, V), -np.inf) if direct is None else direct.copy()
    for r, idx, snr in relay_terms:
        if allowed is not None and not allowed[r]:
            continue
        sub = np.ix_(idx, idx)
        best[sub] = np.maximum(best[sub], snr)
    np.fill_diagonal(best, -np.inf)
    return best


def pairwise_snr_db(scene: TrafficScene, ctx: LinkContext, profile, mode: str = "direct+relay"):
    """Best SNR per vehicle pair over the allowed link types, (V, V) in dB."""
    if mode not in ("direct+relay", "relay", "direct"):
        raise ValueError(f"unknown connectivity mode {mode!r}")
    direct = None if mode == "relay" else direct_pair_snr_db(scene, ctx)
    terms = () if mode == "direct" else relay_pair_snr_db(scene, ctx, profile)
    return combine_pair_snr(scene.vehicle_count, direct, terms)


def connectivity(scene: TrafficScene, snr_threshold_db: float, ctx: LinkContext | None = None,
                 profile=None, mode: str = "direct+relay", pair_snr_db=None) -> ConnectivityReport:
    if scene.vehicle_count < 2:
        raise ValueError("connectivity needs at least two vehicles")
    snr = pairwise_snr_db(scene, ctx, profile, mode) if pair_snr_db is None else pair_snr_db
    A = snr > snr_threshold_db
    np.fill_diagonal(A, False)
    lam2 = algebraic_connectivity(A)
    n = scene.vehicle_count
    return ConnectivityReport(lam2, lam2 / n, n, snr_threshold_db, mode, int(np.triu(A).sum()))
