"""Free-form (element-wise) phase design over a placement distribution.

Every objective is a function of the per-placement received amplitude
``s(X) = sum_l conj(h_o,l) exp(j phi_l) h_i,l``, so a distribution is reduced
to its cascade matrix ``C[X, l] = conj(h_o,l(X)) h_i,l(X)`` and weights.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .channel import ISOTROPIC, PatternConfig, effective_link, leg_vectors
from .geometry import (ArrayGeometry, CemsGeometry, GlobalConfig,
                       element_normals, global_positions, yaw_matrix)
from .phase_profiles import PhaseProfile

log = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class ScenarioDistribution:
    """Weighted placements plus their cached cascade terms."""

    cascade: np.ndarray
    weights: np.ndarray
    placements: list = field(default_factory=list)
    fingerprint: str = ""

    def __post_init__(self):
        self.cascade = np.atleast_2d(np.asarray(self.cascade, dtype=complex))
        self.weights = np.asarray(self.weights, dtype=float)
        if self.cascade.shape[0] == 0:
            raise ValueError("empty distribution")
        if self.weights.shape != (self.cascade.shape[0],):
            raise ValueError("one weight per placement is required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative and sum to 1")
        if not self.fingerprint:
            self.fingerprint = hashlib.sha1(self.cascade.tobytes() + self.weights.tobytes()).hexdigest()[:16]

    @property
    def size(self) -> int:
        return self.cascade.shape[0]

    @property
    def L(self) -> int:
        return self.cascade.shape[1]

    @classmethod
    def from_links(cls, h_i, h_o, weights=None, placements=()):
        h_i = np.atleast_2d(np.asarray(h_i, dtype=complex))
        h_o = np.atleast_2d(np.asarray(h_o, dtype=complex))
        n = h_i.shape[0]
        w = np.full(n, 1.0 / n) if weights is None else weights
        return cls(np.conj(h_o) * h_i, w, list(placements))

    def amplitudes(self, phases) -> np.ndarray:
        return self.cascade @ np.exp(1j * np.asarray(phases, dtype=float))

    def subset(self, idx) -> "ScenarioDistribution":
        idx = np.asarray(idx)
        w = self.weights[idx]
        pl = [self.placements[i] for i in idx] if self.placements else []
        return ScenarioDistribution(self.cascade[idx], w / w.sum(), pl)


def build_distribution(placements, geom: CemsGeometry, tx_array: ArrayGeometry,
                       rx_array: ArrayGeometry, wavelength_m: float,
                       patterns: PatternConfig = PatternConfig()) -> ScenarioDistribution:
    """Exact near-field cascade terms for every placement (relay-pointed beams)."""
    placements = list(placements)
    if not placements:
        raise ValueError("empty distribution")
    weights = np.array([p.weight for p in placements], dtype=float)
    weights = weights / weights.sum()
    fast = (patterns.tx == ISOTROPIC and patterns.rx == ISOTROPIC
            and tx_array.spacing_m == rx_array.spacing_m
            and tx_array.element_count == rx_array.element_count
            and tx_array.boresight_azimuth_rad == rx_array.boresight_azimuth_rad)
    C = np.empty((len(placements), geom.L), complex)
    for x, pl in enumerate(placements):
        if fast:
            el = global_positions(geom, pl.x_cems_m, pl.cems_yaw_rad)
            nr = element_normals(geom)
            if pl.cems_yaw_rad:
                nr = nr @ yaw_matrix(pl.cems_yaw_rad).T
            ants = np.stack([tx_array.positions(pl.x_tx_m), rx_array.positions(pl.x_rx_m)])
            u = leg_vectors(el, nr, ants, tx_array.spacing_m, tx_array.boresight_azimuth_rad,
                            wavelength_m, patterns.cems, centroid=pl.x_cems_m)
            C[x] = u[0] * u[1]
        else:
            C[x] = effective_link(pl, geom, tx_array, rx_array, wavelength_m, patterns).cascade
    return ScenarioDistribution(C, weights, placements)


# -- objectives ---------------------------------------------------------------

def _se_of_amp(amp, zeta):
    return np.log2(1.0 + zeta * np.abs(amp) ** 2)


def _snr_db(amp, zeta):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(zeta * np.abs(amp) ** 2)


def _smoothed_cov_of_amp(amp, zeta, gamma_db, tau_db):
    z = (_snr_db(amp, zeta) - gamma_db) / tau_db
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _phases(profile):
    return profile.phases_rad if isinstance(profile, PhaseProfile) else np.asarray(profile, float)


def average_se(profile, dist: ScenarioDistribution, cfg: GlobalConfig) -> float:
    amp = dist.amplitudes(_phases(profile))
    return float(dist.weights @ _se_of_amp(amp, cfg.transmit_snr_linear))


def average_coverage(profile, dist: ScenarioDistribution, cfg: GlobalConfig) -> float:
    amp = dist.amplitudes(_phases(profile))
    snr = cfg.transmit_snr_linear * np.abs(amp) ** 2
    return float(dist.weights @ (snr > cfg.coverage_threshold_linear))


def smoothed_coverage(profile, dist: ScenarioDistribution, cfg: GlobalConfig, tau_db: float) -> float:
    """Logistic surrogate of the coverage indicator in the dB domain."""
    amp = dist.amplitudes(_phases(profile))
    return float(dist.weights @ _smoothed_cov_of_amp(amp, cfg.transmit_snr_linear,
                                                     cfg.coverage_threshold_db, tau_db))


def _objective_fn(objective, cfg, tau_db=None):
    zeta = cfg.transmit_snr_linear
    if objective == "se":
        return lambda amp: _se_of_amp(amp, zeta)
    if objective == "coverage_smoothed":
        return lambda amp: _smoothed_cov_of_amp(amp, zeta, cfg.coverage_threshold_db, tau_db)
    if objective == "coverage":
        thr = cfg.coverage_threshold_linear
        return lambda amp: (zeta * np.abs(amp) ** 2 > thr).astype(float)
    raise ValueError(f"unknown objective {objective!r}")


def evaluate(objective, profile, dist, cfg, tau_db=1.0) -> float:
    fn = _objective_fn(objective, cfg, tau_db)
    return float(dist.weights @ fn(dist.amplitudes(_phases(profile))))


# -- coordinate ascent --------------------------------------------------------

@dataclass
class AscentConfig:
    max_sweeps: int = 60
    restarts: int = 4
    tolerance: float = 1e-10
    line_search_points: int = 32
    golden_tol_rad: float = 1e-6
    smoothing_tau_db: float = 2.0
    tau_anneal: float = 0.5
    tau_stages: int = 4
    penalty_eta0_scale: float = 0.1
    penalty_eta_growth: float = 2.0
    penalty_stages: int = 10
    pg_iterations: int = 300
    pg_step: float = 1.0
    rank_tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if min(self.max_sweeps, self.restarts, self.line_search_points) < 1:
            raise ValueError("sweep, restart and line-search counts must be positive")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


@dataclass
class AscentResult:
    profile: PhaseProfile
    objective: float
    history: list
    converged: bool
    restart_histories: list = field(default_factory=list)


def _line_search(fn, weights, resid, col, grid_pts, tol, levels=None, current=None):
    """Maximize ``weights @ fn(resid + col e^{j psi})`` over ``psi``."""
    if levels is not None:
        psis = TWO_PI * np.arange(levels) / levels
    else:
        psis = TWO_PI * np.arange(grid_pts) / grid_pts
    vals = fn(resid[:, None] + col[:, None] * np.exp(1j * psis)[None, :]).T @ weights
    k = int(np.argmax(vals))
    best_psi, best_val = psis[k], float(vals[k])
    if levels is None:
        f = lambda p: float(weights @ fn(resid + col * np.exp(1j * p)))
        a, b = best_psi - TWO_PI / grid_pts, best_psi + TWO_PI / grid_pts
        c, d = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
        fc, fd = f(c), f(d)
        while b - a > tol:
            if fc >= fd:
                b, d, fd = d, c, fc
                c = b - GOLDEN * (b - a)
                fc = f(c)
            else:
                a, c, fc = c, d, fd
                d = a + GOLDEN * (b - a)
                fd = f(d)
        p, v = (c, fc) if fc >= fd else (d, fd)
        if v > best_val:
            best_psi, best_val = p, v
    if current is not None:
        cur_val = float(weights @ fn(resid + col * np.exp(1j * current)))
        if cur_val >= best_val:
            return current, cur_val
    return best_psi, best_val


def _ascend(fn, dist, phases, cfg: AscentConfig, levels=None):
    C, wts = dist.cascade, dist.weights
    phases = phases.copy()
    v = np.exp(1j * phases)
    amp = C @ v
    history = [float(wts @ fn(amp))]
    converged = False
    for _ in range(cfg.max_sweeps):
        for ell in range(C.shape[1]):
            col = C[:, ell]
            resid = amp - col * v[ell]
            psi, _ = _line_search(fn, wts, resid, col, cfg.line_search_points, cfg.golden_tol_rad,
                                  levels, current=phases[ell])
            phases[ell] = psi
            v[ell] = np.exp(1j * psi)
            amp = resid + col * v[ell]
        amp = C @ v  # refresh against drift
        history.append(float(wts @ fn(amp)))
        if history[-1] - history[-2] < cfg.tolerance:
            converged = True
            break
    return phases, history, converged


def coordinate_ascent(objective: str, dist: ScenarioDistribution, cfg: GlobalConfig,
                      ascent: AscentConfig = AscentConfig(), init=None,
                      levels: int | None = None) -> AscentResult:
    """Cyclic per-element phase maximization with random restarts.

    ``objective`` is ``se``, ``coverage_smoothed`` (annealed logistic surrogate)
    or ``coverage``.  With ``levels`` the search runs on the quantized lattice
    ``2 pi k / levels``.  The first restart starts from ``init`` when given.
    """
    rng = np.random.default_rng(ascent.seed)
    L = dist.L
    best = None
    histories = []
    all_converged = True
    for r in range(ascent.restarts):
        if r == 0 and init is not None:
            ph = _phases(init).copy()
        elif levels is not None:
            ph = TWO_PI * rng.integers(0, levels, L) / levels
        else:
            ph = rng.uniform(0.0, TWO_PI, L)
        if objective == "coverage_smoothed":
            hist = []
            tau = ascent.smoothing_tau_db
            for _ in range(ascent.tau_stages):
                ph, h, conv = _ascend(_objective_fn(objective, cfg, tau), dist, ph, ascent, levels)
                hist.append(h)
                tau *= ascent.tau_anneal
        else:
            ph, h, conv = _ascend(_objective_fn(objective, cfg), dist, ph, ascent, levels)
            hist = [h]
        all_converged &= conv
        histories.append(hist)
        final_tau = ascent.smoothing_tau_db * ascent.tau_anneal ** (ascent.tau_stages - 1)
        score = evaluate(objective, ph, dist, cfg, final_tau)
        if best is None or score > best[1]:
            best = (ph, score, hist)
    if not all_converged:
        log.info("coordinate ascent hit max_sweeps=%d before converging", ascent.max_sweeps)
    return AscentResult(PhaseProfile(best[0]), best[1], best[2], all_converged, histories)


def alignment_phases(cascade_row) -> np.ndarray:
    """Single-placement optimum: co-phase every term of the cascade."""
    return np.mod(-np.angle(cascade_row), TWO_PI)


# -- brute force --------------------------------------------------------------

def brute_force_oracle(dist: ScenarioDistribution, cfg: GlobalConfig, levels: int,
                       objective: str = "se", L_max: int = 8, tau_db: float = 1.0,
                       max_points: int = 20_000_000) -> AscentResult:
    """Exact maximizer over the ``levels``-ary phase lattice.

    The first phase is pinned to 0 (every objective is invariant to a common
    phase shift and the lattice is closed under a one-level shift).
    """
    L = dist.L
    if L > L_max:
        raise ValueError(f"brute force refuses L={L} > L_max={L_max}")
    if levels ** (L - 1) > max_points:
        raise ValueError(f"{levels}^{L - 1} lattice points exceed the enumeration budget")
    fn = _objective_fn(objective, cfg, tau_db)
    lattice = np.exp(1j * TWO_PI * np.arange(levels) / levels)
    C, wts = dist.cascade, dist.weights
    if L == 1:
        return AscentResult(PhaseProfile(np.zeros(1)), float(fn(C[:, 0]) @ wts), [], True)
    best_val, best_idx = -np.inf, None
    chunk = max(1, 200_000 // max(1, dist.size))
    combos = itertools.product(range(levels), repeat=L - 1)
    while True:
        block = np.array(list(itertools.islice(combos, chunk)), dtype=int)
        if block.size == 0:
            break
        idx = np.hstack([np.zeros((block.shape[0], 1), int), block])
        vals = fn(lattice[idx] @ C.T) @ wts
        k = int(np.argmax(vals))
        if vals[k] > best_val:
            best_val, best_idx = float(vals[k]), idx[k]
    phases = TWO_PI * best_idx / levels
    return AscentResult(PhaseProfile(phases), best_val, [best_val], True)


def quantization_lipschitz_bound(dist: ScenarioDistribution, cfg: GlobalConfig, levels: int) -> float:
    """Bound on the SE change when every phase moves by at most ``pi / levels``."""
    zeta = cfg.transmit_snr_linear
    per_elem = math.sqrt(zeta) / math.log(2.0) * (dist.weights @ np.abs(dist.cascade))
    return float(per_elem.sum() * math.pi / levels)


# -- rank-one penalty on the elliptope ----------------------------------------

@dataclass
class PenaltyResult:
    profile: PhaseProfile
    objective: float
    V: np.ndarray
    rank_gap: float
    rank_gap_closed: bool
    relaxed_objective: float
    relaxed_upper_bound: float
    penalty_history: list
    objective_history: list
    eta_history: list
    rank_gap_history: list = field(default_factory=list)


def _project_elliptope(V):
    """Eigenvalue clipping followed by unit-diagonal renormalization."""
    V = 0.5 * (V + V.conj().T)
    lam, U = np.linalg.eigh(V)
    lam = np.clip(lam, 0.0, None)
    V = (U * lam) @ U.conj().T
    d = np.sqrt(np.clip(np.real(np.diag(V)), 1e-300, None))
    V = V / d[:, None] / d[None, :]
    return 0.5 * (V + V.conj().T)


def _rank_stats(V):
    lam = np.linalg.eigvalsh(0.5 * (V + V.conj().T))
    lam1 = lam[-1]
    lam2 = lam[-2] if lam.size > 1 else 0.0
    return lam, float(max(lam2, 0.0) / lam1) if lam1 > 0 else 0.0


def nuclear_minus_spectral(V) -> float:
    """``||V||_* - ||V||_2`` for a Hermitian matrix."""
    lam = np.linalg.eigvalsh(0.5 * (V + V.conj().T))
    return float(np.abs(lam).sum() - np.abs(lam).max())


def elliptope_penalty_ascent(dist: ScenarioDistribution, cfg: GlobalConfig,
                             ascent: AscentConfig = AscentConfig(), eta0: float | None = None,
                             polish: bool = True, L_guard: int = 512) -> PenaltyResult:
    """Rank-one penalty program solved by projected gradient on the elliptope.

    Stage 0 solves the relaxation (no penalty); later stages maximize
    ``sum_X f(X) log2(1 + zeta tr(R(X) V)) - eta (||V||_* - delta(V_i, V))``
    with ``||V||_2`` linearized at the current iterate's leading eigenvector
    and ``eta`` doubling per stage until the rank gap closes.
    """
    L = dist.L
    if L > L_guard:
        raise ValueError(f"elliptope method limited to L <= {L_guard}, got {L}")
    zeta = cfg.transmit_snr_linear
    A = np.conj(dist.cascade)  # rows a_X with tr(R V) = a^H V a
    wts = dist.weights

    def smooth(V):
        q = np.real(np.einsum("xi,ij,xj->x", A.conj(), V, A))
        return float(wts @ np.log2(1.0 + zeta * np.clip(q, 0.0, None))), q

    def grad(q):
        coef = wts * zeta / ((1.0 + zeta * np.clip(q, 0.0, None)) * math.log(2.0))
        return (A.T * coef) @ A.conj()

    penalty_hist, obj_hist, eta_hist, gap_hist = [], [], [], []

    def run_stage(V, eta, iters):
        step = ascent.pg_step
        f_s, q = smooth(V)
        lam, U = np.linalg.eigh(V)
        F = f_s - eta * (lam.sum() - lam[-1])
        for _ in range(iters):
            u = U[:, -1]
            G = grad(q)
            if eta:
                G = G - eta * (np.eye(L) - np.outer(u, u.conj()))
            while True:
                Vn = _project_elliptope(V + step * G)
                fn_s, qn = smooth(Vn)
                lam_n, U_n = np.linalg.eigh(Vn)
                Fn = fn_s - eta * (lam_n.sum() - lam_n[-1])
                if Fn >= F - 1e-15 or step < 1e-12:
                    break
                step *= 0.5
            if Fn < F - 1e-15:
                break
            gain = Fn - F
            V, q, F, U = Vn, qn, Fn, U_n
            penalty_hist.append(nuclear_minus_spectral(V))
            obj_hist.append(fn_s)
            gap_hist.append(float(max(lam_n[-2], 0.0) / lam_n[-1]) if L > 1 else 0.0)
            step = min(step * 2.0, 1e6)
            if gain <= ascent.tolerance * max(1.0, abs(F)):
                break
        return V

    V = np.eye(L, dtype=complex)
    penalty_hist.append(nuclear_minus_spectral(V))
    V = run_stage(V, 0.0, ascent.pg_iterations * 4)
    relaxed_obj, q = smooth(V)
    G = grad(q)
    ub = relaxed_obj + L * float(np.linalg.eigvalsh(0.5 * (G + G.conj().T))[-1]) \
        - float(np.real(np.trace(G @ V)))
    eta = eta0 if eta0 is not None else ascent.penalty_eta0_scale * max(abs(relaxed_obj), 1e-12)
    _, gap = _rank_stats(V)
    stages = 0
    while gap >= ascent.rank_tol and stages < ascent.penalty_stages and eta > 0:
        eta_hist.append(eta)
        V = run_stage(V, eta, ascent.pg_iterations)
        _, gap = _rank_stats(V)
        eta *= ascent.penalty_eta_growth
        stages += 1
    closed = gap < ascent.rank_tol
    if not closed:
        log.info("rank gap %.3e still open after %d penalty stages", gap, stages)
    _, U = np.linalg.eigh(V)
    phases = np.mod(np.angle(U[:, -1]), TWO_PI)
    if polish:
        res = coordinate_ascent("se", dist, cfg,
                                AscentConfig(**{**ascent.__dict__, "restarts": 1}), init=phases)
        phases, objective = res.profile.phases_rad, res.objective
    else:
        objective = average_se(phases, dist, cfg)
    return PenaltyResult(PhaseProfile(phases), objective, V, gap, closed, relaxed_obj, ub,
                         penalty_hist, obj_hist, eta_hist, gap_hist)
