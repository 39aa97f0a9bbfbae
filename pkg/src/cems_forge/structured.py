"""Modular (codebook-per-module) phase design with a response cache.

Each of the P column modules follows the cylindrical closed-form phase of one
codebook angle pair.  Because the received amplitude is linear in the
per-element reflection coefficients, it splits into per-module contributions
``c[X, p, a]`` that can be tabulated once; any assignment is then evaluated by
a gather and a sum over modules.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import CemsGeometry, GlobalConfig
from .phase_profiles import Codebook, ModuleAssignment, PhaseProfile, modular_phase_matrix
from .unstructured import ScenarioDistribution

log = logging.getLogger(__name__)


@dataclass
class ModuleResponseCache:
    """Tensor ``responses[X, p, a]`` plus the placement weights."""

    responses: np.ndarray
    weights: np.ndarray
    fingerprint: str = ""

    @property
    def placements(self) -> int:
        return self.responses.shape[0]

    @property
    def modules(self) -> int:
        return self.responses.shape[1]

    @property
    def codebook_size(self) -> int:
        return self.responses.shape[2]

    def amplitudes(self, assignments) -> np.ndarray:
        """Received amplitudes, shape (B, X), for a batch of index vectors (B, P)."""
        I = np.atleast_2d(np.asarray(assignments, dtype=np.intp))
        if I.shape[1] != self.modules:
            raise ValueError(f"assignment length {I.shape[1]} != P={self.modules}")
        if I.size and (I.min() < 0 or I.max() >= self.codebook_size):
            raise IndexError(f"codebook index out of range [0, {self.codebook_size})")
        picked = self.responses[:, np.arange(self.modules)[None, :], I]  # (X, B, P)
        return picked.sum(axis=2).T


def precompute_module_responses(dist: ScenarioDistribution, geom: CemsGeometry, codebook: Codebook,
                                wavelength_m: float, memory_budget_bytes: float = 2e9,
                                chunk_bytes: float = 64e6) -> ModuleResponseCache:
    """Tabulate every module's contribution for every codebook entry.

    The phase of a module element depends on the entry only through
    ``cos ti + cos to`` and ``sin ti + sin to``, so each chunk of entries is a
    single dense complex matrix product.
    """
    if dist.L != geom.L:
        raise ValueError(f"distribution has L={dist.L}, geometry has L={geom.L}")
    X, P, NA = dist.size, geom.module_count, codebook.size
    need = X * P * NA * 16
    if need > memory_budget_bytes:
        raise MemoryError(f"response cache needs {need / 1e9:.2f} GB > budget "
                          f"{memory_budget_bytes / 1e9:.2f} GB (|X|={X}, P={P}, N_A={NA})")
    k = 2.0 * math.pi / wavelength_m
    cs, ss = codebook.sums()
    out = np.empty((X, P, NA), complex)
    C = dist.cascade.reshape(X, geom.rows, geom.cols)
    for p in range(P):
        cols = geom.module_columns(p)
        Cp = C[:, :, cols].reshape(X, -1)
        xm = np.repeat(geom.row_x, cols.stop - cols.start)
        yn = np.tile(geom.col_y[cols], geom.rows)
        step = max(1, int(chunk_bytes // (16 * xm.size)))
        for a0 in range(0, NA, step):
            a1 = min(NA, a0 + step)
            E = np.exp(1j * k * (np.outer(xm, cs[a0:a1]) + np.outer(yn, ss[a0:a1])))
            out[:, p, a0:a1] = Cp @ E
    return ModuleResponseCache(out, dist.weights.copy(), dist.fingerprint)


def _fitness_from_amp(amp, weights, objective, cfg: GlobalConfig):
    snr = cfg.transmit_snr_linear * np.abs(amp) ** 2
    if objective == "se":
        return np.log2(1.0 + snr) @ weights
    if objective == "coverage":
        return (snr > cfg.coverage_threshold_linear).astype(float) @ weights
    raise ValueError(f"unknown objective {objective!r}")


def fitness_batch(assignments, cache: ModuleResponseCache, objective: str, cfg: GlobalConfig) -> np.ndarray:
    return _fitness_from_amp(cache.amplitudes(assignments), cache.weights, objective, cfg)


def fitness(assignment, cache: ModuleResponseCache, objective: str, cfg: GlobalConfig) -> float:
    idx = assignment.indices if isinstance(assignment, ModuleAssignment) else assignment
    return float(fitness_batch([idx], cache, objective, cfg)[0])


@dataclass
class GAConfig:
    population_size: int = 64
    generations: int = 200
    crossover_rate: float = 0.8
    mutation_rate: float = 0.05
    elitism_count: int = 2
    tournament_size: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        for name in ("crossover_rate", "mutation_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 <= self.elitism_count < self.population_size:
            raise ValueError("elitism_count must be in [0, population_size)")
        if self.tournament_size < 1:
            raise ValueError("tournament_size must be >= 1")


@dataclass
class SelectionResult:
    assignment: ModuleAssignment
    fitness: float
    trace: list = field(default_factory=list)


def _initial_population(rng, n, P, NA):
    pop = rng.integers(0, NA, size=(n, P))
    # Cover every codebook entry in every gene when the population allows it.
    k = min(n, NA)
    for p in range(P):
        pop[:k, p] = rng.permutation(NA)[:k]
    return pop


def ga_optimize(cache: ModuleResponseCache, codebook: Codebook | None, P: int, objective: str,
                ga_cfg: GAConfig = GAConfig(), cfg: GlobalConfig = GlobalConfig(),
                initial=None, polish: bool = False) -> SelectionResult:
    """Generational GA over index vectors; returns the best chromosome ever seen.

    ``trace`` holds ``(generation, best_fitness, mean_fitness)`` with
    generation 0 being the initial population.  ``initial`` injects known
    chromosomes (e.g. a coarser codebook's winner) into that population.
    With ``polish`` the winner is refined by :func:`module_best_response`.
    """
    if P != cache.modules:
        raise ValueError(f"P={P} does not match the cache ({cache.modules} modules)")
    NA = cache.codebook_size
    if codebook is not None and codebook.size != NA:
        raise ValueError("codebook size does not match the cache")
    rng = np.random.default_rng(ga_cfg.seed)
    n = ga_cfg.population_size
    pop = _initial_population(rng, n, P, NA)
    if initial is not None:
        seeds = np.atleast_2d(np.asarray([getattr(a, "indices", a) for a in initial], dtype=int))
        if seeds.shape[1] != P:
            raise ValueError("injected chromosomes must have P genes")
        pop[-len(seeds):] = seeds[:n]
    fit = fitness_batch(pop, cache, objective, cfg)
    k = int(np.argmax(fit))
    best, best_fit = pop[k].copy(), float(fit[k])
    trace = [(0, best_fit, float(fit.mean()))]
    n_children = n - ga_cfg.elitism_count
    for g in range(1, ga_cfg.generations + 1):
        elite = pop[np.argsort(-fit, kind="stable")[:ga_cfg.elitism_count]]
        contenders = rng.integers(0, n, size=(2, n_children, ga_cfg.tournament_size))
        winners = np.take_along_axis(contenders, np.argmax(fit[contenders], axis=2)[..., None], 2)[..., 0]
        mom, dad = pop[winners[0]], pop[winners[1]]
        children = mom.copy()
        if P > 1:
            cross = rng.random(n_children) < ga_cfg.crossover_rate
            cut = rng.integers(1, P, size=n_children)
            take_dad = cross[:, None] & (np.arange(P)[None, :] >= cut[:, None])
            children[take_dad] = dad[take_dad]
        mutate = rng.random((n_children, P)) < ga_cfg.mutation_rate
        children[mutate] = rng.integers(0, NA, size=int(mutate.sum()))
        pop = np.vstack([elite, children])
        fit = fitness_batch(pop, cache, objective, cfg)
        k = int(np.argmax(fit))
        if fit[k] > best_fit:
            best, best_fit = pop[k].copy(), float(fit[k])
        trace.append((g, best_fit, float(fit.mean())))
    if polish:
        return module_best_response(cache, best, objective, cfg, trace=trace)
    return SelectionResult(ModuleAssignment(best), best_fit, trace)


def module_best_response(cache: ModuleResponseCache, start, objective: str,
                         cfg: GlobalConfig = GlobalConfig(), max_rounds: int = 50,
                         trace=None) -> SelectionResult:
    """Cyclic exact re-selection of one module at a time (never decreases fitness)."""
    I = np.array(getattr(start, "indices", start), dtype=int)
    P = cache.modules
    base = cache.amplitudes(I)[0]
    cur = float(_fitness_from_amp(base, cache.weights, objective, cfg))
    for _ in range(max_rounds):
        changed = False
        for p in range(P):
            rest = base - cache.responses[:, p, I[p]]
            f = _fitness_from_amp(rest[None, :] + cache.responses[:, p, :].T, cache.weights, objective, cfg)
            a = int(np.argmax(f))
            if f[a] > cur:
                I[p], cur, changed = a, float(f[a]), True
                base = rest + cache.responses[:, p, a]
        if not changed:
            break
    cur = fitness(I, cache, objective, cfg)
    return SelectionResult(ModuleAssignment(I), cur, list(trace or []))


def map_assignment(assignment, source: Codebook, target: Codebook) -> ModuleAssignment:
    """Nearest target entry (in angle space) for every module of ``assignment``."""
    tgt = np.array([(e.theta_i_rad, e.theta_o_rad) for e in target.entries])
    idx = []
    for a in getattr(assignment, "indices", assignment):
        e = source[a]
        idx.append(int(np.argmin(np.hypot(tgt[:, 0] - e.theta_i_rad, tgt[:, 1] - e.theta_o_rad))))
    return ModuleAssignment(idx)


def exhaustive_select(cache: ModuleResponseCache, codebook: Codebook | None, P: int, objective: str,
                      cfg: GlobalConfig = GlobalConfig(), limit: int = 10 ** 6,
                      chunk: int = 4096) -> SelectionResult:
    """Exact argmax over all ``N_A ** P`` assignments (small spaces only)."""
    if P != cache.modules:
        raise ValueError(f"P={P} does not match the cache ({cache.modules} modules)")
    NA = cache.codebook_size
    total = NA ** P
    if total > limit:
        raise ValueError(f"N_A^P = {total} exceeds the exhaustive limit {limit}")
    best, best_fit = None, -np.inf
    for s in range(0, total, chunk):
        flat = np.arange(s, min(total, s + chunk))
        I = np.stack(np.unravel_index(flat, (NA,) * P), axis=1)
        f = fitness_batch(I, cache, objective, cfg)
        k = int(np.argmax(f))
        if f[k] > best_fit:
            best, best_fit = I[k], float(f[k])
    return SelectionResult(ModuleAssignment(best), best_fit)


def greedy_select(cache: ModuleResponseCache, objective: str, cfg: GlobalConfig = GlobalConfig()) -> SelectionResult:
    """Per-module argmax, each module scored as if it were alone."""
    idx = []
    for p in range(cache.modules):
        f = _fitness_from_amp(cache.responses[:, p, :].T, cache.weights, objective, cfg)
        idx.append(int(np.argmax(f)))
    return SelectionResult(ModuleAssignment(idx), fitness(idx, cache, objective, cfg))


def assignment_profile(geom: CemsGeometry, codebook: Codebook, assignment: ModuleAssignment,
                       wavelength_m: float) -> PhaseProfile:
    return modular_phase_matrix(geom, codebook, assignment, wavelength_m)


def write_assignment_csv(path, assignment: ModuleAssignment, codebook: Codebook, header: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header.rstrip("\n") + "\n")
        w = csv.writer(fh)
        w.writerow(["module_index", "theta_i_deg", "theta_o_deg"])
        for p, a in enumerate(assignment.indices):
            e = codebook[a]
            w.writerow([p, repr(math.degrees(e.theta_i_rad)), repr(math.degrees(e.theta_o_rad))])


def write_ga_trace_csv(path, trace, header: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header.rstrip("\n") + "\n")
        w = csv.writer(fh)
        w.writerow(["generation", "best_fitness", "mean_fitness"])
        for g, b, m in trace:
            w.writerow([g, repr(b), repr(m)])
