"""Config-driven experiment pipelines and CSV artifacts.

Each runner samples a placement distribution, designs a profile, evaluates
it and writes CSV files whose first line binds them to the configuration
hash and master seed.  Random streams are derived from ``(seed, name)`` so
every stage is reproducible on its own.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .channel import leg_vectors
from .config import ExperimentConfig, csv_header
from .geometry import Placement, element_normals, global_positions
from .phase_profiles import (anomalous_phase, bare_profile, build_codebook,
                             design_angles, specular_profile, write_profile_csv)
from .structured import (GAConfig, ga_optimize, map_assignment, modular_phase_matrix,
                         precompute_module_responses, write_assignment_csv, write_ga_trace_csv)
from .traffic import (LinkContext, TrafficScene, combine_pair_snr, connectivity, direct_pair_snr_db,
                      direct_snr_db, relay_cascade, relay_pair_snr_db, sample_multilane,
                      sample_two_lane)
from .unstructured import (AscentConfig, ScenarioDistribution, average_coverage, average_se,
                           build_distribution, coordinate_ascent, elliptope_penalty_ascent)

log = logging.getLogger(__name__)

LINK_MODES = ("direct", "bare", "specular", "optimized", "cris")


@dataclass
class ResultSet:
    experiment_id: str
    config_hash: str
    artifacts: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    complete: bool = True


def stream(cfg: ExperimentConfig, name: str) -> np.random.Generator:
    """Independent generator for one named stage of an experiment."""
    return np.random.default_rng([cfg.seed, zlib.crc32(name.encode())])


def write_csv(path, cfg: ExperimentConfig, columns, rows, extra_header: str = "") -> str:
    """Write header, column names and rows, then move the file into place."""
    buf = io.StringIO()
    buf.write(csv_header(cfg) + (f"; {extra_header}" if extra_header else "") + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return _atomic_write(path, buf.getvalue())


def _atomic_write(path, text: str) -> str:
    path = os.fspath(path)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)
    return path


def _atomic_via(path, writer, *args, **kwargs) -> str:
    tmp = f"{os.fspath(path)}.tmp{os.getpid()}"
    os.makedirs(os.path.dirname(os.path.abspath(tmp)), exist_ok=True)
    writer(tmp, *args, **kwargs)
    os.replace(tmp, path)
    return os.fspath(path)


# -- building blocks ----------------------------------------------------------

def link_context(cfg: ExperimentConfig, modules: int | None = None) -> LinkContext:
    lam = cfg.global_.wavelength_m
    return LinkContext(cfg.geometry.build(lam, modules), cfg.arrays.build(lam), cfg.global_)


def two_lane_distribution(cfg: ExperimentConfig, samples: int | None = None) -> ScenarioDistribution:
    lam = cfg.global_.wavelength_m
    n = cfg.experiment.samples if samples is None else samples
    tl = sample_two_lane(cfg.traffic, n, stream(cfg, "two_lane"))
    arr = cfg.arrays.build(lam)
    return build_distribution(tl.placements(), cfg.geometry.build(lam), arr, arr, lam, cfg.patterns())


def make_codebook(cfg: ExperimentConfig, geom, oversampling: float | None = None):
    cb = cfg.codebook
    return build_codebook(geom, tuple(math.radians(v) for v in cb.span_theta_i_deg),
                          cb.oversampling_factor if oversampling is None else oversampling,
                          span_theta_o=tuple(math.radians(v) for v in cb.span_theta_o_deg),
                          points_per_axis=cb.points_per_axis or None, anchored=cb.anchored)


def _ga_config(cfg: ExperimentConfig, name: str) -> GAConfig:
    seed = int(stream(cfg, name).integers(2 ** 63))
    return GAConfig(**{**cfg.optimizer.ga.__dict__, "seed": seed})


def design_modular(cfg: ExperimentConfig, dist: ScenarioDistribution, modules: int, objective: str = "se",
                   codebook=None, initial=None, tag: str = ""):
    """GA (or exhaustive) module selection; returns ``(profile, result, codebook)``."""
    lam = cfg.global_.wavelength_m
    geom = cfg.geometry.build(lam, modules)
    codebook = make_codebook(cfg, geom) if codebook is None else codebook
    cache = precompute_module_responses(dist, geom, codebook, lam)
    if objective not in ("se", "coverage"):
        raise ValueError("modular design supports the 'se' and 'coverage' objectives")
    if cfg.optimizer.method == "exhaustive":
        from .structured import exhaustive_select
        res = exhaustive_select(cache, codebook, modules, objective, cfg.global_)
    else:
        res = ga_optimize(cache, codebook, modules, objective, _ga_config(cfg, f"ga/{tag}/{modules}"),
                          cfg.global_, initial=initial, polish=cfg.optimizer.polish)
    prof = modular_phase_matrix(geom, codebook, res.assignment, lam)
    return prof, res, codebook


def best_specular(cfg: ExperimentConfig, dist: ScenarioDistribution, objective: str = "se",
                  grid_deg=np.arange(0.0, 90.0, 1.0)):
    """Best curvature-compensating specular design over a grid of angles."""
    lam = cfg.global_.wavelength_m
    geom = cfg.geometry.build(lam)
    fn = average_se if objective == "se" else average_coverage
    scores = [fn(specular_profile(geom, t, lam), dist, cfg.global_) for t in grid_deg]
    k = int(np.argmax(scores))
    return float(grid_deg[k]), float(scores[k])


def cris_average(dist: ScenarioDistribution, cfg: ExperimentConfig):
    """Per-placement matched phases (exact alignment): average SE and coverage."""
    amp = np.abs(dist.cascade).sum(axis=1)
    snr = cfg.global_.transmit_snr_linear * amp ** 2
    return float(dist.weights @ np.log2(1.0 + snr)), float(dist.weights @ (snr > cfg.global_.coverage_threshold_linear))


# -- experiments ------------------------------------------------------------------

def run_se_vs_p(cfg: ExperimentConfig, trace: bool = False) -> ResultSet:
    out = cfg.experiment.output_dir
    dist = two_lane_distribution(cfg)
    objective = cfg.optimizer.objective
    rows, artifacts = [], []
    for P in cfg.experiment.modules:
        t0 = time.perf_counter()
        prof, res, cb = design_modular(cfg, dist, P, objective, tag="se_vs_p")
        rows.append((P, cb.size, average_se(prof, dist, cfg.global_),
                     average_coverage(prof, dist, cfg.global_), res.fitness, time.perf_counter() - t0))
        if trace:
            artifacts.append(_atomic_via(os.path.join(out, f"ga_trace_P{P}.csv"), write_ga_trace_csv,
                                         res.trace, csv_header(cfg)))
    artifacts.append(write_csv(os.path.join(out, "avg_se_vs_P.csv"), cfg,
                               ["P", "N_A", "avg_se", "avg_coverage", "fitness"], [r[:5] for r in rows]))
    spec_t, spec_se = best_specular(cfg, dist, "se")
    spec_t_c, spec_cov = best_specular(cfg, dist, "coverage")
    cris_se, cris_cov = cris_average(dist, cfg)
    base = [("specular_best_se", spec_t, spec_se), ("specular_best_coverage", spec_t_c, spec_cov),
            ("cris_se", float("nan"), cris_se), ("cris_coverage", float("nan"), cris_cov)]
    artifacts.append(write_csv(os.path.join(out, "baselines.csv"), cfg, ["name", "theta_deg", "value"], base))
    summary = {"avg_se": {r[0]: r[2] for r in rows}, "avg_coverage": {r[0]: r[3] for r in rows},
               "specular_se": spec_se, "specular_coverage": spec_cov, "cris_se": cris_se,
               "runtime_s": {r[0]: r[5] for r in rows}}
    return ResultSet("se_vs_p", cfg.hash(), artifacts, summary)


def run_codebook_sweep(cfg: ExperimentConfig, trace: bool = False) -> ResultSet:
    """SE vs P for several codebook steps; coarse winners seed finer searches."""
    out = cfg.experiment.output_dir
    lam = cfg.global_.wavelength_m
    dist = two_lane_distribution(cfg)
    rows = []
    factors = sorted(cfg.experiment.oversampling_factors)
    for P in cfg.experiment.modules:
        geom = cfg.geometry.build(lam, P)
        prev = None
        for f in factors:
            cb = make_codebook(cfg, geom, f)
            init = None if prev is None else [map_assignment(prev[1].assignment, prev[0], cb)]
            prof, res, cb = design_modular(cfg, dist, P, cfg.optimizer.objective, cb, init, tag=f"cb{f}")
            rows.append((f, P, cb.size, math.degrees(cb.delta_theta_rad), average_se(prof, dist, cfg.global_),
                         average_coverage(prof, dist, cfg.global_)))
            prev = (cb, res)
    path = write_csv(os.path.join(out, "avg_se_vs_codebook.csv"), cfg,
                     ["oversampling_factor", "P", "N_A", "delta_theta_deg", "avg_se", "avg_coverage"], rows)
    summary = {(r[0], r[1]): r[4] for r in rows}
    return ResultSet("codebook_sweep", cfg.hash(), [path], {"avg_se": summary})


def _profile_for_map(cfg: ExperimentConfig):
    lam = cfg.global_.wavelength_m
    sm = cfg.snr_map
    geom = cfg.geometry.build(lam)
    if sm.profile == "specular":
        return specular_profile(geom, sm.specular_theta_deg, lam)
    if sm.profile == "bare":
        return bare_profile(geom)
    dist = two_lane_distribution(cfg)
    if sm.profile == "structured":
        return design_modular(cfg, dist, sm.modules, "se", tag="map")[0]
    if sm.profile == "unstructured":
        asc = AscentConfig(**{**cfg.optimizer.ascent.__dict__, "seed": int(stream(cfg, "map").integers(2 ** 63))})
        return coordinate_ascent("se", dist, cfg.global_, asc).profile
    raise ValueError(f"unknown snr_map profile {sm.profile!r}")


def snr_map(cfg: ExperimentConfig, profile=None, tx_gain: float = 1.0):
    """Relayed SNR (dB) over a grid of Rx positions; returns ``(xs, ys, grid)``.

    Cells within half a step of the Tx or the CEMS are skipped (NaN).
    """
    lam = cfg.global_.wavelength_m
    sm = cfg.snr_map
    geom = cfg.geometry.build(lam)
    profile = _profile_for_map(cfg) if profile is None else profile
    arr = cfg.arrays.build(lam)
    xc = np.asarray(sm.cems_position_m, dtype=float)
    xt = np.asarray(sm.tx_position_m, dtype=float)
    xs = np.arange(sm.x_range_m[0], sm.x_range_m[1] + 1e-9, sm.step_m)
    ys = np.arange(sm.y_range_m[0], sm.y_range_m[1] + 1e-9, sm.step_m)
    el = global_positions(geom, xc)
    nr = element_normals(geom)
    pat = cfg.patterns().cems
    u_tx = leg_vectors(el, nr, arr.positions(xt)[None], arr.spacing_m, arr.boresight_azimuth_rad,
                       lam, pat, centroid=xc)[0] * tx_gain
    weighted = u_tx * np.exp(1j * np.asarray(getattr(profile, "phases_rad", profile)))
    grid = np.full((len(ys), len(xs)), np.nan)
    skipped = 0
    for iy, y in enumerate(ys):
        pts = []
        cols = []
        for ix, x in enumerate(xs):
            p = np.array([x, y, xt[2]])
            if min(np.linalg.norm(p - xt), np.linalg.norm(p - xc)) < 0.5 * sm.step_m:
                skipped += 1
                continue
            pts.append(arr.positions(p))
            cols.append(ix)
        if not pts:
            continue
        U = leg_vectors(el, nr, np.stack(pts), arr.spacing_m, arr.boresight_azimuth_rad, lam, pat, centroid=xc)
        amp = U @ weighted
        with np.errstate(divide="ignore"):
            grid[iy, cols] = 10.0 * np.log10(cfg.global_.transmit_snr_linear * np.abs(amp) ** 2)
    if skipped:
        log.info("snr map skipped %d cells at the Tx/CEMS positions", skipped)
    return xs, ys, grid


def run_snr_map(cfg: ExperimentConfig, trace: bool = False) -> ResultSet:
    xs, ys, grid = snr_map(cfg)
    rows = [(float(x), float(y), float(grid[iy, ix])) for iy, y in enumerate(ys) for ix, x in enumerate(xs)
            if not np.isnan(grid[iy, ix])]
    path = write_csv(os.path.join(cfg.experiment.output_dir, "snr_map.csv"), cfg, ["x_m", "y_m", "snr_db"], rows)
    return ResultSet("snr_map", cfg.hash(), [path], {"peak_snr_db": float(np.nanmax(grid))})


def ecdf_report(samples, label: str = ""):
    """Sorted ``(value, k/n)`` pairs; ``F(x)`` is right-continuous (counts ``<= x``)."""
    x = np.sort(np.asarray(samples, dtype=float))
    if x.size == 0:
        raise ValueError(f"empty sample set for ECDF {label!r}")
    n = x.size
    vals = np.unique(x)
    counts = np.searchsorted(x, vals, side="right")
    return [(float(v), c / n) for v, c in zip(vals, counts)]


def ecdf_value(samples, x: float) -> float:
    s = np.asarray(samples, dtype=float)
    return float(np.count_nonzero(s <= x)) / s.size


def multilane_design(cfg: ExperimentConfig):
    """Optimized modular door profile from Monte Carlo (Tx, Rx, relay) placements."""
    lam = cfg.global_.wavelength_m
    ml = cfg.multilane
    rng = stream(cfg, "multilane/design")
    placements = []
    for _ in range(ml.design_scenes):
        sc = sample_multilane(cfg.traffic, rng)
        placements.extend(sc.placement(r) for r in sc.relay_candidates)
    if not placements:
        raise RuntimeError("design scenes produced no relay placements")
    if len(placements) > ml.design_samples:
        keep = np.sort(rng.choice(len(placements), ml.design_samples, replace=False))
        placements = [placements[i] for i in keep]
    w = 1.0 / len(placements)
    placements = [Placement(p.x_tx_m, p.x_rx_m, p.x_cems_m, w, p.cems_yaw_rad) for p in placements]
    arr = cfg.arrays.build(lam)
    dist = build_distribution(placements, cfg.geometry.build(lam), arr, arr, lam, cfg.patterns())
    prof, res, cb = design_modular(cfg, dist, cfg.geometry.module_count, "se", tag="multilane")
    return prof, res, cb, dist


def scene_mode_snrs(scene: TrafficScene, ctx: LinkContext, profiles: dict, policy: str, rng,
                    modes=LINK_MODES) -> dict:
    """SNR (dB) of each link mode for one scene; relayed modes use the selected relay."""
    out = {}
    if "direct" in modes:
        out["direct"] = direct_snr_db(scene, scene.tx_index, scene.rx_index, ctx)
    relay_modes = [m for m in modes if m != "direct"]
    if not relay_modes:
        return out
    cands = scene.relay_candidates
    if not cands:
        out.update({m: -math.inf for m in relay_modes})
        return out
    lam = ctx.wavelength_m
    snr = {m: {} for m in relay_modes}
    zeta = ctx.cfg.transmit_snr_linear
    for r in cands:
        c = relay_cascade(scene, r, ctx)
        for m in relay_modes:
            if m == "cris":
                ph = anomalous_phase(ctx.geom, design_angles(scene.placement(r)), lam).phases_rad
            else:
                ph = profiles[m].phases_rad
            a = abs(c @ np.exp(1j * ph)) ** 2 * zeta
            snr[m][r] = 10.0 * math.log10(a) if a > 0 else -math.inf
    pick = cands[int(rng.integers(len(cands)))] if policy == "random" else None
    for m in relay_modes:
        r = pick if pick is not None else max(cands, key=lambda k: snr[m][k])
        out[m] = snr[m][r]
    return out


def _scene_selected(scene: TrafficScene, condition: str) -> bool:
    """ECDF population: every scene, scenes with a relay, or relay-dependent scenes."""
    if condition == "none":
        return True
    if condition == "relay_available":
        return bool(scene.relay_candidates)
    return bool(scene.relay_candidates) and scene.blocked_direct


def run_multilane_ecdf(cfg: ExperimentConfig, trace: bool = False) -> ResultSet:
    out = cfg.experiment.output_dir
    ml = cfg.multilane
    lam = cfg.global_.wavelength_m
    ctx = link_context(cfg)
    profiles = {"bare": bare_profile(ctx.geom), "specular": specular_profile(ctx.geom, ml.specular_theta_deg, lam)}
    artifacts = []
    if "optimized" in ml.modes:
        prof, res, cb, _ = multilane_design(cfg)
        profiles["optimized"] = prof
        artifacts.append(_atomic_via(os.path.join(out, "assignment.csv"), write_assignment_csv,
                                     res.assignment, cb, csv_header(cfg)))
    rng = stream(cfg, "multilane/eval")
    sel_rng = stream(cfg, "multilane/select")
    rows, per_mode = [], {m: [] for m in ml.modes}
    for s in range(ml.scenes):
        sc = sample_multilane(cfg.traffic, rng)
        res_s = scene_mode_snrs(sc, ctx, profiles, ml.policy, sel_rng, ml.modes)
        rows.append((s, int(sc.blocked_direct), len(sc.relay_candidates)) + tuple(res_s[m] for m in ml.modes))
        if _scene_selected(sc, ml.condition):
            for m in ml.modes:
                per_mode[m].append(res_s[m])
    artifacts.append(write_csv(os.path.join(out, "multilane_snr.csv"), cfg,
                               ["scene", "direct_blocked", "candidates"] + [f"snr_db_{m}" for m in ml.modes], rows))
    used = len(per_mode[ml.modes[0]])
    if used == 0:
        raise RuntimeError(f"no scene met the '{ml.condition}' condition; ECDFs are undefined")
    ecdf_rows = [(m, v, F) for m in ml.modes for v, F in ecdf_report(per_mode[m], m)]
    artifacts.append(write_csv(os.path.join(out, "ecdf.csv"), cfg, ["mode", "snr_db", "ecdf"], ecdf_rows,
                               extra_header=f"policy={ml.policy}; condition={ml.condition}; scenes_used={used}"))
    medians = {m: float(np.median(per_mode[m])) for m in ml.modes}
    return ResultSet("multilane_ecdf", cfg.hash(), artifacts,
                     {"median_snr_db": medians, "samples": per_mode, "scenes_used": used})


def run_connectivity(cfg: ExperimentConfig, trace: bool = False) -> ResultSet:
    """Normalized algebraic connectivity vs penetration with common random scenes."""
    cs = cfg.connectivity
    lam = cfg.global_.wavelength_m
    ctx = link_context(cfg)
    if cs.profile == "optimized":
        profile = multilane_design(cfg)[0]
    elif cs.profile == "specular":
        profile = specular_profile(ctx.geom, cfg.multilane.specular_theta_deg, lam)
    else:
        profile = bare_profile(ctx.geom)
    rng = stream(cfg, "connectivity")
    values = {(p, m): [] for p in cs.penetrations for m in cs.modes}
    full = max(cs.penetrations)
    for _ in range(cs.scenes):
        sc = sample_multilane(cfg.traffic, rng)
        direct = direct_pair_snr_db(sc, ctx)
        relays = np.flatnonzero(sc.equip_draws < full)
        terms = relay_pair_snr_db(sc, ctx, profile, relays)
        for p in cs.penetrations:
            allowed = sc.equip_draws < p
            for m in cs.modes:
                pair = combine_pair_snr(sc.vehicle_count, None if m == "relay" else direct, terms, allowed)
                values[(p, m)].append(connectivity(sc, cs.snr_threshold_db, mode=m, pair_snr_db=pair)
                                      .normalized_connectivity)
    rows = []
    for m in cs.modes:
        for p in cs.penetrations:
            v = np.asarray(values[(p, m)])
            rows.append((p, m, float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0))
    path = write_csv(os.path.join(cfg.experiment.output_dir, "connectivity.csv"), cfg,
                     ["penetration", "mode", "mean_lambda2_over_n", "stderr"], rows)
    return ResultSet("connectivity", cfg.hash(), [path],
                     {"mean": {(r[0], r[1]): r[2] for r in rows}, "stderr": {(r[0], r[1]): r[3] for r in rows}})


def run_design_unstructured(cfg: ExperimentConfig, trace: bool = False) -> ResultSet:
    out = cfg.experiment.output_dir
    lam = cfg.global_.wavelength_m
    dist = two_lane_distribution(cfg)
    asc = AscentConfig(**{**cfg.optimizer.ascent.__dict__, "seed": int(stream(cfg, "ascent").integers(2 ** 63))})
    trace_rows = []
    if cfg.optimizer.method == "elliptope":
        res = elliptope_penalty_ascent(dist, cfg.global_, asc)
        prof = res.profile
        trace_rows = [(i, o, g) for i, (o, g) in enumerate(zip(res.objective_history, res.rank_gap_history))]
        flag = int(res.rank_gap_closed)
    else:
        res = coordinate_ascent(cfg.optimizer.objective if cfg.optimizer.objective != "coverage"
                                else "coverage_smoothed", dist, cfg.global_, asc)
        prof = res.profile
        hist = [v for stage in res.history for v in stage]
        trace_rows = [(i, v, float("nan")) for i, v in enumerate(hist)]
        flag = int(res.converged)
    geom = cfg.geometry.build(lam)
    artifacts = [_atomic_via(os.path.join(out, "profile.csv"), write_profile_csv, prof, geom, csv_header(cfg))]
    se, cov = average_se(prof, dist, cfg.global_), average_coverage(prof, dist, cfg.global_)
    artifacts.append(write_csv(os.path.join(out, "summary.csv"), cfg, ["metric", "value"],
                               [("avg_se", se), ("avg_coverage", cov), ("converged_or_rank1", flag)]))
    if trace:
        artifacts.append(write_csv(os.path.join(out, "trace.csv"), cfg, ["iteration", "objective", "rank_gap"],
                                   trace_rows))
    return ResultSet("design_unstructured", cfg.hash(), artifacts, {"avg_se": se, "avg_coverage": cov})


def run_design_structured(cfg: ExperimentConfig, trace: bool = False) -> ResultSet:
    out = cfg.experiment.output_dir
    lam = cfg.global_.wavelength_m
    dist = two_lane_distribution(cfg)
    P = cfg.geometry.module_count
    prof, res, cb = design_modular(cfg, dist, P, cfg.optimizer.objective, tag="design")
    geom = cfg.geometry.build(lam, P)
    artifacts = [_atomic_via(os.path.join(out, "assignment.csv"), write_assignment_csv, res.assignment, cb,
                             csv_header(cfg)),
                 _atomic_via(os.path.join(out, "profile.csv"), write_profile_csv, prof, geom, csv_header(cfg))]
    if trace:
        artifacts.append(_atomic_via(os.path.join(out, "ga_trace.csv"), write_ga_trace_csv, res.trace,
                                     csv_header(cfg)))
    se, cov = average_se(prof, dist, cfg.global_), average_coverage(prof, dist, cfg.global_)
    artifacts.append(write_csv(os.path.join(out, "summary.csv"), cfg, ["metric", "value"],
                               [("avg_se", se), ("avg_coverage", cov), ("fitness", res.fitness)]))
    return ResultSet("design_structured", cfg.hash(), artifacts, {"avg_se": se, "avg_coverage": cov})


RUNNERS = {"se_vs_p": run_se_vs_p, "codebook_sweep": run_codebook_sweep, "snr_map": run_snr_map,
           "multilane_ecdf": run_multilane_ecdf, "connectivity": run_connectivity,
           "design_unstructured": run_design_unstructured, "design_structured": run_design_structured}


def run_experiment(cfg: ExperimentConfig, trace: bool = False) -> ResultSet:
    """Run the pipeline named by ``experiment.kind``.

    An interrupt leaves a ``INCOMPLETE`` marker file in the output directory.
    """
    marker = os.path.join(cfg.experiment.output_dir, "INCOMPLETE")
    try:
        return RUNNERS[cfg.experiment.kind](cfg, trace)
    except KeyboardInterrupt:
        _atomic_write(marker, f"{csv_header(cfg)}\ninterrupted\n")
        raise
