"""
Experiment Service
Config-driven runs behind the CLI and the HTTP router: holonomy
distributions, m-refinement, connection-family convergence, the circle jump
demo, the subgroup criterion, the Bohr-Sommerfeld detector and the Stokes
check.

Sampling fans out over fixed-size chunks; chunk i at partition size m always
draws from substream(seed, STREAM_SAMPLES, m, i), so merged results do not
depend on the worker count.
"""

import logging
import math
import os
import time
from multiprocessing import Pool
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from api.models import ExperimentConfig, ExperimentReport, SubgroupDescriptor
from api.utils import config_hash, version_string, write_outputs
from services.bridge_service import (
    LIFT_TOLERANCE, GeodesicLoopBatch, LoopBatch, RejectionCounter, build_loops, sample_admissible,
    winding_distribution,
)
from services.connection_service import MetricConnection, TrivialConnection, build_family, flat_angles
from services.geometry_service import FlatTorus, base_point_for, build_manifold
from services.measure_service import (
    HolonomyMeasure, MeasureMeta, analytic_flat_u1, arc_distance, arc_mass, bl_distance, bootstrap_floor,
    delta_identity, empirical_measure, kish_ess, support_estimate, two_sample_test,
)
from services.transport_service import (
    ORTHOGONALITY_TOLERANCE, STEP_LENGTH, HolonomyBatch, holonomy, holonomy_u1_exact, stokes_check,
    transport_ito_euler,
)
from utils.errors import ChartUndefined, ConfigError, SubgroupDescriptorError, UnsupportedTransport
from utils.rng import STREAM_BOOTSTRAP, STREAM_ITO, STREAM_SAMPLES, chunk_sizes, substream

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 2048
STOKES_TOLERANCE = 1e-6
TRIVIAL_TOLERANCE = 1e-9
LOW_ESS_FRACTION = 0.01
WINDING_TABLE_MASS = 1e-6
C0_GRID_RESOLUTION = 16


class Settings(BaseModel):
    """Process-level defaults; configs and CLI flags override them."""
    out_dir: str = "out"
    workers: int = 1
    log_level: str = "INFO"
    hk_tolerance: float = 1e-12
    chunk_size: int = DEFAULT_CHUNK_SIZE


def load_settings() -> Settings:
    try:
        return Settings(
            out_dir=os.getenv("HOLONOMY_OUT_DIR", "out"),
            workers=int(os.getenv("HOLONOMY_WORKERS", "1")),
            log_level=os.getenv("HOLONOMY_LOG_LEVEL", "INFO").upper(),
            hk_tolerance=float(os.getenv("HOLONOMY_HK_TOLERANCE", "1e-12")),
            chunk_size=int(os.getenv("HOLONOMY_CHUNK_SIZE", str(DEFAULT_CHUNK_SIZE))),
        )
    except ValueError as e:
        raise ConfigError(f"Invalid HOLONOMY_* environment setting: {e}")


def resolve_config(cfg: ExperimentConfig, settings: Optional[Settings] = None, seed: Optional[int] = None,
                   workers: Optional[int] = None, out_dir: Optional[str] = None) -> ExperimentConfig:
    """Apply overrides and environment defaults; the seed is never defaulted."""
    settings = settings or load_settings()
    update: Dict[str, Any] = {}
    if seed is not None:
        update["seed"] = int(seed)
    if workers is not None:
        update["workers"] = int(workers)
    if out_dir is not None:
        update["out_dir"] = out_dir
    resolved = cfg.model_copy(update=update)
    if resolved.seed is None:
        raise ConfigError("a seed is required: set `seed` in the config or pass --seed")
    fill: Dict[str, Any] = {}
    if resolved.workers is None:
        fill["workers"] = settings.workers
    if resolved.chunk_size is None:
        fill["chunk_size"] = settings.chunk_size
    if resolved.hk_tolerance is None:
        fill["hk_tolerance"] = settings.hk_tolerance
    if resolved.out_dir is None:
        fill["out_dir"] = settings.out_dir
    resolved = resolved.model_copy(update=fill)
    if resolved.workers < 1:
        raise ConfigError(f"workers must be at least 1, got {resolved.workers}")
    if resolved.chunk_size < 1:
        raise ConfigError(f"chunk_size must be at least 1, got {resolved.chunk_size}")
    return resolved


class RunContext:
    """Manifold, base point and connection family built from one config."""

    def __init__(self, cfg: ExperimentConfig):
        if cfg.seed is None:
            raise ConfigError("a seed is required: set `seed` in the config or pass --seed")
        self.cfg = cfg
        self.manifold = build_manifold(cfg.manifold, cfg.hk_tolerance)
        self.base = base_point_for(self.manifold, cfg.base_point)
        self.family = build_family(cfg.connection, self.manifold)

    @property
    def is_family(self) -> bool:
        return self.cfg.connection.type == "family"

    def connection(self) -> MetricConnection:
        if self.is_family:
            raise ConfigError("this subcommand takes a single connection; use `family`, `jump`, "
                              "`subgroup` or `bs-detect` for families")
        return self.family.base

    def flat_periods(self) -> Optional[List[float]]:
        """Periods of a single flat U(1) connection (None when there is no closed form)."""
        if self.is_family or not self.family.is_flat_u1:
            return None
        return self.family.periods_at(0.0)


class ExperimentOutcome:
    """Report plus the artifacts it refers to: measures (JSON) and tables (CSV)."""

    def __init__(self, report: ExperimentReport, measures: Optional[Dict[str, HolonomyMeasure]] = None,
                 tables: Optional[Dict[str, Tuple[List[str], List[List[Any]]]]] = None):
        self.report = report
        self.measures = measures or {}
        self.tables = tables or {}

    @property
    def exit_code(self) -> int:
        return 2 if self.report.verdict == "FAIL" else 0


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def transport_batch(connection: MetricConnection, batch: LoopBatch, loops: GeodesicLoopBatch,
                    cfg: ExperimentConfig, rng: np.random.Generator) -> HolonomyBatch:
    if cfg.transport == "exact-u1":
        return holonomy_u1_exact(connection, loops)
    if cfg.transport == "ito":
        return transport_ito_euler(connection, batch, cfg.ito_substeps, rng, cfg.ito_correction)
    return holonomy(connection, loops, cfg.steps_per_segment)


def _sample_chunk(task: Dict[str, Any]) -> Dict[str, Any]:
    """Pool worker: one chunk of loops, transported under every requested family member."""
    cfg = ExperimentConfig(**task["config"])
    ctx = RunContext(cfg)
    m, chunk = task["m"], task["chunk"]
    rng = substream(cfg.seed, STREAM_SAMPLES, m, chunk)
    counter = RejectionCounter()
    batch = sample_admissible(ctx.manifold, ctx.base, m, rng, task["size"], task["sampler"],
                              cfg.attempt_factor, counter, task["winding"])
    loops = build_loops(batch)
    matrices, flags = [], []
    for t in task["members"]:
        # the Ito refinement is drawn afresh per member from the same substream
        hol = transport_batch(ctx.family.member(t), batch, loops, cfg, substream(cfg.seed, STREAM_ITO, m, chunk))
        matrices.append(hol.matrices)
        flags.append(hol.is_u1)
    return {
        "matrices": matrices,
        "is_u1": flags,
        "weights": loops.weights,
        "windings": loops.windings,
        "counter": counter.model_dump(),
        "vertices": batch.vertices if task["dump"] else None,
    }


class SampleRun:
    """One common loop ensemble at partition size m and its holonomies under each member."""

    def __init__(self, cfg: ExperimentConfig, m: int, members: List[float], batches: List[HolonomyBatch],
                 counter: RejectionCounter, vertices: Optional[np.ndarray] = None):
        self.cfg = cfg
        self.m = m
        self.members = members
        self.batches = batches
        self.counter = counter
        self.vertices = vertices

    @property
    def windings(self) -> Optional[np.ndarray]:
        return self.batches[0].windings

    @property
    def weights(self) -> np.ndarray:
        return self.batches[0].weights

    def measure(self, k: int = 0) -> HolonomyMeasure:
        batch = self.batches[k]
        ess = None
        weight_deficit = None
        if self.cfg.sampler == "is":
            ess = kish_ess(batch.weights)
            weight_deficit = self.counter.weight_deficit
            if ess < LOW_ESS_FRACTION * batch.size:
                logger.warning(f"Importance sampling ESS {ess:.1f} is below {LOW_ESS_FRACTION:.0%} of N={batch.size}")
        meta = MeasureMeta(m=self.m, samples=batch.size, seed=self.cfg.seed, deficit=self.counter.rejection_rate,
                           weight_deficit=weight_deficit, ess=ess, sampler=self.cfg.sampler,
                           transport=self.cfg.transport)
        return empirical_measure(batch, meta)

    def diagnostics(self) -> Dict[str, Any]:
        c = self.counter
        out: Dict[str, Any] = {
            "m": self.m,
            "attempted": c.attempted,
            "accepted": c.accepted,
            "rejected": c.rejected,
            "rejection_rate": c.rejection_rate,
            "orthogonality_defect": max(b.orthogonality_defect() for b in self.batches),
        }
        if self.cfg.sampler == "is":
            out["weight_deficit"] = c.weight_deficit
            out["ess"] = kish_ess(self.weights)
        return out


def sample_holonomies(cfg: ExperimentConfig, m: int, members: Sequence[float] = (0.0,),
                      winding: Optional[List[int]] = None, samples: Optional[int] = None,
                      dump: bool = False, sampler: Optional[str] = None) -> SampleRun:
    """
    Draw `samples` admissible loops at partition size m and transport the same
    loops under family.member(t) for every t in `members`.
    """
    total = samples or cfg.samples
    sizes = chunk_sizes(total, cfg.chunk_size or DEFAULT_CHUNK_SIZE)
    payload = cfg.model_dump()
    tasks = [
        {"config": payload, "m": m, "chunk": i, "size": n, "members": [float(t) for t in members],
         "winding": winding, "dump": dump, "sampler": sampler or cfg.sampler}
        for i, n in enumerate(sizes)
    ]
    workers = max(1, min(cfg.workers or 1, len(tasks)))
    logger.info(f"Sampling {total} loops at m={m} in {len(tasks)} chunks on {workers} worker(s)")
    if workers > 1:
        with Pool(processes=workers) as pool:
            parts = pool.map(_sample_chunk, tasks)
    else:
        parts = [_sample_chunk(task) for task in tasks]

    counter = RejectionCounter()
    for part in parts:
        counter.merge(RejectionCounter(**part["counter"]))
    weights = np.concatenate([p["weights"] for p in parts])
    windings = None
    if all(p["windings"] is not None for p in parts):
        windings = np.concatenate([p["windings"] for p in parts])
    batches = [
        HolonomyBatch(np.concatenate([p["matrices"][k] for p in parts]), weights, windings, parts[0]["is_u1"][k])
        for k in range(len(members))
    ]
    vertices = np.concatenate([p["vertices"] for p in parts]) if dump else None
    logger.info(f"m={m}: {total} admissible of {counter.attempted} raw loops "
                f"(rejection rate {counter.rejection_rate:.3g})")
    return SampleRun(cfg, m, [float(t) for t in members], batches, counter, vertices)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def new_report(subcommand: str, cfg: ExperimentConfig) -> ExperimentReport:
    return ExperimentReport(
        subcommand=subcommand,
        seed=cfg.seed,
        config_hash=config_hash(cfg),
        version=version_string(),
        tolerances={
            "hk_tolerance": float(cfg.hk_tolerance if cfg.hk_tolerance is not None else 1e-12),
            "tail": cfg.tail,
            "orthogonality": ORTHOGONALITY_TOLERANCE,
            "lift": LIFT_TOLERANCE,
            "step_length": STEP_LENGTH,
            "merge_tol": cfg.merge_tol,
            "threshold": cfg.threshold,
            "relative_floor": cfg.relative_floor,
        },
    )


def trend_verdict(distances: Sequence[float], sigmas: Sequence[float],
                  relative_floor: float) -> Tuple[bool, List[str]]:
    """
    PASS iff no step rises by more than 3 sqrt(sigma_k^2 + sigma_{k+1}^2) and the
    terminal distance is below max(3 sigma_terminal, relative_floor * first distance).
    """
    reasons: List[str] = []
    d = [float(x) for x in distances]
    s = [float(x) for x in sigmas]
    for k in range(len(d) - 1):
        band = 3.0 * math.hypot(s[k], s[k + 1])
        if d[k + 1] > d[k] + band:
            reasons.append(f"distance rises from {d[k]:.4g} to {d[k + 1]:.4g} beyond the 3 sigma band {band:.3g}")
    if d:
        floor = max(3.0 * s[-1], relative_floor * d[0])
        if d[-1] > floor:
            reasons.append(f"terminal distance {d[-1]:.4g} is above the floor {floor:.3g}")
    return not reasons, reasons


def max_atom_offset(angles: np.ndarray, reference: np.ndarray) -> float:
    """Largest arc distance from an angle (turns) to the nearest reference angle."""
    if angles.size == 0:
        return 0.0
    ref = np.sort(np.asarray(reference, dtype=float))
    idx = np.searchsorted(ref, angles)
    lo = ref[(idx - 1) % ref.size]
    hi = ref[idx % ref.size]
    return float(np.max(np.minimum(arc_distance(angles, lo), arc_distance(angles, hi))))


def winding_table(manifold: FlatTorus, run: SampleRun, tail: float) -> Tuple[List[str], List[List[Any]], bool]:
    """
    Empirical vs analytic homotopy-class frequencies with 3 sigma multinomial
    bands; the flag covers every class with all |nu_j| <= 3.
    """
    nus, masses = winding_distribution(manifold, tail)
    windings = run.windings
    w = run.weights / np.sum(run.weights)
    n = windings.shape[0]
    observed: Dict[Tuple[int, ...], float] = {}
    counts: Dict[Tuple[int, ...], int] = {}
    for nu, weight in zip(map(tuple, windings.tolist()), w):
        observed[nu] = observed.get(nu, 0.0) + float(weight)
        counts[nu] = counts.get(nu, 0) + 1
    header = [f"nu_{j}" for j in range(manifold.dim)] + ["count", "frequency", "analytic", "sigma", "z"]
    rows: List[List[Any]] = []
    within = True
    # by |nu|^2, then lexicographically
    order = np.lexsort(tuple(nus.T[::-1]) + (np.sum(nus ** 2, axis=1),))
    for i in order:
        if masses[i] < WINDING_TABLE_MASS:
            continue
        key = tuple(int(k) for k in nus[i])
        freq = observed.get(key, 0.0)
        sigma = math.sqrt(masses[i] * (1.0 - masses[i]) / n)
        z = (freq - masses[i]) / sigma if sigma > 0 else 0.0
        if max(abs(k) for k in key) <= 3 and abs(z) > 3.0:
            within = False
        rows.append(list(key) + [counts.get(key, 0), freq, float(masses[i]), sigma, z])
    return header, rows, within


def histogram_table(mu: HolonomyMeasure, bins: int) -> Tuple[List[str], List[List[Any]]]:
    hist = mu.histogram(bins)
    rows = [[hist.edges[i], hist.edges[i + 1], hist.masses[i]] for i in range(hist.bins)]
    return ["bin_lo", "bin_hi", "mass"], rows


def dump_tables(run: SampleRun, dim: int) -> Dict[str, Tuple[List[str], List[List[Any]]]]:
    """loops.csv and holonomy.csv for the first member of a run."""
    tables: Dict[str, Tuple[List[str], List[List[Any]]]] = {}
    windings = run.windings
    nu_cols = [f"nu_{j}" for j in range(windings.shape[1])] if windings is not None else []
    if run.vertices is not None:
        n_vertices = run.vertices.shape[1]
        header = ["seed_index", "weight"] + nu_cols + [f"x{i}_{j}" for i in range(1, n_vertices + 1) for j in range(dim)]
        rows = []
        for i in range(run.vertices.shape[0]):
            nu = windings[i].tolist() if windings is not None else []
            rows.append([i, float(run.weights[i])] + nu + run.vertices[i].reshape(-1).tolist())
        tables["loops"] = (header, rows)
    batch = run.batches[0]
    if batch.is_u1:
        values = batch.angles()[:, None]
        value_cols = ["angle"]
    else:
        r = batch.rank
        values = batch.matrices.reshape(batch.size, r * r)
        value_cols = [f"q_{i}{j}" for i in range(r) for j in range(r)]
    rows = []
    for i in range(batch.size):
        nu = windings[i].tolist() if windings is not None else []
        rows.append([i, float(batch.weights[i])] + nu + values[i].tolist())
    tables["holonomy"] = (["loop_index", "weight"] + nu_cols + value_cols, rows)
    return tables


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def run_distribution(cfg: ExperimentConfig) -> ExperimentOutcome:
    """mu_x^m(nabla) at one partition size, compared against the best available reference."""
    ctx = RunContext(cfg)
    connection = ctx.connection()
    run = sample_holonomies(cfg, cfg.m, dump=cfg.dump_samples)
    mu = run.measure(0)
    report = new_report("dist", cfg)
    report.diagnostics.update(run.diagnostics())
    measures: Dict[str, HolonomyMeasure] = {"measure": mu}
    tables: Dict[str, Tuple[List[str], List[List[Any]]]] = {}
    rng = substream(cfg.seed, STREAM_BOOTSTRAP, cfg.m, 0)

    if isinstance(ctx.manifold, FlatTorus) and run.windings is not None:
        header, rows, within = winding_table(ctx.manifold, run, cfg.tail)
        tables["windings"] = (header, rows)
        report.diagnostics["windings_within_3sigma"] = within
    if mu.is_u1:
        tables["histogram"] = histogram_table(mu, cfg.bins)

    periods = ctx.flat_periods()
    if cfg.compare_seed is not None:
        other_cfg = cfg.model_copy(update={"seed": cfg.compare_seed})
        other = sample_holonomies(other_cfg, cfg.m).measure(0)
        result = two_sample_test(mu, other, rng, cfg.bootstrap)
        measures["measure_compare"] = other
        report.verdict = "FAIL" if result.reject else "PASS"
        report.diagnostics["two_sample"] = result.model_dump()
        report.summary = (f"Two-seed comparison (seeds {cfg.seed}, {cfg.compare_seed}): distance {result.distance:.4g}, "
                          f"p={result.p_value:.3g} at level {result.level}")
    elif periods is not None:
        reference = analytic_flat_u1(ctx.manifold, periods, cfg.tail)
        distance = bl_distance(mu, reference)
        sigma = bootstrap_floor(mu, rng, cfg.bootstrap)
        offset = max_atom_offset(mu.angles, reference.angles)
        measures["analytic"] = reference
        report.verdict = "PASS" if distance <= 3.0 * sigma else "FAIL"
        report.rows.append({"m": cfg.m, "distance": distance, "sigma": sigma, "max_atom_offset": offset})
        report.summary = f"Flat U(1) periods {periods}: W1 distance {distance:.4g} vs 3 sigma {3.0 * sigma:.4g}"
    elif isinstance(connection, TrivialConnection):
        reference = delta_identity(connection.rank, mu.is_u1)
        distance = bl_distance(mu, reference)
        report.verdict = "PASS" if distance <= TRIVIAL_TOLERANCE else "FAIL"
        report.rows.append({"m": cfg.m, "distance": distance, "sigma": 0.0})
        report.summary = f"Trivial connection: distance to the identity atom {distance:.3g}"
    else:
        report.summary = (f"{connection.describe()}: no closed-form reference; "
                          f"set compare_seed for a two-seed consistency test")

    if cfg.transport == "ito":
        ode_cfg = cfg.model_copy(update={"transport": "ode"})
        ode_mu = sample_holonomies(ode_cfg, cfg.m).measure(0)
        gap = bl_distance(mu, ode_mu)
        sigma = bootstrap_floor(mu, rng, cfg.bootstrap)
        report.diagnostics["ito_vs_ode_distance"] = gap
        if gap > 3.0 * sigma:
            logger.warning(f"Ito ({cfg.ito_correction}) and ODE transport disagree on common loops: "
                           f"distance {gap:.4g} > 3 sigma {3.0 * sigma:.3g}")

    if cfg.dump_samples:
        tables.update(dump_tables(run, ctx.manifold.embed_dim))
    return ExperimentOutcome(report, measures, tables)


def run_refinement(cfg: ExperimentConfig) -> ExperimentOutcome:
    """Distances to the reference measure along the m schedule."""
    ctx = RunContext(cfg)
    connection = ctx.connection()
    schedule = cfg.m_schedule or [cfg.m]
    periods = ctx.flat_periods()
    mode = cfg.reference
    if mode == "auto":
        mode = "analytic" if periods is not None or isinstance(connection, TrivialConnection) else "finest"
    report = new_report("refine", cfg)
    measures: Dict[str, HolonomyMeasure] = {}

    reference: Optional[HolonomyMeasure] = None
    sigma_ref = 0.0
    compared = list(schedule)
    if mode == "analytic":
        if periods is not None:
            reference = analytic_flat_u1(ctx.manifold, periods, cfg.tail)
        elif isinstance(connection, TrivialConnection):
            reference = delta_identity(connection.rank, connection.is_u1)
        else:
            raise ConfigError(f"no analytic measure for {connection.describe()}; use reference 'finest'")
        measures["reference"] = reference
    else:
        if len(schedule) < 2:
            raise ConfigError("the finest-m reference needs at least two m values in m_schedule")
        finest = schedule[-1]
        ref_run = sample_holonomies(cfg, finest)
        reference = ref_run.measure(0)
        sigma_ref = bootstrap_floor(reference, substream(cfg.seed, STREAM_BOOTSTRAP, finest, 0), cfg.bootstrap)
        measures[f"measure_m{finest}"] = reference
        report.diagnostics["reference_m"] = finest
        compared = schedule[:-1]

    distances, sigmas, runs = [], [], []
    for m in compared:
        run = sample_holonomies(cfg, m)
        mu = run.measure(0)
        measures[f"measure_m{m}"] = mu
        distance = bl_distance(mu, reference)
        sigma = math.hypot(bootstrap_floor(mu, substream(cfg.seed, STREAM_BOOTSTRAP, m, 0), cfg.bootstrap), sigma_ref)
        distances.append(distance)
        sigmas.append(sigma)
        runs.append(run.diagnostics())
        report.rows.append({
            "m": m, "distance": distance, "sigma": sigma, "rejection": run.counter.rejection_rate,
            "weight_deficit": run.counter.weight_deficit if cfg.sampler == "is" else None,
            "ess": kish_ess(run.weights) if cfg.sampler == "is" else None,
        })
        logger.info(f"refine m={m}: distance {distance:.4g} (sigma {sigma:.3g})")

    ok, reasons = trend_verdict(distances, sigmas, cfg.relative_floor)
    report.verdict = "PASS" if ok else "FAIL"
    report.diagnostics["reference"] = mode
    report.diagnostics["runs"] = runs
    report.diagnostics["reasons"] = reasons
    report.summary = (f"{connection.describe()}: {len(compared)} partition sizes against the {mode} reference; "
                      + ("trend within the 3 sigma band" if ok else "; ".join(reasons)))
    table = [[row["m"], row["distance"], row["sigma"], row["rejection"]] for row in report.rows]
    return ExperimentOutcome(report, measures, {"refine": (["m", "distance", "sigma", "rejection"], table)})


def _c0_distance(ctx: RunContext, t: float) -> Optional[float]:
    grid, _ = ctx.manifold.quadrature(C0_GRID_RESOLUTION)
    try:
        return ctx.family.c0_distance(t, grid)
    except ChartUndefined:
        return None


def run_family_convergence(cfg: ExperimentConfig) -> ExperimentOutcome:
    """
    Common random numbers: one loop ensemble transported under every member
    and under the limit; distances to the limit measure per t.
    """
    ctx = RunContext(cfg)
    if not ctx.is_family:
        raise ConfigError("family convergence needs a connection of type `family`")
    family = ctx.family
    schedule = family.schedule
    members = list(schedule) if schedule[-1] == 0.0 else list(schedule) + [0.0]
    run = sample_holonomies(cfg, cfg.m, members)
    limit_index = members.index(0.0)
    limit = run.measure(limit_index)
    sigma_limit = bootstrap_floor(limit, substream(cfg.seed, STREAM_BOOTSTRAP, cfg.m, limit_index), cfg.bootstrap)

    with_oracle = (family.is_flat_u1 and run.windings is not None
                   and all(p == 0.0 for p in family.periods_at(0.0)))
    if with_oracle:
        w = run.weights / np.sum(run.weights)

    report = new_report("family", cfg)
    report.diagnostics.update(run.diagnostics())
    measures: Dict[str, HolonomyMeasure] = {"measure_limit": limit}
    distances, sigmas, gaps = [], [], []
    for k, t in enumerate(schedule):
        mu = run.measure(k)
        distance = bl_distance(mu, limit)
        sigma = math.hypot(bootstrap_floor(mu, substream(cfg.seed, STREAM_BOOTSTRAP, cfg.m, k), cfg.bootstrap),
                           sigma_limit)
        row: Dict[str, Any] = {"t": t, "distance": distance, "sigma": sigma, "oracle": None,
                               "c0": _c0_distance(ctx, t)}
        if with_oracle:
            angles = flat_angles(family.periods_at(t), run.windings)
            row["oracle"] = float(np.sum(w * arc_distance(angles, 0.0)))
            gaps.append(abs(distance - row["oracle"]))
        distances.append(distance)
        sigmas.append(sigma)
        measures[f"measure_t{k}"] = mu
        report.rows.append(row)
        logger.info(f"family t={t:g}: distance {distance:.6g} (sigma {sigma:.3g})")

    ok, reasons = trend_verdict(distances, sigmas, cfg.relative_floor)
    positive = [d for d, t in zip(distances, schedule) if t > 0]
    report.verdict = "PASS" if ok else "FAIL"
    report.diagnostics["strictly_decreasing"] = all(b < a for a, b in zip(positive, positive[1:]))
    report.diagnostics["reasons"] = reasons
    if gaps:
        report.diagnostics["max_oracle_gap"] = max(gaps)
    report.summary = (f"{len(schedule)} family members on common loops; "
                      + ("distances decrease to the statistical floor" if ok else "; ".join(reasons)))
    header = ["t", "distance", "sigma", "oracle", "c0"]
    table = [[row[h] for h in header] for row in report.rows]
    return ExperimentOutcome(report, measures, {"family": (header, table)})


def tail_bound(nus: np.ndarray, masses: np.ndarray, eps: float, step: float) -> float:
    """
    sum of w_nu over |nu| > tau, tau = floor(eps / |step|): every class with
    |nu| <= tau has its angle within eps of 0.
    """
    if step == 0.0:
        return 0.0
    tau = math.floor(eps / abs(step))
    return float(np.sum(masses[np.max(np.abs(nus), axis=1) > tau]))


def distinct_angles(angles: np.ndarray, resolution: float) -> int:
    """Number of occupied cells when the circle is cut into cells of width `resolution` (turns)."""
    cells = max(1, int(round(1.0 / resolution)))
    return int(np.unique(np.mod(np.round(np.asarray(angles) * cells).astype(np.int64), cells)).size)


def hausdorff_gap(angles: np.ndarray) -> float:
    """Hausdorff distance (arc length) between a finite angle set and the whole circle."""
    a = np.unique(np.mod(np.asarray(angles, dtype=float), 1.0))
    gaps = np.diff(np.concatenate([a, a[:1] + 1.0]))
    return float(math.pi * np.max(gaps))


def generator_sweep(step: float, reach: float, resolution: float) -> np.ndarray:
    """
    Angles nu * step of the words whose rotation |nu * step| stays within
    `reach` turns. A step below half a cell is replaced by an even grid on
    [-reach, reach]; both cross the same cells.
    """
    step = abs(float(step))
    if step == 0.0:
        return np.zeros(1)
    if step < 0.5 * resolution:
        k = int(math.ceil(2.0 * reach / resolution))
        return np.linspace(-reach, reach, 2 * k + 1)
    n = int(math.floor(reach / step))
    return np.arange(-n, n + 1) * step


def sweep_densifies(counts: Sequence[int], capacity: int) -> bool:
    """Counts rise strictly along the schedule until they fill every cell of the reach window."""
    if len(counts) < 2:
        return False
    return all(b > a or a == b == capacity for a, b in zip(counts, counts[1:]))


def run_jump_demo(cfg: ExperimentConfig) -> ExperimentOutcome:
    """
    Two tracks over a flat circle family: arc mass of the measure (collapses to
    the identity atom) and the holonomy group generated by the member's period
    (jumps to a dense subgroup for every t > 0).

    The group track counts cells hit by the generator sweep within
    `group_reach` turns of the identity, which grows as the generator
    shrinks, next to the enumeration |nu| <= group_range, which already
    fills the circle at every t > 0.
    """
    ctx = RunContext(cfg)
    family = ctx.family
    if not (ctx.is_family and family.is_flat_u1 and ctx.manifold.kind == "circle"):
        raise ConfigError("the jump demo needs a family of flat_u1 connections on a circle")
    schedule = family.schedule
    theta = float(family.delta_periods[0])
    base_zero = all(p == 0.0 for p in family.periods_at(0.0))
    run = sample_holonomies(cfg, cfg.m, schedule)
    nus, masses = winding_distribution(ctx.manifold, cfg.tail)
    enumerated = np.arange(-cfg.group_range, cfg.group_range + 1)[:, None]

    report = new_report("jump", cfg)
    report.diagnostics.update(run.diagnostics())
    measures: Dict[str, HolonomyMeasure] = {}
    mass_rows, group_rows = [], []
    series: Dict[float, List[Tuple[float, float]]] = {eps: [] for eps in cfg.epsilons}
    bound_failures: List[str] = []
    for k, t in enumerate(schedule):
        mu = run.measure(k)
        measures[f"measure_t{k}"] = mu
        analytic = analytic_flat_u1(ctx.manifold, family.periods_at(t), cfg.tail)
        n_eff = kish_ess(mu.weights)
        for eps in cfg.epsilons:
            mass = arc_mass(mu, eps)
            sigma = math.sqrt(mass * (1.0 - mass) / n_eff) if n_eff > 0 else 0.0
            bound = tail_bound(nus, masses, eps, t * theta) if base_zero else None
            if bound is not None and mass > bound + 3.0 * sigma:
                bound_failures.append(f"t={t:g}, eps={eps}: arc mass {mass:.4g} above tail bound {bound:.3g}")
            series[eps].append((mass, sigma))
            mass_rows.append([t, mass, eps, arc_mass(analytic, eps), bound])
        periods = family.periods_at(t)
        angles = flat_angles(periods, enumerated)
        step = periods[0] - round(periods[0])
        sweep = generator_sweep(step, cfg.group_reach, cfg.resolution)
        group_rows.append([t, distinct_angles(sweep, cfg.resolution), distinct_angles(angles, cfg.resolution),
                           hausdorff_gap(angles)])

    reasons = list(bound_failures)
    for eps, values in series.items():
        for (a, sa), (b, sb) in zip(values, values[1:]):
            band = 3.0 * math.hypot(sa, sb)
            if b > a + band:
                reasons.append(f"eps={eps}: arc mass rises from {a:.4g} to {b:.4g}")
                break
    for (t, mass, eps, _, _) in mass_rows:
        if t == 0.0 and mass != 0.0:
            reasons.append(f"eps={eps}: arc mass {mass:.3g} at t=0")

    counts = [row[1] for row in group_rows]
    enumerated_counts = [row[2] for row in group_rows]
    positive = [row[1] for row in group_rows if row[0] > 0]
    dense = generator_sweep(0.25 * cfg.resolution, cfg.group_reach, cfg.resolution)
    capacity = distinct_angles(dense, cfg.resolution)
    densifies = sweep_densifies(positive, capacity)
    group_reasons = [] if densifies else [
        f"distinct angles within reach {cfg.group_reach:g} do not grow along the schedule: {positive}"]
    report.verdict = "PASS" if not (reasons or group_reasons) else "FAIL"
    report.diagnostics["reasons"] = reasons + group_reasons
    report.diagnostics["distinct_angle_counts"] = counts
    report.diagnostics["enumerated_angle_counts"] = enumerated_counts
    report.diagnostics["sweep_capacity"] = capacity
    report.diagnostics["group_densifies"] = densifies
    report.diagnostics["resolution"] = cfg.resolution
    report.rows = [{"t": r[0], "arc_mass": r[1], "eps": r[2], "analytic": r[3], "tail_bound": r[4]} for r in mass_rows]
    report.summary = (f"theta={theta:.17g}: arc mass "
                      + ("collapses toward the identity atom" if not reasons else "; ".join(reasons))
                      + f"; distinct angles within reach {cfg.group_reach:g} at resolution {cfg.resolution}: "
                        f"{counts} (densification claimed only up to this resolution; |nu| <= {cfg.group_range} "
                        f"gives {enumerated_counts})"
                      + "".join(f"; {r}" for r in group_reasons))
    tables = {
        "jump": (["t", "arc_mass", "eps", "analytic", "tail_bound"], mass_rows),
        "jump_group": (["t", "distinct_angles", "enumerated_angles", "hausdorff_gap"], group_rows),
    }
    return ExperimentOutcome(report, measures, tables)


def subgroup_distances(mu: HolonomyMeasure, subgroup: SubgroupDescriptor) -> np.ndarray:
    """Distance of every atom to H: arc length on U(1), Frobenius on O(r)."""
    if subgroup.kind == "trivial":
        if mu.is_u1:
            return arc_distance(mu.angles, 0.0)
        return np.linalg.norm(mu.matrices - np.eye(mu.rank), axis=(-2, -1))
    if subgroup.kind == "roots":
        if subgroup.order is None:
            raise SubgroupDescriptorError("the roots subgroup needs `order` q")
        if not mu.is_u1:
            raise SubgroupDescriptorError(f"roots of unity are subgroups of U(1); the measure lives on O({mu.rank})")
        q = subgroup.order
        return arc_distance(mu.angles, np.round(mu.angles * q) / q)
    if subgroup.kind == "so":
        if mu.is_u1:
            return np.zeros(mu.size)
        # a reflection sits at Frobenius distance 2 from SO(r)
        return np.where(np.linalg.det(mu.matrices) > 0, 0.0, 2.0)
    raise SubgroupDescriptorError(f"Unknown subgroup kind: {subgroup.kind}")


def run_subgroup_criterion(cfg: ExperimentConfig, subgroup: Optional[SubgroupDescriptor] = None) -> ExperimentOutcome:
    """
    Mass outside the merge_tol-neighbourhood of H for every m and member. A
    finite run can refute Hol in H but only supports containment.
    """
    subgroup = subgroup or cfg.subgroup
    if subgroup is None:
        raise SubgroupDescriptorError("the subgroup criterion needs a `subgroup` descriptor")
    if subgroup.kind == "roots" and subgroup.order is None:
        raise SubgroupDescriptorError("the roots subgroup needs `order` q")
    ctx = RunContext(cfg)
    schedule = cfg.m_schedule or [cfg.m]
    members = list(ctx.family.schedule) if ctx.is_family else [0.0]
    report = new_report("subgroup", cfg)
    measures: Dict[str, HolonomyMeasure] = {}
    table = []
    runs = []
    for m in schedule:
        run = sample_holonomies(cfg, m, members)
        runs.append(run.diagnostics())
        for k, t in enumerate(members):
            mu = run.measure(k)
            dist = subgroup_distances(mu, subgroup)
            outside = float(np.sum(mu.weights[dist > cfg.merge_tol]))
            clusters = support_estimate(mu, cfg.merge_tol)
            measures[f"measure_m{m}_t{k}"] = mu
            report.rows.append({"m": m, "t": t, "outside_mass": outside, "max_distance": float(np.max(dist)),
                                "clusters": len(clusters)})
            table.append([m, t, outside, float(np.max(dist)), len(clusters)])

    worst = max(report.rows, key=lambda row: row["outside_mass"])
    described = subgroup.kind if subgroup.order is None else f"{subgroup.kind}(q={subgroup.order})"
    if worst["outside_mass"] < cfg.threshold:
        report.verdict = "PASS"
        report.summary = (f"All sampled measures put mass below {cfg.threshold:g} outside H={described}: "
                          f"consistent with Hol contained in H at the sampled m and members (support, not proof)")
    else:
        report.verdict = "FAIL"
        report.summary = (f"Mass {worst['outside_mass']:.4g} persists outside H={described} at m={worst['m']}, "
                          f"t={worst['t']:g}: Hol is not contained in H")
    report.diagnostics["runs"] = runs
    header = ["m", "t", "outside_mass", "max_distance", "clusters"]
    return ExperimentOutcome(report, measures, {"subgroup": (header, table)})


def extrapolate_limit(values: Sequence[float]) -> float:
    """
    Geometric fit of the last three values, rounded toward FAIL.

    When the differences shrink geometrically (ratio in [0, 1)) the Aitken
    limit is reported, but never below the last observation. Any other
    shape reports the largest of the last three values. Clamped at 0.
    """
    v = [float(x) for x in values]
    if not v:
        raise ValueError("no values to extrapolate")
    if len(v) < 3:
        return max(v[-1], 0.0)
    a0, a1, a2 = v[-3:]
    d1, d2 = a1 - a0, a2 - a1
    if d1 == 0.0 and d2 == 0.0:
        return max(a2, 0.0)
    if d1 == 0.0 or not 0.0 <= d2 / d1 < 1.0:
        return max(a0, a1, a2, 0.0)
    estimate = a2 - d2 * d2 / (d2 - d1)
    if not math.isfinite(estimate):
        estimate = a2
    return max(estimate, a2, 0.0)


def run_bs_detector(cfg: ExperimentConfig) -> ExperimentOutcome:
    """Arc-mass trajectories of a flat U(1) family and their extrapolated limits."""
    ctx = RunContext(cfg)
    family = ctx.family
    if not family.is_flat_u1:
        raise ConfigError("the Bohr-Sommerfeld detector needs flat_u1 connections (or a family of them)")
    schedule = family.schedule
    if cfg.estimator == "empirical":
        run = sample_holonomies(cfg, cfg.m, schedule)
        mus = [run.measure(k) for k in range(len(schedule))]
    else:
        mus = [analytic_flat_u1(ctx.manifold, family.periods_at(t), cfg.tail) for t in schedule]

    report = new_report("bs-detect", cfg)
    table = []
    limits: Dict[str, float] = {}
    for eps in cfg.epsilons:
        trajectory = [arc_mass(mu, eps) for mu in mus]
        for t, mass in zip(schedule, trajectory):
            table.append([t, mass, eps])
            report.rows.append({"t": t, "arc_mass": mass, "eps": eps})
        limits[str(eps)] = extrapolate_limit(trajectory)

    limit_periods = family.periods_at(0.0)
    periods_trivial = all(float(arc_distance(p, 0.0)) <= cfg.merge_tol for p in limit_periods)
    detected = all(limit < cfg.threshold for limit in limits.values())
    report.verdict = "PASS" if detected else "FAIL"
    report.diagnostics.update({
        "bohr_sommerfeld": detected,
        "limit_mass": limits,
        "limit_periods": limit_periods,
        "limit_periods_trivial": periods_trivial,
        "estimator": cfg.estimator,
    })
    report.summary = ("BOHR-SOMMERFELD: " if detected else "NOT BOHR-SOMMERFELD: ") + ", ".join(
        f"eps={eps} limit mass {value:.3g}" for eps, value in limits.items()
    ) + f"; limit periods {limit_periods}"
    return ExperimentOutcome(report, {}, {"bs_detect": (["t", "arc_mass", "eps"], table)})


def run_stokes(cfg: ExperimentConfig) -> ExperimentOutcome:
    """Holonomy vs exp of the curvature flux through cone fillings of contractible loops."""
    ctx = RunContext(cfg)
    connection = ctx.connection()
    if not isinstance(ctx.manifold, FlatTorus):
        raise UnsupportedTransport("the Stokes check fills loops by cones in the universal cover of a torus")
    transport = cfg.transport if "transport" in cfg.model_fields_set else "exact-u1"
    if transport == "ito":
        raise UnsupportedTransport("the Stokes check compares deterministic transports (ode or exact-u1)")
    rng = substream(cfg.seed, STREAM_SAMPLES, cfg.m, 0)
    counter = RejectionCounter()
    batch = sample_admissible(ctx.manifold, ctx.base, cfg.m, rng, cfg.stokes_loops, "exact",
                              cfg.attempt_factor, counter, [0] * ctx.manifold.dim)
    loops = build_loops(batch)
    residuals = [stokes_check(connection, loops.loop(i), cfg.stokes_resolution, transport, cfg.steps_per_segment)
                 for i in range(loops.size)]
    worst = float(max(residuals)) if residuals else 0.0

    report = new_report("stokes", cfg)
    report.verdict = "PASS" if worst < STOKES_TOLERANCE else "FAIL"
    report.rows = [{"loop": i, "residual": r} for i, r in enumerate(residuals)]
    report.diagnostics.update({
        "max_residual": worst,
        "mean_residual": float(np.mean(residuals)) if residuals else 0.0,
        "transport": transport,
        "resolution": cfg.stokes_resolution,
        "rejection_rate": counter.rejection_rate,
    })
    report.tolerances["stokes"] = STOKES_TOLERANCE
    report.summary = f"{len(residuals)} contractible loops, {connection.describe()}: max residual {worst:.3g}"
    table = [[i, r] for i, r in enumerate(residuals)]
    return ExperimentOutcome(report, {}, {"stokes": (["loop", "residual"], table)})


RUNNERS = {
    "dist": run_distribution,
    "refine": run_refinement,
    "family": run_family_convergence,
    "jump": run_jump_demo,
    "subgroup": run_subgroup_criterion,
    "bs-detect": run_bs_detector,
    "stokes": run_stokes,
}


def run_experiment(subcommand: str, cfg: ExperimentConfig, settings: Optional[Settings] = None,
                   seed: Optional[int] = None, workers: Optional[int] = None, out_dir: Optional[str] = None,
                   write_files: bool = True) -> ExperimentOutcome:
    """Resolve overrides, run one subcommand, optionally write its output directory."""
    if subcommand not in RUNNERS:
        raise ConfigError(f"Unknown subcommand '{subcommand}'; choose one of {', '.join(RUNNERS)}")
    resolved = resolve_config(cfg, settings, seed, workers, out_dir)
    logger.info(f"Starting {subcommand} (seed={resolved.seed}, workers={resolved.workers}, "
                f"config {config_hash(resolved)[:12]})")
    started = time.perf_counter()
    outcome = RUNNERS[subcommand](resolved)
    outcome.report.runtime_seconds = time.perf_counter() - started
    logger.info(f"Finished {subcommand} in {outcome.report.runtime_seconds:.2f}s: "
                f"verdict {outcome.report.verdict or 'n/a'}")
    if write_files:
        write_outputs(outcome, resolved.out_dir)
    return outcome
