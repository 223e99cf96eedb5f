"""
Measure Service
Empirical and analytic probability measures on O(r) / U(1).

Distances are reported in arc length on the unit circle for U(1) measures
(exact circular 1-Wasserstein) and as a bounded-Lipschitz dictionary
discrepancy in the Frobenius metric for general O(r) measures.
"""

import logging
import math
from itertools import combinations_with_replacement
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from ot.lp.solver_1d import wasserstein1_circle
from pydantic import BaseModel, Field
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import pdist

from services.connection_service import flat_angles
from services.bridge_service import winding_distribution
from services.geometry_service import FlatTorus
from services.transport_service import HolonomyBatch, HolonomyElement, polar, rotation, rotation_angle
from utils.errors import DimensionMismatch, EmptySample

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
ANGLE_MERGE = 1e-12
MAX_LINKAGE_ATOMS = 4000


class MeasureMeta(BaseModel):
    m: Optional[int] = None
    samples: int = 0
    seed: Optional[int] = None
    deficit: float = Field(0.0, description="Rejected fraction of raw loops (count based)")
    weight_deficit: Optional[float] = Field(None, description="Rejected share of importance weight")
    ess: Optional[float] = Field(None, description="Kish effective sample size")
    omitted_mass: Optional[float] = Field(None, description="Analytic tail left out of the theta sum")
    sampler: Optional[str] = None
    transport: Optional[str] = None


class U1Histogram(BaseModel):
    edges: List[float]
    masses: List[float]

    @property
    def bins(self) -> int:
        return len(self.masses)


class Cluster(BaseModel):
    matrix: List[List[float]]
    angle: Optional[float] = None
    mass: float
    atoms: int


class TwoSampleResult(BaseModel):
    distance: float
    p_value: float
    reject: bool
    level: float


class HolonomyMeasure:
    """Weighted atoms on O(r); U(1) measures keep their angles (turns) as the primary data."""

    def __init__(self, kind: str, rank: int, weights: np.ndarray, angles: Optional[np.ndarray] = None,
                 matrices: Optional[np.ndarray] = None, meta: Optional[MeasureMeta] = None):
        self.kind = kind
        self.rank = rank
        self.is_u1 = angles is not None
        self.weights = np.asarray(weights, dtype=float)
        self._angles = None if angles is None else np.asarray(angles, dtype=float)
        self._matrices = None if matrices is None else np.asarray(matrices, dtype=float)
        self.meta = meta or MeasureMeta()

    @property
    def group(self) -> str:
        return "U1" if self.is_u1 else "O(r)"

    @property
    def size(self) -> int:
        return self.weights.size

    @property
    def angles(self) -> np.ndarray:
        if self._angles is None:
            self._angles = rotation_angle(self.matrices)
        return self._angles

    @property
    def matrices(self) -> np.ndarray:
        if self._matrices is None:
            self._matrices = rotation(TWO_PI * self._angles)
        return self._matrices

    def total_mass(self) -> float:
        return float(np.sum(self.weights))

    def histogram(self, bins: int) -> U1Histogram:
        edges = np.linspace(0.0, 1.0, bins + 1)
        idx = np.minimum((self.angles * bins).astype(int), bins - 1)
        masses = np.bincount(idx, weights=self.weights, minlength=bins)
        return U1Histogram(edges=edges.tolist(), masses=masses.tolist())

    def rotated(self, turns: float) -> "HolonomyMeasure":
        angles = np.mod(self.angles + turns, 1.0)
        return HolonomyMeasure(self.kind, self.rank, self.weights, np.where(angles >= 1.0, 0.0, angles),
                               meta=self.meta)

    def resampled(self, idx: np.ndarray) -> "HolonomyMeasure":
        w = self.weights[idx]
        w = w / np.sum(w)
        if self.is_u1:
            return HolonomyMeasure(self.kind, self.rank, w, self.angles[idx], meta=self.meta)
        return HolonomyMeasure(self.kind, self.rank, w, matrices=self.matrices[idx], meta=self.meta)

    def to_dict(self) -> Dict[str, Any]:
        if self.is_u1:
            atoms = [{"angle": float(a), "weight": float(w)} for a, w in zip(self.angles, self.weights)]
        else:
            atoms = [{"matrix": q.tolist(), "weight": float(w)} for q, w in zip(self.matrices, self.weights)]
        return {
            "kind": self.kind,
            "group": self.group,
            "rank": self.rank,
            "angle_units": "turns",
            "distance_units": "arc length on the unit circle" if self.is_u1 else "Frobenius",
            "atoms": atoms,
            "meta": self.meta.model_dump(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "HolonomyMeasure":
        atoms = data["atoms"]
        weights = np.array([a["weight"] for a in atoms], dtype=float)
        meta = MeasureMeta(**data.get("meta", {}))
        if data["group"] == "U1":
            return cls(data["kind"], 2, weights, np.array([a["angle"] for a in atoms], dtype=float), meta=meta)
        return cls(data["kind"], data["rank"], weights,
                   matrices=np.array([a["matrix"] for a in atoms], dtype=float), meta=meta)


def _normalized(weights: np.ndarray) -> np.ndarray:
    total = float(np.sum(weights))
    if not total > 0 or not math.isfinite(total):
        raise EmptySample(f"sample weights sum to {total}")
    return weights / total


def empirical_measure(samples, meta: Optional[MeasureMeta] = None) -> HolonomyMeasure:
    """
    Self-normalized measure from a HolonomyBatch or a sequence of
    (HolonomyElement, weight) pairs.
    """
    if isinstance(samples, HolonomyBatch):
        if samples.size == 0:
            raise EmptySample("no holonomy samples")
        weights = _normalized(samples.weights)
        if samples.is_u1:
            return HolonomyMeasure("empirical", 2, weights, samples.angles(), meta=meta)
        return HolonomyMeasure("empirical", samples.rank, weights, matrices=samples.matrices, meta=meta)
    samples = list(samples)
    if not samples:
        raise EmptySample("no holonomy samples")
    matrices = np.array([el.as_array() if isinstance(el, HolonomyElement) else np.asarray(el) for el, _ in samples])
    weights = _normalized(np.array([float(w) for _, w in samples]))
    is_u1 = all(isinstance(el, HolonomyElement) and el.angle is not None for el, _ in samples)
    if is_u1:
        return HolonomyMeasure("empirical", 2, weights, rotation_angle(matrices), meta=meta)
    return HolonomyMeasure("empirical", matrices.shape[-1], weights, matrices=matrices, meta=meta)


def aggregate_angles(angles: np.ndarray, weights: np.ndarray, tol: float = ANGLE_MERGE) -> Tuple[np.ndarray, np.ndarray]:
    """Merge atoms whose angles agree within tol (across the wrap point too)."""
    order = np.argsort(angles, kind="stable")
    a, w = angles[order], weights[order]
    out_a: List[float] = []
    out_w: List[float] = []
    for angle, weight in zip(a, w):
        if out_a and angle - out_a[-1] <= tol:
            out_w[-1] += weight
        else:
            out_a.append(float(angle))
            out_w.append(float(weight))
    if len(out_a) > 1 and out_a[0] + 1.0 - out_a[-1] <= tol:
        out_w[0] += out_w.pop()
        out_a.pop()
    return np.array(out_a), np.array(out_w)


def analytic_flat_u1(manifold: FlatTorus, periods: Sequence[float], tail: float = 1e-12) -> HolonomyMeasure:
    """Atoms at theta_nu = nu . theta mod 1 with the homotopy-class masses w_nu."""
    if not 0 < tail <= 1e-6:
        raise ValueError("tail must lie in (0, 1e-6]")
    nus, masses = winding_distribution(manifold, tail)
    angles, weights = aggregate_angles(flat_angles(periods, nus), masses)
    weights = weights / np.sum(weights)
    meta = MeasureMeta(samples=0, omitted_mass=tail)
    return HolonomyMeasure("analytic", 2, weights, angles, meta=meta)


def delta_identity(rank: int = 2, u1: bool = True) -> HolonomyMeasure:
    if u1:
        return HolonomyMeasure("analytic", 2, np.ones(1), np.zeros(1))
    return HolonomyMeasure("analytic", rank, np.ones(1), matrices=np.eye(rank)[None])


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------

def circle_w1(angles_a: np.ndarray, weights_a: np.ndarray, angles_b: np.ndarray, weights_b: np.ndarray) -> float:
    """Exact circular 1-Wasserstein distance, in arc length."""
    turns = wasserstein1_circle(np.asarray(angles_a, dtype=float), np.asarray(angles_b, dtype=float),
                                np.asarray(weights_a, dtype=float), np.asarray(weights_b, dtype=float))
    return float(np.asarray(turns).reshape(-1)[0]) * TWO_PI


def dictionary_features(Q: np.ndarray) -> np.ndarray:
    """
    Test functions with Frobenius-Lipschitz constant at most 1: entries,
    halved quadratic entry monomials, tr(Q^p) / (p sqrt(r)) for p = 1..4.
    """
    n, r, _ = Q.shape
    entries = Q.reshape(n, r * r)
    pairs = list(combinations_with_replacement(range(r * r), 2))
    i, j = np.array(pairs).T
    quadratic = 0.5 * entries[:, i] * entries[:, j]
    traces = []
    power = np.broadcast_to(np.eye(r), Q.shape).copy()
    for p in range(1, 5):
        power = power @ Q
        traces.append(np.trace(power, axis1=-2, axis2=-1) / (p * math.sqrt(r)))
    return np.concatenate([entries, quadratic, np.stack(traces, axis=-1)], axis=-1)


def bl_distance(mu: HolonomyMeasure, nu: HolonomyMeasure) -> float:
    if mu.rank != nu.rank:
        raise DimensionMismatch(f"measures on O({mu.rank}) and O({nu.rank})")
    if mu.is_u1 and nu.is_u1:
        return circle_w1(mu.angles, mu.weights, nu.angles, nu.weights)
    fa = mu.weights @ dictionary_features(mu.matrices)
    fb = nu.weights @ dictionary_features(nu.matrices)
    return float(np.max(np.abs(fa - fb)))


def arc_distance(a, b) -> np.ndarray:
    """Geodesic distance between angles (turns) on the unit circle, in arc length."""
    d = np.abs(np.mod(np.asarray(a) - np.asarray(b), 1.0))
    return TWO_PI * np.minimum(d, 1.0 - d)


def arc_mass(mu: HolonomyMeasure, eps: float) -> float:
    """Mass of angles in the open window (eps, 1 - eps)."""
    if not 0 < eps < 0.5:
        raise ValueError("eps must lie in (0, 1/2)")
    a = mu.angles
    return float(np.sum(mu.weights[(a > eps) & (a < 1.0 - eps)]))


# ---------------------------------------------------------------------------
# Support
# ---------------------------------------------------------------------------

def _u1_clusters(mu: HolonomyMeasure, merge_tol: float) -> List[Cluster]:
    angles, weights = aggregate_angles(mu.angles, mu.weights, tol=0.0)
    k = angles.size
    gaps = np.diff(np.concatenate([angles, angles[:1] + 1.0])) * TWO_PI
    cuts = np.nonzero(gaps > merge_tol)[0]
    if cuts.size == 0:
        groups = [np.arange(k)]
    else:
        # cluster boundaries sit after each cut; rotate so the first cluster starts after the last cut
        start = (cuts[-1] + 1) % k
        order = np.roll(np.arange(k), -start)
        bounds = np.sort((cuts - start) % k) + 1
        groups = np.split(order, bounds[:-1])
    clusters = []
    for g in groups:
        w = weights[g]
        mean = np.sum(w[:, None, None] * rotation(TWO_PI * angles[g]), axis=0) / np.sum(w)
        center = polar(mean[None])[0]
        clusters.append(Cluster(matrix=center.tolist(), angle=float(rotation_angle(center)),
                                mass=float(np.sum(w)), atoms=int(g.size)))
    return clusters


def _matrix_clusters(mu: HolonomyMeasure, merge_tol: float) -> List[Cluster]:
    r = mu.rank
    flat = mu.matrices.reshape(mu.size, r * r)
    cell = merge_tol / (2.0 * r)
    keys = np.round(flat / cell).astype(np.int64) if mu.size > MAX_LINKAGE_ATOMS else None
    if keys is not None:
        # cells have Frobenius diameter below merge_tol, so pre-merging them keeps single linkage intact
        _, inverse = np.unique(keys, axis=0, return_inverse=True)
    else:
        _, inverse = np.unique(flat, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    n_groups = int(inverse.max()) + 1
    mass = np.bincount(inverse, weights=mu.weights, minlength=n_groups)
    rep = np.zeros((n_groups, r * r))
    np.add.at(rep, inverse, mu.weights[:, None] * flat)
    rep = rep / mass[:, None]
    if n_groups == 1:
        labels = np.zeros(1, dtype=int)
    else:
        labels = fcluster(linkage(pdist(rep), method="single"), t=merge_tol, criterion="distance") - 1
    clusters = []
    for label in np.unique(labels):
        sel = labels == label
        w = mass[sel]
        mean = (w @ rep[sel]) / np.sum(w)
        center = polar(mean.reshape(1, r, r))[0]
        angle = float(rotation_angle(center)) if r == 2 and np.linalg.det(center) > 0 else None
        clusters.append(Cluster(matrix=center.tolist(), angle=angle, mass=float(np.sum(w)),
                                atoms=int(np.count_nonzero(np.isin(inverse, np.nonzero(sel)[0])))))
    return clusters


def support_estimate(mu: HolonomyMeasure, merge_tol: float) -> List[Cluster]:
    """Single-linkage clusters (arc length on U(1), Frobenius on O(r)) with projected centers."""
    if merge_tol <= 0:
        raise ValueError("merge_tol must be positive")
    clusters = _u1_clusters(mu, merge_tol) if mu.is_u1 else _matrix_clusters(mu, merge_tol)
    return sorted(clusters, key=lambda c: (-c.mass, c.angle if c.angle is not None else 0.0))


# ---------------------------------------------------------------------------
# Statistical floors
# ---------------------------------------------------------------------------

def bootstrap_floor(mu: HolonomyMeasure, rng: np.random.Generator, resamples: int = 200) -> float:
    """
    RMS of bl_distance(mu*, mu) over bootstrap resamples mu* of the atoms:
    the Monte Carlo noise scale of any distance measured from mu.
    """
    if mu.size <= 1:
        return 0.0
    draws = np.empty(resamples)
    for b in range(resamples):
        idx = rng.integers(0, mu.size, size=mu.size)
        draws[b] = bl_distance(mu.resampled(idx), mu)
    return float(math.sqrt(np.mean(draws ** 2)))


def two_sample_test(mu: HolonomyMeasure, nu: HolonomyMeasure, rng: np.random.Generator,
                    resamples: int = 200, level: float = 0.01) -> TwoSampleResult:
    """Pooled-bootstrap test of mu == nu using bl_distance as the statistic."""
    observed = bl_distance(mu, nu)
    n1, n2 = mu.size, nu.size
    w = np.concatenate([mu.weights * n1, nu.weights * n2])
    if mu.is_u1 and nu.is_u1:
        pooled = HolonomyMeasure("empirical", 2, w / np.sum(w), np.concatenate([mu.angles, nu.angles]))
    else:
        pooled = HolonomyMeasure("empirical", mu.rank, w / np.sum(w),
                                 matrices=np.concatenate([mu.matrices, nu.matrices]))
    exceed = 0
    for _ in range(resamples):
        a = pooled.resampled(rng.integers(0, n1 + n2, size=n1))
        b = pooled.resampled(rng.integers(0, n1 + n2, size=n2))
        if bl_distance(a, b) >= observed:
            exceed += 1
    p_value = (1 + exceed) / (1 + resamples)
    return TwoSampleResult(distance=observed, p_value=p_value, reject=p_value < level, level=level)


def kish_ess(weights: np.ndarray) -> float:
    w = np.asarray(weights, dtype=float)
    sq = float(np.sum(w ** 2))
    return float(np.sum(w)) ** 2 / sq if sq > 0 else 0.0
