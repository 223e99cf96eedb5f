"""
Bridge Service
Samples vertex tuples (x_1, ..., x_{m-1}) from the pinned finite-dimensional
density (1/p_1(x,x)) prod p_{1/m}(x_i, x_{i+1}), conditions them on the
admissible set (consecutive distances < rho), builds the piecewise geodesic
loops and reads off their winding classes.
"""

import logging
import math
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, validator

from services.geometry_service import FlatTorus, Manifold, ManifoldPoint
from utils.errors import AdmissibilityExhausted, ConfigError, DistanceTooLarge, LiftDefect

logger = logging.getLogger(__name__)

LIFT_TOLERANCE = 1e-9
WINDING_TAIL = 1e-12


class LoopVertices(BaseModel):
    """One sampled vertex tuple with its importance weight (1 for exact samplers)."""
    base: ManifoldPoint
    m: int
    vertices: List[List[float]]
    weight: float = 1.0
    winding: Optional[List[int]] = None

    @validator('vertices')
    def validate_length(cls, v, values):
        m = values.get('m')
        if m is not None and len(v) != m - 1:
            raise ValueError(f"expected {m - 1} vertices, got {len(v)}")
        return v

    @validator('weight')
    def validate_weight(cls, v):
        if not (math.isfinite(v) and v > 0):
            raise ValueError(f"weight must be finite and positive, got {v}")
        return v


class WindingClass(BaseModel):
    """Lattice vector nu of a torus loop; `trivial` for simply connected manifolds."""
    nu: List[int] = Field(default_factory=list)
    trivial: bool = False


class RejectionCounter(BaseModel):
    """Raw-loop accounting: accepted + rejected = attempted, plus importance-weight totals."""
    attempted: int = 0
    accepted: int = 0
    rejected: int = 0
    attempted_weight: float = 0.0
    accepted_weight: float = 0.0

    def update(self, accepted_mask: np.ndarray, weights: Optional[np.ndarray] = None) -> None:
        n_acc = int(np.count_nonzero(accepted_mask))
        self.attempted += int(accepted_mask.size)
        self.accepted += n_acc
        self.rejected += int(accepted_mask.size) - n_acc
        w = np.ones(accepted_mask.size) if weights is None else np.asarray(weights, dtype=float)
        self.attempted_weight += float(np.sum(w))
        self.accepted_weight += float(np.sum(w[accepted_mask]))

    def merge(self, other: "RejectionCounter") -> None:
        self.attempted += other.attempted
        self.accepted += other.accepted
        self.rejected += other.rejected
        self.attempted_weight += other.attempted_weight
        self.accepted_weight += other.accepted_weight

    @property
    def rejection_rate(self) -> float:
        return self.rejected / self.attempted if self.attempted else 0.0

    @property
    def weight_deficit(self) -> float:
        """Share of raw importance weight lost to rejection."""
        if self.attempted_weight <= 0:
            return 0.0
        return 1.0 - self.accepted_weight / self.attempted_weight


class LoopBatch:
    """N vertex tuples sharing base point and partition size; arrays are (N, m-1, d)."""

    def __init__(self, manifold: Manifold, base: np.ndarray, m: int, vertices: np.ndarray,
                 weights: Optional[np.ndarray] = None, windings: Optional[np.ndarray] = None):
        self.manifold = manifold
        self.base = np.asarray(base, dtype=float)
        self.m = m
        self.vertices = np.asarray(vertices, dtype=float).reshape(-1, m - 1, manifold.embed_dim)
        n = self.vertices.shape[0]
        self.weights = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
        self.windings = windings

    @property
    def size(self) -> int:
        return self.vertices.shape[0]

    def closed_vertices(self) -> np.ndarray:
        """(N, m+1, d): base, x_1, ..., x_{m-1}, base."""
        b = np.broadcast_to(self.base, (self.size, 1, self.base.size))
        return np.concatenate([b, self.vertices, b], axis=1)

    def subset(self, mask: np.ndarray) -> "LoopBatch":
        return LoopBatch(self.manifold, self.base, self.m, self.vertices[mask], self.weights[mask],
                         None if self.windings is None else self.windings[mask])

    def loop_vertices(self, i: int) -> LoopVertices:
        return LoopVertices(
            base=ManifoldPoint(coords=[float(c) for c in self.base]),
            m=self.m,
            vertices=self.vertices[i].tolist(),
            weight=float(self.weights[i]),
            winding=None if self.windings is None else [int(k) for k in self.windings[i]],
        )

    @classmethod
    def from_vertices(cls, manifold: Manifold, loops: List[LoopVertices]) -> "LoopBatch":
        first = loops[0]
        windings = None
        if all(lv.winding is not None for lv in loops):
            windings = np.array([lv.winding for lv in loops], dtype=np.int64)
        return cls(manifold, first.base.as_array(), first.m,
                   np.array([lv.vertices for lv in loops], dtype=float).reshape(len(loops), first.m - 1, -1),
                   np.array([lv.weight for lv in loops]), windings)

    @classmethod
    def concat(cls, batches: List["LoopBatch"]) -> "LoopBatch":
        first = batches[0]
        windings = None
        if all(b.windings is not None for b in batches):
            windings = np.concatenate([b.windings for b in batches])
        return cls(first.manifold, first.base, first.m,
                   np.concatenate([b.vertices for b in batches]),
                   np.concatenate([b.weights for b in batches]), windings)


class GeodesicLoopBatch:
    """
    Piecewise geodesic loops in lifted coordinates: lifted[:, i] -> lifted[:, i+1]
    is segment i (straight chord in the cover for tori, great arc for the sphere).
    """

    def __init__(self, manifold: Manifold, lifted: np.ndarray, weights: np.ndarray,
                 windings: Optional[np.ndarray] = None):
        self.manifold = manifold
        self.lifted = lifted
        self.weights = weights
        self._windings = windings

    @property
    def size(self) -> int:
        return self.lifted.shape[0]

    @property
    def m(self) -> int:
        return self.lifted.shape[1] - 1

    @property
    def windings(self) -> Optional[np.ndarray]:
        if self._windings is None and isinstance(self.manifold, FlatTorus):
            self._windings = winding_classes(self.manifold, self.lifted)
        return self._windings

    def segment_lengths(self) -> np.ndarray:
        a, b = self.lifted[:, :-1], self.lifted[:, 1:]
        return self.manifold.distance(a, b) if not isinstance(self.manifold, FlatTorus) \
            else np.linalg.norm(b - a, axis=-1)

    def point(self, s: float) -> np.ndarray:
        """Position at loop time s in [0, 1] (lifted coordinates)."""
        i = min(int(math.floor(s * self.m)), self.m - 1)
        return self.manifold.segment_point(self.lifted[:, i], self.lifted[:, i + 1], s * self.m - i)

    def reversed(self) -> "GeodesicLoopBatch":
        lifted = self.lifted[:, ::-1].copy()
        windings = self._windings
        if isinstance(self.manifold, FlatTorus):
            # start the reversed lift back at the base point
            lifted = lifted - (lifted[:, :1] - self.lifted[:, :1])
            windings = None if windings is None else -windings
        return GeodesicLoopBatch(self.manifold, lifted, self.weights, windings)

    def refined(self) -> "GeodesicLoopBatch":
        """Midpoint-inserted 2m representative of the same loops."""
        a, b = self.lifted[:, :-1], self.lifted[:, 1:]
        mid = self.manifold.segment_point(a, b, 0.5)
        out = np.empty((self.size, 2 * self.m + 1, self.lifted.shape[2]))
        out[:, 0::2] = self.lifted
        out[:, 1::2] = mid
        return GeodesicLoopBatch(self.manifold, out, self.weights, self._windings)

    def loop(self, i: int) -> "PiecewiseGeodesicLoop":
        return PiecewiseGeodesicLoop(
            lifted=self.lifted[i], weight=float(self.weights[i]),
            winding=None if self.windings is None else [int(k) for k in self.windings[i]],
        )

    def take(self, idx) -> "GeodesicLoopBatch":
        return GeodesicLoopBatch(self.manifold, self.lifted[idx], self.weights[idx],
                                 None if self._windings is None else self._windings[idx])


class PiecewiseGeodesicLoop(BaseModel):
    """Single loop in lifted coordinates; lifted[0] is the base point."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    lifted: np.ndarray
    weight: float = 1.0
    winding: Optional[List[int]] = None

    @property
    def m(self) -> int:
        return self.lifted.shape[0] - 1

    def as_batch(self, manifold: Manifold) -> GeodesicLoopBatch:
        windings = None if self.winding is None else np.array([self.winding], dtype=np.int64)
        return GeodesicLoopBatch(manifold, self.lifted[None], np.array([self.weight]), windings)


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------

def winding_distribution(manifold: FlatTorus, tail: float = WINDING_TAIL) -> Tuple[np.ndarray, np.ndarray]:
    """
    Homotopy-class masses w_nu = exp(-|B nu|^2/4) / Z over every nu whose
    omitted tail is below `tail`; returns (windings (K, n), masses (K,)).
    """
    n = manifold.dim
    c = manifold._gaussian_cutoff(1.0, tail * (4.0 * math.pi) ** (-0.5 * n))
    nus = manifold.lattice_vectors_within(c)
    sq = np.sum((nus @ manifold.B.T) ** 2, axis=-1)
    w = np.exp(-sq / 4.0)
    return nus.astype(np.int64), w / np.sum(w)


def sample_bridge_torus(manifold: FlatTorus, base: np.ndarray, m: int, rng: np.random.Generator,
                        size: int = 1, winding=None) -> LoopBatch:
    """
    Exact pinned sampler: draw the class nu, then a Euclidean Gaussian bridge
    (step variance 2/m) from base to base + B nu in the cover, then reduce.
    A fixed `winding` conditions every loop on that class.
    """
    if not isinstance(manifold, FlatTorus):
        raise ConfigError("the exact bridge sampler needs a circle or flat torus")
    n = manifold.dim
    if winding is None:
        nus, probs = winding_distribution(manifold)
        nu = nus[rng.choice(len(probs), size=size, p=probs)]
    else:
        nu = np.broadcast_to(np.asarray(winding, dtype=np.int64).reshape(n), (size, n)).copy()
    target = nu @ manifold.B.T
    steps = rng.normal(0.0, math.sqrt(2.0 / m), size=(size, m, n))
    walk = np.cumsum(steps, axis=1)
    frac = (np.arange(1, m + 1) / m)[None, :, None]
    bridge = walk - frac * walk[:, -1:, :] + frac * target[:, None, :]
    vertices = manifold.reduce(base + bridge[:, :-1, :])
    return LoopBatch(manifold, base, m, vertices, np.ones(size), nu)


def sample_bridge_is(manifold: Manifold, base: np.ndarray, m: int, rng: np.random.Generator,
                     size: int = 1) -> LoopBatch:
    """
    Forward heat-kernel walk x_{i+1} ~ p_{1/m}(x_i, .) with closing weight
    w = p_{1/m}(x_{m-1}, x) / p_1(x, x); averages are self-normalized downstream.
    """
    s = 1.0 / m
    x = np.broadcast_to(base, (size, base.size)).copy()
    vertices = np.empty((size, m - 1, base.size))
    for i in range(m - 1):
        x = manifold.sample_heat_step(x, s, rng)
        vertices[:, i] = x
    closing = manifold.heat_kernel(s, x, np.broadcast_to(base, x.shape))
    weights = closing / manifold.heat_kernel_diagonal_total(base)
    return LoopBatch(manifold, base, m, vertices, weights)


def admissibility_filter(batch: LoopBatch, rho: Optional[float] = None,
                         counter: Optional[RejectionCounter] = None) -> np.ndarray:
    """Accepted iff all m consecutive distances are strictly below rho."""
    rho = batch.manifold.rho() if rho is None else rho
    closed = batch.closed_vertices()
    dist = batch.manifold.distance(closed[:, :-1], closed[:, 1:])
    accepted = np.all(dist < rho, axis=1)
    if counter is not None:
        counter.update(accepted)
    return accepted


def sample_admissible(manifold: Manifold, base: np.ndarray, m: int, rng: np.random.Generator,
                      size: int, sampler: str = "exact", attempt_factor: float = 10.0,
                      counter: Optional[RejectionCounter] = None, winding=None) -> LoopBatch:
    """Draw raw loops until `size` pass the admissibility filter."""
    counter = counter if counter is not None else RejectionCounter()
    budget = int(math.ceil(attempt_factor * size))
    used = 0
    kept: List[LoopBatch] = []
    have = 0
    while have < size:
        remaining = budget - used
        if remaining <= 0:
            raise AdmissibilityExhausted(
                f"only {have} of {size} admissible loops after {used} attempts at m={m} "
                f"(rejection rate {counter.rejection_rate:.3g}); increase m or attempt_factor"
            )
        need = size - have
        block = min(need + need // 4 + 16, remaining)
        if sampler == "exact":
            raw = sample_bridge_torus(manifold, base, m, rng, block, winding=winding)
        elif sampler == "is":
            raw = sample_bridge_is(manifold, base, m, rng, block)
        else:
            raise ConfigError(f"Unknown sampler: {sampler}")
        used += block
        mask = admissibility_filter(raw)
        hits = np.nonzero(mask)[0]
        if hits.size > need:
            # stop the block at the need-th acceptance so counts match the kept loops
            cutoff = int(hits[need - 1]) + 1
            raw = raw.subset(np.arange(cutoff))
            mask = mask[:cutoff]
        counter.update(mask, raw.weights)
        good = raw.subset(mask)
        kept.append(good)
        have += good.size
    return LoopBatch.concat(kept)


# ---------------------------------------------------------------------------
# Loops and winding classes
# ---------------------------------------------------------------------------

def build_loops(batch: LoopBatch) -> GeodesicLoopBatch:
    """The map Phi_m on a batch: lift consecutive vertices along minimal geodesics."""
    manifold = batch.manifold
    closed = batch.closed_vertices()
    dist = manifold.distance(closed[:, :-1], closed[:, 1:])
    rho = manifold.rho()
    if np.any(dist >= rho):
        raise DistanceTooLarge(float(np.max(dist)), rho)
    lifted = np.empty_like(closed)
    lifted[:, 0] = closed[:, 0]
    for i in range(1, closed.shape[1]):
        lifted[:, i] = manifold.lift_next(lifted[:, i - 1], closed[:, i])
    loops = GeodesicLoopBatch(manifold, lifted, batch.weights.copy())
    if batch.windings is not None and isinstance(manifold, FlatTorus):
        computed = loops.windings
        if not np.array_equal(computed, batch.windings):
            raise LiftDefect("lifted winding differs from the sampled homotopy class")
    return loops


def build_loop(manifold: Manifold, vertices: LoopVertices) -> PiecewiseGeodesicLoop:
    return build_loops(LoopBatch.from_vertices(manifold, [vertices])).loop(0)


def winding_classes(manifold: FlatTorus, lifted: np.ndarray) -> np.ndarray:
    raw = manifold.to_lattice(lifted[:, -1] - lifted[:, 0])
    nu = np.round(raw)
    defect = float(np.max(np.abs(raw - nu))) if raw.size else 0.0
    if defect >= LIFT_TOLERANCE:
        raise LiftDefect(f"lifted increments miss the lattice by {defect:.3g}")
    return nu.astype(np.int64)


def winding_class(manifold: Manifold, loop: PiecewiseGeodesicLoop) -> WindingClass:
    if not isinstance(manifold, FlatTorus):
        return WindingClass(trivial=True)
    nu = winding_classes(manifold, loop.lifted[None])[0]
    return WindingClass(nu=[int(k) for k in nu])


def refine_vertices(manifold: Manifold, vertices: LoopVertices) -> LoopVertices:
    """Insert geodesic midpoints: the Lambda^{2m} representative of the same loop."""
    loop = build_loop(manifold, vertices).as_batch(manifold).refined()
    inner = manifold.reduce(loop.lifted[0, 1:-1])
    return LoopVertices(base=vertices.base, m=2 * vertices.m, vertices=inner.tolist(),
                        weight=vertices.weight, winding=vertices.winding)
