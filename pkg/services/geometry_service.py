"""
Geometry Service
Catalog of compact Riemannian manifolds (circle, flat tori, round 2-sphere)
with exact geodesics, distances, injectivity radii and heat kernels.

Heat equation convention: d/ds p = Laplacian p, so a step of time s has
per-coordinate variance 2s and p_s ~ (4 pi s)^(-n/2) exp(-d^2 / 4s).
"""

import logging
import math
from abc import ABC, abstractmethod
from itertools import product
from typing import List, Optional, Tuple

import numpy as np
from numpy.polynomial import legendre
from pydantic import BaseModel, ConfigDict, Field

from cache.cache_manager import (
    diagonal_kernel_cache, image_set_cache, proposal_constant_cache, spectral_coefficient_cache,
)
from utils.errors import ConfigError, DistanceTooLarge, NonPositiveTime, ProposalFailure

logger = logging.getLogger(__name__)

DEFAULT_HK_TOLERANCE = 1e-12
SMALL_TIME_WARNING = 1e-3
PROPOSAL_RETRY_CAP = 10_000


class ManifoldPoint(BaseModel):
    """A point stored in fundamental-domain coordinates."""
    coords: List[float] = Field(..., description="Torus: B[0,1)^n representative; sphere: unit vector in R^3")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=float)


class GeodesicSegment(BaseModel):
    """Unique minimal geodesic between two points closer than rho."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    p: ManifoldPoint
    q: ManifoldPoint
    start: np.ndarray  # lifted start (embedding coordinates)
    end: np.ndarray    # lifted end, so the segment is the chord/great arc start -> end
    velocity: np.ndarray
    length: float


class Manifold(ABC):
    """Abstract catalog manifold; every method accepts batched arrays (..., embed_dim)."""

    kind: str = "abstract"
    dim: int = 0
    embed_dim: int = 0
    hk_tolerance: float = DEFAULT_HK_TOLERANCE

    def rho(self) -> float:
        return 0.5 * self.injectivity_radius()

    @abstractmethod
    def key(self) -> Tuple:
        """Hashable identity used for caching."""

    @abstractmethod
    def injectivity_radius(self) -> float:
        pass

    @abstractmethod
    def reduce(self, x: np.ndarray) -> np.ndarray:
        """Map embedding coordinates to the fundamental-domain representative."""

    @abstractmethod
    def distance(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def lift_next(self, prev_lift: np.ndarray, q: np.ndarray) -> np.ndarray:
        """Lift of q adjacent to prev_lift along the minimal geodesic."""

    @abstractmethod
    def segment_point(self, a: np.ndarray, b: np.ndarray, t) -> np.ndarray:
        """Constant-speed geodesic between lifted endpoints, evaluated at t in [0, 1]."""

    @abstractmethod
    def segment_velocity(self, a: np.ndarray, b: np.ndarray, t) -> np.ndarray:
        """d/dt of segment_point."""

    @abstractmethod
    def heat_kernel(self, s: float, p: np.ndarray, q: np.ndarray,
                    tol: Optional[float] = None) -> np.ndarray:
        pass

    @abstractmethod
    def sample_heat_step(self, x: np.ndarray, s: float, rng: np.random.Generator) -> np.ndarray:
        """Draw y ~ p_s(x, .) for each row of x."""

    @abstractmethod
    def quadrature(self, resolution: int) -> Tuple[np.ndarray, np.ndarray]:
        """Nodes and volume weights integrating smooth functions over M."""

    @abstractmethod
    def default_base_point(self) -> np.ndarray:
        pass

    def point(self, coords) -> ManifoldPoint:
        x = self.reduce(np.asarray(coords, dtype=float).reshape(self.embed_dim))
        return ManifoldPoint(coords=[float(c) for c in x])

    def interpolate(self, p: np.ndarray, q: np.ndarray, t) -> np.ndarray:
        """Point at parameter t on the unique minimal geodesic from p to q."""
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        dist = np.asarray(self.distance(p, q))
        rho = self.rho()
        if np.any(dist >= rho):
            raise DistanceTooLarge(float(np.max(dist)), rho)
        q_lift = self.lift_next(p, q)
        return self.reduce(self.segment_point(p, q_lift, t))

    def geodesic_segment(self, p: np.ndarray, q: np.ndarray) -> GeodesicSegment:
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        length = float(self.distance(p, q))
        if length >= self.rho():
            raise DistanceTooLarge(length, self.rho())
        q_lift = self.lift_next(p, q)
        return GeodesicSegment(
            p=ManifoldPoint(coords=list(map(float, p))),
            q=ManifoldPoint(coords=list(map(float, self.reduce(q)))),
            start=p,
            end=q_lift,
            velocity=self.segment_velocity(p, q_lift, 0.0),
            length=length,
        )

    def heat_kernel_diagonal_total(self, p: np.ndarray) -> float:
        """p_1(x, x), cached per base point."""
        p = np.asarray(p, dtype=float)
        key = (self.key(), self.hk_tolerance, tuple(np.round(p, 15)))
        return diagonal_kernel_cache.get_or_compute(
            key, lambda: float(self.heat_kernel(1.0, p, p))
        )

    @staticmethod
    def _check_time(s: float) -> None:
        if not s > 0:
            raise NonPositiveTime(f"heat kernel time must be positive, got s={s}")


class FlatTorus(Manifold):
    """
    R^n / Lambda with Lambda spanned by the rows of `basis`.
    The circle of circumference L is the n=1 torus with basis [[L]].
    """

    def __init__(self, basis, kind: str = "flat_torus"):
        rows = np.atleast_2d(np.asarray(basis, dtype=float))
        if rows.shape[0] != rows.shape[1]:
            raise ConfigError(f"lattice basis must be square, got shape {rows.shape}")
        if abs(np.linalg.det(rows)) < 1e-14:
            raise ConfigError("lattice basis is singular")
        self.kind = kind
        self.dim = rows.shape[0]
        self.embed_dim = self.dim
        self.B = rows.T                   # columns are generators
        self.B_inv = np.linalg.inv(self.B)
        self._shifts = np.array(list(product((-1, 0, 1), repeat=self.dim)), dtype=float) @ self.B.T
        self._shortest = self._shortest_vector_length()
        self._diameter = 0.5 * float(np.sum(np.linalg.norm(rows, axis=1)))

    def key(self) -> Tuple:
        return (self.kind, tuple(np.round(self.B.ravel(), 15)))

    def _shortest_vector_length(self) -> float:
        best = math.inf
        for k in product(range(-3, 4), repeat=self.dim):
            if any(k):
                best = min(best, float(np.linalg.norm(self.B @ np.asarray(k, dtype=float))))
        return best

    @property
    def volume(self) -> float:
        return float(abs(np.linalg.det(self.B)))

    def injectivity_radius(self) -> float:
        return 0.5 * self._shortest

    def to_lattice(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.B_inv.T

    def from_lattice(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u, dtype=float) @ self.B.T

    def reduce(self, x: np.ndarray) -> np.ndarray:
        u = self.to_lattice(x)
        u = u - np.floor(u)
        u = np.where(u >= 1.0, 0.0, u)
        return self.from_lattice(u)

    def nearest_difference(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        """q - p moved to its shortest lattice image (searched over the 3^n neighbour shifts)."""
        d = np.asarray(q, dtype=float) - np.asarray(p, dtype=float)
        u = self.to_lattice(d)
        d = self.from_lattice(u - np.round(u))
        best = d
        best_sq = np.sum(d * d, axis=-1)
        for shift in self._shifts:
            cand = d + shift
            sq = np.sum(cand * cand, axis=-1)
            closer = sq < best_sq
            if np.any(closer):
                best = np.where(closer[..., None], cand, best)
                best_sq = np.where(closer, sq, best_sq)
        return best

    def distance(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        return np.linalg.norm(self.nearest_difference(p, q), axis=-1)

    def lift_next(self, prev_lift: np.ndarray, q: np.ndarray) -> np.ndarray:
        prev_lift = np.asarray(prev_lift, dtype=float)
        return prev_lift + self.nearest_difference(prev_lift, q)

    def segment_point(self, a, b, t):
        t = np.asarray(t, dtype=float)[..., None] if np.ndim(t) else t
        return a + t * (b - a)

    def segment_velocity(self, a, b, t):
        return np.broadcast_to(b - a, np.shape(a)).copy()

    def winding_vector(self, lifted_displacement: np.ndarray) -> np.ndarray:
        """Lattice coordinates of a closed lifted displacement (not yet rounded)."""
        return self.to_lattice(lifted_displacement)

    def lattice_vectors_within(self, radius: float) -> np.ndarray:
        """Integer coefficient vectors k with |B k| <= radius."""
        bound = np.ceil(radius * np.linalg.norm(self.B_inv, axis=1)).astype(int)
        axes = [np.arange(-b, b + 1) for b in bound]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dim)
        lengths = np.linalg.norm(grid @ self.B.T, axis=-1)
        return grid[lengths <= radius]

    def _gaussian_cutoff(self, s: float, tol: float) -> float:
        """
        Smallest c (step 0.25) such that the Gaussian tail beyond |y| = c sqrt(s),
        counted with a lattice-point envelope shell by shell, is below tol.
        """
        lam = self._shortest
        norm = (4.0 * math.pi * s) ** (-0.5 * self.dim)
        c = 1.0
        while True:
            bound = 0.0
            k = 0
            while True:
                r = c * math.sqrt(s) + k * lam
                count = (2.0 * (r + lam) / lam + 3.0) ** self.dim
                term = count * math.exp(-r * r / (4.0 * s))
                bound += term
                if term < 1e-300 or (k > 0 and term < 1e-16 * bound):
                    break
                k += 1
            if norm * bound < tol:
                return c
            c += 0.25

    def _image_set(self, s: float, tol: float) -> np.ndarray:
        def compute():
            c = self._gaussian_cutoff(s, tol)
            radius = c * math.sqrt(s) + self._diameter
            return self.lattice_vectors_within(radius) @ self.B.T
        return image_set_cache.get_or_compute((self.key(), float(s), float(tol)), compute)

    @staticmethod
    def _canonical_sign(d: np.ndarray) -> np.ndarray:
        # d and -d give the same image sum; fixing the sign makes p <-> q bitwise symmetric
        nonzero = np.abs(d) > 0
        first = np.argmax(nonzero, axis=-1)
        lead = np.take_along_axis(d, first[..., None], axis=-1)[..., 0]
        sign = np.where(lead < 0, -1.0, 1.0)
        return d * sign[..., None]

    def heat_kernel(self, s, p, q, tol=None):
        self._check_time(s)
        d = self._canonical_sign(self.nearest_difference(p, q))
        images = self._image_set(s, self.hk_tolerance if tol is None else tol)
        y = d[..., None, :] + images
        sq = np.einsum("...kn,...kn->...k", y, y)
        norm = (4.0 * math.pi * s) ** (-0.5 * self.dim)
        return norm * np.sum(np.exp(-sq / (4.0 * s)), axis=-1)

    def sample_heat_step(self, x, s, rng):
        x = np.asarray(x, dtype=float)
        step = rng.normal(0.0, math.sqrt(2.0 * s), size=x.shape)
        return self.reduce(x + step)

    def quadrature(self, resolution):
        axes = [np.arange(resolution) / resolution] * self.dim
        u = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dim)
        weights = np.full(u.shape[0], self.volume / u.shape[0])
        return self.from_lattice(u), weights

    def default_base_point(self):
        return np.zeros(self.dim)


class RoundSphere(Manifold):
    """Unit 2-sphere in R^3; points are unit vectors."""

    kind = "sphere2"
    dim = 2
    embed_dim = 3

    def key(self) -> Tuple:
        return (self.kind,)

    @property
    def volume(self) -> float:
        return 4.0 * math.pi

    def injectivity_radius(self) -> float:
        return math.pi

    def reduce(self, x):
        x = np.asarray(x, dtype=float)
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    def distance(self, p, q):
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        cross = np.linalg.norm(np.cross(p, q), axis=-1)
        dot = np.sum(p * q, axis=-1)
        return np.arctan2(cross, dot)

    def lift_next(self, prev_lift, q):
        return self.reduce(q)

    def _omega(self, a, b):
        return self.distance(a, b)[..., None]

    def segment_point(self, a, b, t):
        t = np.asarray(t, dtype=float)[..., None] if np.ndim(t) else t
        w = self._omega(a, b)
        small = w < 1e-12
        safe = np.where(small, 1.0, w)
        wa = np.where(small, 1.0 - t, np.sin((1.0 - t) * safe) / np.sin(safe))
        wb = np.where(small, t, np.sin(t * safe) / np.sin(safe))
        return self.reduce(wa * a + wb * b)

    def segment_velocity(self, a, b, t):
        t = np.asarray(t, dtype=float)[..., None] if np.ndim(t) else t
        w = self._omega(a, b)
        small = w < 1e-12
        safe = np.where(small, 1.0, w)
        da = np.where(small, -1.0, -safe * np.cos((1.0 - t) * safe) / np.sin(safe))
        db = np.where(small, 1.0, safe * np.cos(t * safe) / np.sin(safe))
        return da * a + db * b

    def tangent_basis(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        ref = np.where(np.abs(x[..., 2:3]) < 0.9, np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
        e1 = ref - np.sum(ref * x, axis=-1, keepdims=True) * x
        e1 = e1 / np.linalg.norm(e1, axis=-1, keepdims=True)
        e2 = np.cross(x, e1)
        return e1, e2

    def exp(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(v, axis=-1, keepdims=True)
        safe = np.where(r < 1e-15, 1.0, r)
        return self.reduce(np.cos(r) * x + np.sin(r) * v / safe)

    @staticmethod
    def spectral_cutoff(s: float, tol: float) -> int:
        """Smallest l with (2l+1) exp(-l(l+1)s) < tol beyond the peak of the term sequence."""
        l = 0
        while True:
            term = (2 * l + 1) * math.exp(-l * (l + 1) * s)
            if term < tol and l * s > 0.5:
                return l
            l += 1

    def spectral_coefficients(self, s: float, tol: Optional[float] = None) -> np.ndarray:
        tol = self.hk_tolerance if tol is None else tol

        def compute():
            if s < SMALL_TIME_WARNING:
                logger.warning(f"Spectral heat kernel at small time s={s:.3g}; convergence degrades below {SMALL_TIME_WARNING}")
            l = np.arange(self.spectral_cutoff(s, tol))
            return (2 * l + 1) / (4.0 * math.pi) * np.exp(-l * (l + 1) * s)
        return spectral_coefficient_cache.get_or_compute((self.key(), float(s), float(tol)), compute)

    def kernel_of_distance(self, s: float, r: np.ndarray, tol: Optional[float] = None) -> np.ndarray:
        return legendre.legval(np.cos(r), self.spectral_coefficients(s, tol))

    def heat_kernel(self, s, p, q, tol=None):
        self._check_time(s)
        cos_d = np.clip(np.sum(np.asarray(p, dtype=float) * np.asarray(q, dtype=float), axis=-1), -1.0, 1.0)
        return legendre.legval(cos_d, self.spectral_coefficients(s, tol))

    def proposal_density(self, s: float, r: np.ndarray) -> np.ndarray:
        """Density (w.r.t. area) of exp_x(v), v ~ N(0, 2s I) truncated to |v| < pi."""
        var = 2.0 * s
        mass = 1.0 - math.exp(-math.pi ** 2 / (2.0 * var))
        gauss = np.exp(-r ** 2 / (2.0 * var)) / (2.0 * math.pi * var)
        jac = np.where(r < 1e-12, 1.0, r / np.sin(np.where(r < 1e-12, 1.0, r)))
        return gauss * jac / mass

    def proposal_constant(self, s: float, tol: Optional[float] = None) -> float:
        def compute():
            r = np.linspace(0.0, math.pi - 1e-6, 4001)
            ratio = self.kernel_of_distance(s, r, tol) / self.proposal_density(s, r)
            return 1.05 * float(np.max(ratio))
        key = (self.key(), float(s), float(self.hk_tolerance if tol is None else tol))
        return proposal_constant_cache.get_or_compute(key, compute)

    def sample_heat_step(self, x, s, rng):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        sigma = math.sqrt(2.0 * s)
        const = self.proposal_constant(s)
        out = np.empty_like(x)
        pending = np.arange(x.shape[0])
        attempts = 0
        while pending.size:
            attempts += 1
            if attempts > PROPOSAL_RETRY_CAP:
                raise ProposalFailure(f"sphere heat-step proposal exceeded {PROPOSAL_RETRY_CAP} retries at s={s}")
            xp = x[pending]
            v2 = rng.normal(0.0, sigma, size=(pending.size, 2))
            r = np.linalg.norm(v2, axis=-1)
            e1, e2 = self.tangent_basis(xp)
            y = self.exp(xp, v2[:, :1] * e1 + v2[:, 1:] * e2)
            u = rng.random(pending.size)
            accept = (r < math.pi) & (u * const * self.proposal_density(s, r) < self.kernel_of_distance(s, r))
            out[pending[accept]] = y[accept]
            pending = pending[~accept]
        return out

    def quadrature(self, resolution):
        z, wz = legendre.leggauss(resolution)
        phi = 2.0 * math.pi * np.arange(2 * resolution) / (2 * resolution)
        zz, pp = np.meshgrid(z, phi, indexing="ij")
        rr = np.sqrt(1.0 - zz ** 2)
        points = np.stack([rr * np.cos(pp), rr * np.sin(pp), zz], axis=-1).reshape(-1, 3)
        weights = (wz[:, None] * np.full(phi.shape, 2.0 * math.pi / phi.size)).reshape(-1)
        return points, weights

    def default_base_point(self):
        return np.array([1.0, 0.0, 0.0])


def build_manifold(descriptor, hk_tolerance: Optional[float] = None) -> Manifold:
    """Manifold from a config descriptor (api.models.ManifoldDescriptor or plain dict)."""
    data = descriptor if isinstance(descriptor, dict) else descriptor.model_dump()
    kind = data.get("kind")
    if kind == "circle":
        circumference = data.get("circumference")
        circumference = 1.0 if circumference is None else float(circumference)
        if circumference <= 0:
            raise ConfigError("circle circumference must be positive")
        manifold: Manifold = FlatTorus([[circumference]], kind="circle")
    elif kind == "flat_torus":
        if not data.get("basis"):
            raise ConfigError("flat_torus needs a lattice basis")
        manifold = FlatTorus(data["basis"])
    elif kind == "sphere2":
        manifold = RoundSphere()
    else:
        raise ConfigError(f"Unknown manifold kind: {kind}")
    if hk_tolerance is not None:
        manifold.hk_tolerance = float(hk_tolerance)
    return manifold


def base_point_for(manifold: Manifold, coords: Optional[List[float]]) -> np.ndarray:
    if coords is None:
        return manifold.default_base_point()
    x = np.asarray(coords, dtype=float)
    if x.shape != (manifold.embed_dim,):
        raise ConfigError(f"base point needs {manifold.embed_dim} coordinates, got {len(coords)}")
    return manifold.reduce(x)
