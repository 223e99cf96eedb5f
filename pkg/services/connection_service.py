"""
Connection Service
Metric connections on rank-r bundles over catalog manifolds.

Torus and circle bundles are trivialized once and the coefficients are written
in lattice coordinates u = B^-1 x. The sphere's tangent bundle uses the
longitude/latitude orthonormal frame of one of two rotated charts.

Complex line bundles are rank-2 real bundles with the complex structure J, and
a U(1) form omega acts as Gamma = omega * J.
"""

import logging
import math
from abc import ABC, abstractmethod
from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, validator

from services.geometry_service import FlatTorus, Manifold, RoundSphere
from utils.errors import ChartUndefined, ConfigError

logger = logging.getLogger(__name__)

J = np.array([[0.0, -1.0], [1.0, 0.0]])

POLE_CAP = 0.2
FD_STEP = 1e-5

# Gauss-Legendre nodes on [0, 1] for line integrals without closed form
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)
GL_NODES = 0.5 * (_GL_NODES + 1.0)
GL_WEIGHTS = 0.5 * _GL_WEIGHTS


def skew_part(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a - np.swapaxes(a, -1, -2))


# ---------------------------------------------------------------------------
# U(1) form terms (one component of omega each)
# ---------------------------------------------------------------------------

class U1Term(ABC):
    component: int

    @abstractmethod
    def value(self, u: np.ndarray) -> np.ndarray:
        """omega_component at lattice coordinates u."""

    @abstractmethod
    def derivative(self, u: np.ndarray, k: int) -> np.ndarray:
        """d omega_component / d u^k."""

    @abstractmethod
    def line_integral(self, u0: np.ndarray, du: np.ndarray) -> np.ndarray:
        """Integral of this term along the chord u0 -> u0 + du."""

    @abstractmethod
    def scaled(self, t: float) -> "U1Term":
        pass

    @property
    def is_closed(self) -> bool:
        return False

    def max_derivative(self) -> float:
        return 0.0


class ConstantTerm(U1Term):
    def __init__(self, coefficient: float, component: int):
        self.coefficient = float(coefficient)
        self.component = component

    def value(self, u):
        return np.full(np.shape(u)[:-1], self.coefficient)

    def derivative(self, u, k):
        return np.zeros(np.shape(u)[:-1])

    def line_integral(self, u0, du):
        return self.coefficient * du[..., self.component]

    def scaled(self, t):
        return ConstantTerm(t * self.coefficient, self.component)

    @property
    def is_closed(self):
        return True


class SinTerm(U1Term):
    """amplitude * sin(2 pi u^direction + phase) du^component."""

    def __init__(self, amplitude: float, component: int, direction: int, phase: float = 0.0):
        self.amplitude = float(amplitude)
        self.component = component
        self.direction = direction
        self.phase = float(phase)

    def _arg(self, u):
        return 2.0 * math.pi * u[..., self.direction] + self.phase

    def value(self, u):
        return self.amplitude * np.sin(self._arg(u))

    def derivative(self, u, k):
        if k != self.direction:
            return np.zeros(np.shape(u)[:-1])
        return 2.0 * math.pi * self.amplitude * np.cos(self._arg(u))

    def line_integral(self, u0, du):
        dk = du[..., self.direction]
        mid = 2.0 * math.pi * (u0[..., self.direction] + 0.5 * dk) + self.phase
        # (cos A - cos B) / (2 pi dk) written without cancellation
        return self.amplitude * du[..., self.component] * np.sin(mid) * np.sinc(dk)

    def scaled(self, t):
        return SinTerm(t * self.amplitude, self.component, self.direction, self.phase)

    @property
    def is_closed(self):
        return self.component == self.direction

    def max_derivative(self):
        return 2.0 * math.pi * abs(self.amplitude)


class SinProductTerm(U1Term):
    """amplitude * sin(2 pi u^k) sin(2 pi u^l) du^component."""

    def __init__(self, amplitude: float, component: int, factors: Sequence[int]):
        self.amplitude = float(amplitude)
        self.component = component
        self.k, self.l = int(factors[0]), int(factors[1])

    def value(self, u):
        return self.amplitude * np.sin(2.0 * math.pi * u[..., self.k]) * np.sin(2.0 * math.pi * u[..., self.l])

    def derivative(self, u, k):
        sk = np.sin(2.0 * math.pi * u[..., self.k])
        sl = np.sin(2.0 * math.pi * u[..., self.l])
        ck = np.cos(2.0 * math.pi * u[..., self.k])
        cl = np.cos(2.0 * math.pi * u[..., self.l])
        out = np.zeros(np.shape(u)[:-1])
        if k == self.k:
            out = out + 2.0 * math.pi * self.amplitude * ck * sl
        if k == self.l:
            out = out + 2.0 * math.pi * self.amplitude * sk * cl
        return out

    def line_integral(self, u0, du):
        pts = u0[..., None, :] + GL_NODES[:, None] * du[..., None, :]
        vals = self.value(pts)
        return du[..., self.component] * np.sum(GL_WEIGHTS * vals, axis=-1)

    def scaled(self, t):
        return SinProductTerm(t * self.amplitude, self.component, (self.k, self.l))

    def max_derivative(self):
        return 4.0 * math.pi * abs(self.amplitude)


# ---------------------------------------------------------------------------
# Connections
# ---------------------------------------------------------------------------

class CurvatureForm(BaseModel):
    """F_ij(x) for all coordinate pairs; values[i, j] is an r x r skew matrix."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    point: List[float]
    values: np.ndarray

    def pair(self, i: int, j: int) -> np.ndarray:
        return self.values[i, j]


class MetricConnection(ABC):
    """
    nabla = d + sum_i Gamma_i du^i with skew Gamma_i.

    Transport only needs `contract` (Gamma<v> at ambient x, v); multi-chart
    connections also override the chart hooks.
    """

    rank: int = 2
    is_u1: bool = False
    n_charts: int = 1

    def __init__(self, manifold: Manifold):
        self.manifold = manifold

    @property
    def dim(self) -> int:
        return self.manifold.dim

    @abstractmethod
    def coordinates(self, x: np.ndarray) -> np.ndarray:
        """Chart coordinates in which gamma_coordinates is expressed."""

    @abstractmethod
    def gamma_coordinates(self, c: np.ndarray) -> np.ndarray:
        """(..., n, r, r) coefficient matrices at chart coordinates c."""

    @abstractmethod
    def contract(self, x: np.ndarray, v: np.ndarray, chart: Optional[np.ndarray] = None) -> np.ndarray:
        """Gamma<v> at ambient point x for ambient tangent vector v, shape (..., r, r)."""

    def curvature_coordinates(self, c: np.ndarray) -> Optional[np.ndarray]:
        """Analytic F_ij, or None to fall back on finite differences."""
        return None

    def scaled(self, t: float) -> "MetricConnection":
        raise ConfigError(f"{type(self).__name__} cannot be scaled inside a family")

    # chart hooks (single global chart by default)
    def initial_chart(self, x: np.ndarray) -> np.ndarray:
        return np.zeros(np.shape(x)[0], dtype=int)

    def choose_chart(self, nodes: np.ndarray, current: np.ndarray) -> np.ndarray:
        return current

    def frame_change(self, x: np.ndarray, old: np.ndarray, new: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.eye(self.rank), (np.shape(x)[0], self.rank, self.rank))

    def describe(self) -> str:
        return type(self).__name__


class TrivialConnection(MetricConnection):
    def __init__(self, manifold: Manifold, rank: int = 2):
        super().__init__(manifold)
        self.rank = rank
        self.is_u1 = rank == 2

    def coordinates(self, x):
        if isinstance(self.manifold, FlatTorus):
            return self.manifold.to_lattice(x)
        return SphereLeviCivita.chart_coordinates(x)

    def gamma_coordinates(self, c):
        return np.zeros(np.shape(c)[:-1] + (np.shape(c)[-1], self.rank, self.rank))

    def contract(self, x, v, chart=None):
        return np.zeros(np.shape(x)[:-1] + (self.rank, self.rank))

    def curvature_coordinates(self, c):
        n = np.shape(c)[-1]
        return np.zeros(np.shape(c)[:-1] + (n, n, self.rank, self.rank))

    def scaled(self, t):
        return self

    def describe(self):
        return f"trivial(rank={self.rank})"


class U1FormConnection(MetricConnection):
    """Gamma = omega * J for a 1-form omega on a flat torus (lattice coordinates)."""

    rank = 2
    is_u1 = True

    def __init__(self, manifold: Manifold, terms: List[U1Term]):
        if not isinstance(manifold, FlatTorus):
            raise ConfigError("U(1) forms are defined on circles and flat tori only")
        super().__init__(manifold)
        for term in terms:
            indices = [term.component] + [getattr(term, a) for a in ("direction", "k", "l") if hasattr(term, a)]
            if any(not 0 <= i < manifold.dim for i in indices):
                raise ConfigError(f"form index out of range for a {manifold.dim}-dimensional torus: {indices}")
        self.terms = list(terms)

    @property
    def is_flat(self) -> bool:
        return all(term.is_closed for term in self.terms)

    def form(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        omega = np.zeros(u.shape)
        for term in self.terms:
            omega[..., term.component] += term.value(u)
        return omega

    def coordinates(self, x):
        return self.manifold.to_lattice(x)

    def gamma_coordinates(self, c):
        return self.form(c)[..., None, None] * J

    def contract(self, x, v, chart=None):
        u = self.manifold.to_lattice(x)
        du = self.manifold.to_lattice(v)
        coeff = np.sum(self.form(u) * du, axis=-1)
        return coeff[..., None, None] * J

    def form_curvature(self, u: np.ndarray) -> np.ndarray:
        """Scalar F_ij = d_i omega_j - d_j omega_i; closed terms contribute exactly zero."""
        u = np.asarray(u, dtype=float)
        n = self.dim
        F = np.zeros(u.shape[:-1] + (n, n))
        for term in self.terms:
            if term.is_closed:
                continue
            j = term.component
            for i in range(n):
                if i == j:
                    continue
                d = term.derivative(u, i)
                F[..., i, j] += d
                F[..., j, i] -= d
        return F

    def curvature_coordinates(self, c):
        return self.form_curvature(c)[..., None, None] * J

    def line_integral(self, start: np.ndarray, end: np.ndarray) -> np.ndarray:
        """Integral of omega along the lifted chord start -> end (ambient coordinates)."""
        u0 = self.manifold.to_lattice(start)
        du = self.manifold.to_lattice(end) - u0
        total = np.zeros(np.shape(u0)[:-1])
        for term in self.terms:
            total = total + term.line_integral(u0, du)
        return total

    def scaled(self, t):
        return U1FormConnection(self.manifold, [term.scaled(t) for term in self.terms])

    def describe(self):
        return f"u1_form({len(self.terms)} terms)"


class ConstantMatrixConnection(MetricConnection):
    """Constant skew Gamma_i of any rank on a flat torus; F_ij = [Gamma_i, Gamma_j]."""

    def __init__(self, manifold: Manifold, matrices: np.ndarray):
        if not isinstance(manifold, FlatTorus):
            raise ConfigError("constant connections are defined on circles and flat tori only")
        super().__init__(manifold)
        matrices = np.asarray(matrices, dtype=float)
        if matrices.ndim != 3 or matrices.shape[0] != manifold.dim or matrices.shape[1] != matrices.shape[2]:
            raise ConfigError(f"constant connection needs {manifold.dim} square matrices, got shape {matrices.shape}")
        if np.max(np.abs(matrices + np.swapaxes(matrices, 1, 2))) > 1e-12:
            raise ConfigError("constant connection matrices must be skew-symmetric")
        self.matrices = matrices
        self.rank = matrices.shape[1]
        self.is_u1 = self.rank == 2

    def coordinates(self, x):
        return self.manifold.to_lattice(x)

    def gamma_coordinates(self, c):
        return np.broadcast_to(self.matrices, np.shape(c)[:-1] + self.matrices.shape).copy()

    def contract(self, x, v, chart=None):
        du = self.manifold.to_lattice(v)
        return np.einsum("...i,irs->...rs", du, self.matrices)

    def curvature_coordinates(self, c):
        G = self.matrices
        F = np.einsum("irs,jst->ijrt", G, G) - np.einsum("jrs,ist->ijrt", G, G)
        return np.broadcast_to(F, np.shape(c)[:-1] + F.shape).copy()

    def scaled(self, t):
        return ConstantMatrixConnection(self.manifold, t * self.matrices)

    def describe(self):
        return f"constant(rank={self.rank})"


class SphereLeviCivita(MetricConnection):
    """
    Levi-Civita connection of the unit sphere in the orthonormal frame
    (e_theta, e_phi) of a chart: Gamma_theta = 0, Gamma_phi = cos(theta) J.

    Chart 0 is the standard one; chart 1 uses y = (x2, x3, x1) so its poles
    sit on the x-axis. A chart is abandoned within POLE_CAP of its poles.
    """

    rank = 2
    is_u1 = True
    n_charts = 2
    ROTATIONS = np.array([
        np.eye(3),
        [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]],
    ])

    def __init__(self, manifold: Manifold):
        if not isinstance(manifold, RoundSphere):
            raise ConfigError("levi_civita is only available on sphere2")
        super().__init__(manifold)
        self._min_clearance = math.sin(POLE_CAP)

    def _rotate(self, x, chart):
        chart = np.broadcast_to(np.asarray(chart, dtype=int), np.shape(x)[:-1])
        return np.einsum("...ij,...j->...i", self.ROTATIONS[chart], x)

    @staticmethod
    def chart_coordinates(x):
        x = np.asarray(x, dtype=float)
        theta = np.arctan2(np.hypot(x[..., 0], x[..., 1]), x[..., 2])
        phi = np.arctan2(x[..., 1], x[..., 0])
        return np.stack([theta, phi], axis=-1)

    def coordinates(self, x):
        return self.chart_coordinates(x)

    def gamma_coordinates(self, c):
        c = np.asarray(c, dtype=float)
        out = np.zeros(c.shape[:-1] + (2, 2, 2))
        out[..., 1, :, :] = np.cos(c[..., 0])[..., None, None] * J
        return out

    def curvature_coordinates(self, c):
        c = np.asarray(c, dtype=float)
        s = np.sin(c[..., 0])[..., None, None]
        out = np.zeros(c.shape[:-1] + (2, 2, 2, 2))
        out[..., 0, 1, :, :] = -s * J
        out[..., 1, 0, :, :] = s * J
        return out

    def contract(self, x, v, chart=None):
        if chart is None:
            chart = np.zeros(np.shape(x)[:-1], dtype=int)
        y = self._rotate(x, chart)
        w = self._rotate(v, chart)
        rho2 = y[..., 0] ** 2 + y[..., 1] ** 2
        if np.any(rho2 < 1e-18):
            raise ChartUndefined("sphere frame evaluated at a chart pole")
        phi_dot = (y[..., 0] * w[..., 1] - y[..., 1] * w[..., 0]) / rho2
        return (y[..., 2] * phi_dot)[..., None, None] * J

    def clearance(self, x, chart):
        """sin(theta) in the given chart: distance proxy to that chart's poles."""
        y = self._rotate(x, chart)
        return np.hypot(y[..., 0], y[..., 1])

    def initial_chart(self, x):
        x = np.atleast_2d(x)
        return np.where(self.clearance(x, 0) >= self._min_clearance, 0, 1)

    def choose_chart(self, nodes, current):
        """Keep the current chart unless a node on the segment enters its polar cap."""
        k = nodes.shape[1]
        cur = np.repeat(current[:, None], k, axis=1)
        keep = np.min(self.clearance(nodes, cur), axis=1)
        other = 1 - current
        alt = np.min(self.clearance(nodes, np.repeat(other[:, None], k, axis=1)), axis=1)
        chosen = np.where((keep >= self._min_clearance) | (keep >= alt), current, other)
        best = np.maximum(keep, alt)
        if np.any(best < 1e-6):
            raise ChartUndefined("segment passes through the poles of both charts")
        return chosen

    def frame(self, x, chart):
        """(..., 3, 2) ambient frame (e_theta, e_phi) of the chart."""
        chart = np.broadcast_to(np.asarray(chart, dtype=int), np.shape(x)[:-1])
        y = self._rotate(x, chart)
        rho = np.hypot(y[..., 0], y[..., 1])
        if np.any(rho < 1e-12):
            raise ChartUndefined("frame requested at a chart pole")
        cphi, sphi = y[..., 0] / rho, y[..., 1] / rho
        e_theta = np.stack([y[..., 2] * cphi, y[..., 2] * sphi, -rho], axis=-1)
        e_phi = np.stack([-sphi, cphi, np.zeros_like(rho)], axis=-1)
        R_T = np.swapaxes(self.ROTATIONS[chart], -1, -2)
        return np.stack([
            np.einsum("...ij,...j->...i", R_T, e_theta),
            np.einsum("...ij,...j->...i", R_T, e_phi),
        ], axis=-1)

    def frame_change(self, x, old, new):
        """Matrix taking frame components in chart `old` to chart `new` at x."""
        return np.einsum("...ia,...ib->...ab", self.frame(x, new), self.frame(x, old))

    def describe(self):
        return "levi_civita(sphere2)"


class SumConnection(MetricConnection):
    """Pointwise sum of single-chart connections of equal rank."""

    def __init__(self, manifold: Manifold, parts: List[MetricConnection]):
        super().__init__(manifold)
        ranks = {p.rank for p in parts}
        if len(ranks) != 1:
            raise ConfigError(f"summands have different ranks: {sorted(ranks)}")
        if any(p.n_charts > 1 for p in parts):
            raise ConfigError("multi-chart connections cannot be summed")
        self.parts = parts
        self.rank = ranks.pop()
        self.is_u1 = all(p.is_u1 for p in parts)

    def coordinates(self, x):
        return self.parts[0].coordinates(x)

    def gamma_coordinates(self, c):
        return sum(p.gamma_coordinates(c) for p in self.parts)

    def contract(self, x, v, chart=None):
        return sum(p.contract(x, v, chart) for p in self.parts)

    def curvature_coordinates(self, c):
        # the commutator part of F is not additive
        return None

    def scaled(self, t):
        return SumConnection(self.manifold, [p.scaled(t) for p in self.parts])


def add_connections(a: MetricConnection, b: MetricConnection) -> MetricConnection:
    if isinstance(a, TrivialConnection) and a.rank == b.rank:
        return b
    if isinstance(b, TrivialConnection) and a.rank == b.rank:
        return a
    if isinstance(a, U1FormConnection) and isinstance(b, U1FormConnection):
        return U1FormConnection(a.manifold, a.terms + b.terms)
    if isinstance(a, ConstantMatrixConnection) and isinstance(b, ConstantMatrixConnection):
        return ConstantMatrixConnection(a.manifold, a.matrices + b.matrices)
    return SumConnection(a.manifold, [a, b])


# ---------------------------------------------------------------------------
# Flat U(1) forms
# ---------------------------------------------------------------------------

class FlatU1Form(BaseModel):
    """Point of the Jacobian torus: periods theta_j per lattice generator, plus exact terms."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    periods: List[float] = Field(..., description="Holonomy angle (turns) of each generator")
    gauge_terms: List[SinTerm] = Field(default_factory=list)

    @validator('periods')
    def reduce_periods(cls, v):
        reduced = []
        for theta in v:
            r = float(theta) % 1.0
            reduced.append(0.0 if r >= 1.0 else r)
        return reduced

    def holonomy_angle(self, winding) -> float:
        return flat_u1_holonomy_angle(self, winding)

    def to_connection(self, manifold: Manifold) -> U1FormConnection:
        if not isinstance(manifold, FlatTorus) or len(self.periods) != manifold.dim:
            raise ConfigError(f"flat_u1 needs one period per lattice generator ({manifold.dim})")
        # omega = -2 pi theta du integrates to -2 pi theta nu; holonomy rotates by +2 pi theta nu
        terms: List[U1Term] = [ConstantTerm(-2.0 * math.pi * theta, j) for j, theta in enumerate(self.periods)]
        return U1FormConnection(manifold, terms + list(self.gauge_terms))


def flat_u1_holonomy_angle(form: FlatU1Form, winding) -> float:
    """theta_nu = sum_j nu_j theta_j mod 1, in turns."""
    nu = np.atleast_1d(np.asarray(winding, dtype=np.int64))
    angle = float(np.dot(nu, np.asarray(form.periods, dtype=float))) % 1.0
    return 0.0 if angle >= 1.0 else angle


def flat_angles(periods: Sequence[float], windings: np.ndarray) -> np.ndarray:
    """Vectorised theta_nu for an array of winding vectors (..., n)."""
    angles = np.mod(np.asarray(windings, dtype=float) @ np.asarray(periods, dtype=float), 1.0)
    return np.where(angles >= 1.0, 0.0, angles)


# ---------------------------------------------------------------------------
# Families
# ---------------------------------------------------------------------------

class ConnectionFamily:
    """member(t) = base + t * delta; the limit member is t = 0."""

    def __init__(self, manifold: Manifold, base: MetricConnection, delta: MetricConnection,
                 schedule: Sequence[float], base_periods: Optional[List[float]] = None,
                 delta_periods: Optional[List[float]] = None):
        self.manifold = manifold
        self.base = base
        self.delta = delta
        self.schedule = [float(t) for t in schedule]
        self.base_periods = base_periods
        self.delta_periods = delta_periods

    @property
    def rank(self) -> int:
        return self.base.rank

    @property
    def is_flat_u1(self) -> bool:
        return self.base_periods is not None and self.delta_periods is not None

    def member(self, t: float) -> MetricConnection:
        if t == 0.0:
            return self.base
        return add_connections(self.base, self.delta.scaled(t))

    def limit(self) -> MetricConnection:
        return self.base

    def periods_at(self, t: float) -> List[float]:
        """Flat periods of member(t) in turns, reduced mod 1."""
        if not self.is_flat_u1:
            raise ConfigError("periods are only defined for families of flat U(1) connections")
        p = np.mod(np.asarray(self.base_periods) + t * np.asarray(self.delta_periods), 1.0)
        return [0.0 if x >= 1.0 else float(x) for x in p]

    def c0_distance(self, t: float, grid: np.ndarray) -> float:
        """max over grid points of the Frobenius norm of Gamma^t - Gamma^0."""
        base = self.base.gamma_coordinates(self.base.coordinates(grid))
        member = self.member(t)
        diff = member.gamma_coordinates(member.coordinates(grid)) - base
        norms = np.sqrt(np.sum(diff ** 2, axis=(-3, -2, -1)))
        return float(np.max(norms))


# ---------------------------------------------------------------------------
# Module-level operations
# ---------------------------------------------------------------------------

def evaluate_gamma(connection: MetricConnection, x) -> np.ndarray:
    """Gamma_i(x) for each chart coordinate direction, shape (n, r, r), skew by construction."""
    x = np.asarray(x, dtype=float)
    if isinstance(connection, SphereLeviCivita) and np.hypot(x[0], x[1]) < 1e-9:
        raise ChartUndefined("longitude/latitude frame is undefined at the poles; rotate the chart")
    return skew_part(connection.gamma_coordinates(connection.coordinates(x)))


def curvature_finite_difference(connection: MetricConnection, x, h: float = FD_STEP) -> np.ndarray:
    """F_ij = d_i G_j - d_j G_i + [G_i, G_j] with central differences in chart coordinates."""
    c = connection.coordinates(np.asarray(x, dtype=float))
    n = c.shape[-1]
    G = connection.gamma_coordinates(c)
    dG = []
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        dG.append((connection.gamma_coordinates(c + e) - connection.gamma_coordinates(c - e)) / (2.0 * h))
    dG = np.stack(dG)  # (deriv, component, r, r)
    F = dG - np.swapaxes(dG, 0, 1)
    F = F + np.einsum("irs,jst->ijrt", G, G) - np.einsum("jrs,ist->ijrt", G, G)
    return F


def curvature(connection: MetricConnection, x) -> CurvatureForm:
    x = np.asarray(x, dtype=float)
    analytic = connection.curvature_coordinates(connection.coordinates(x))
    values = analytic if analytic is not None else curvature_finite_difference(connection, x)
    return CurvatureForm(point=[float(c) for c in x], values=values)


def _u1_descriptor_terms(data: dict, manifold: FlatTorus) -> List[U1Term]:
    n = manifold.dim
    kind = data["type"]
    terms: List[U1Term] = []
    if kind == "flat_u1":
        periods = data.get("periods")
        if periods is None:
            raise ConfigError("flat_u1 needs `periods`")
        terms += FlatU1Form(periods=periods).to_connection(manifold).terms
    elif kind == "sin_form":
        component = data.get("component")
        if component is None:
            component = 1 if n >= 2 else 0
        direction = data.get("direction") or 0
        terms.append(SinTerm(data.get("amplitude", 1.0), component, direction, data.get("phase", 0.0)))
        if data.get("periods") is not None:
            terms += FlatU1Form(periods=data["periods"]).to_connection(manifold).terms
    elif kind == "sin_product":
        factors = data.get("factors") or [0, min(1, n - 1)]
        if len(factors) != 2:
            raise ConfigError("sin_product needs exactly two factor coordinates")
        component = data.get("component")
        if component is None:
            component = 1 if n >= 2 else 0
        terms.append(SinProductTerm(data.get("amplitude", 1.0), component, factors))
    gauge = data.get("gauge")
    if gauge:
        b, k = gauge["amplitude"], gauge.get("direction", 0)
        # d(b sin 2 pi u^k) = 2 pi b cos(2 pi u^k) du^k
        terms.append(SinTerm(2.0 * math.pi * b, k, k, math.pi / 2.0))
    return terms


def build_connection(descriptor, manifold: Manifold) -> MetricConnection:
    """MetricConnection from a config descriptor (api.models.ConnectionDescriptor or dict)."""
    data = descriptor if isinstance(descriptor, dict) else descriptor.model_dump()
    kind = data.get("type")
    if kind == "trivial":
        return TrivialConnection(manifold, data.get("rank") or 2)
    if kind == "levi_civita":
        return SphereLeviCivita(manifold)
    if kind in ("flat_u1", "sin_form", "sin_product"):
        if not isinstance(manifold, FlatTorus):
            raise ConfigError(f"{kind} is defined on circles and flat tori only")
        return U1FormConnection(manifold, _u1_descriptor_terms(data, manifold))
    if kind == "constant":
        if data.get("matrices") is None:
            raise ConfigError("constant connection needs `matrices`")
        return ConstantMatrixConnection(manifold, data["matrices"])
    if kind == "sum":
        parts = [build_connection(t, manifold) for t in (data.get("terms") or [])]
        if not parts:
            raise ConfigError("sum connection needs at least one term")
        result = parts[0]
        for part in parts[1:]:
            result = add_connections(result, part)
        return result
    if kind == "family":
        raise ConfigError("a family descriptor was given where a single connection is expected")
    raise ConfigError(f"Unknown connection type: {kind}")


def _flat_periods(data: Optional[dict], manifold: Manifold) -> Optional[List[float]]:
    if data is None:
        return None
    if data.get("type") == "flat_u1" and not data.get("gauge"):
        return [float(p) for p in data["periods"]]
    if data.get("type") == "trivial" and isinstance(manifold, FlatTorus) and (data.get("rank") or 2) == 2:
        return [0.0] * manifold.dim
    return None


def build_family(descriptor, manifold: Manifold) -> ConnectionFamily:
    data = descriptor if isinstance(descriptor, dict) else descriptor.model_dump()
    if data.get("type") != "family":
        # a plain connection is the constant family
        connection = build_connection(data, manifold)
        periods = _flat_periods(data, manifold)
        return ConnectionFamily(manifold, connection, TrivialConnection(manifold, connection.rank), [0.0],
                                base_periods=periods, delta_periods=[0.0] * len(periods) if periods else None)
    if data.get("base") is None or data.get("delta") is None or not data.get("schedule"):
        raise ConfigError("family needs `base`, `delta` and `schedule`")
    base = build_connection(data["base"], manifold)
    delta = build_connection(data["delta"], manifold)
    if base.rank != delta.rank:
        raise ConfigError(f"family base rank {base.rank} differs from delta rank {delta.rank}")
    family = ConnectionFamily(manifold, base, delta, data["schedule"],
                              base_periods=_flat_periods(data["base"], manifold),
                              delta_periods=_flat_periods(data["delta"], manifold))
    logger.info(f"Built family {base.describe()} + t*{delta.describe()} over {len(family.schedule)} members")
    return family
