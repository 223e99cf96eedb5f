"""
Transport Service
Parallel transport of orthonormal frames along piecewise geodesic loops.

Conventions:
- Along a segment the frame solves Q' = -Gamma<gamma'> Q (classical RK4),
  followed by polar re-orthonormalization.
- Transports compose new @ old, so hol(g1 * g2) = hol(g2) @ hol(g1).
- U(1) angles are reported in turns, angle = atan2(Q[1,0], Q[0,0]) / 2 pi mod 1.
"""

import logging
import math
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, Field

from services.bridge_service import GeodesicLoopBatch, LoopBatch, PiecewiseGeodesicLoop, build_loops
from services.connection_service import J, MetricConnection, TrivialConnection, U1FormConnection
from services.geometry_service import FlatTorus, GeodesicSegment
from utils.errors import NotContractible, UnsupportedTransport

logger = logging.getLogger(__name__)

MIN_STEPS = 8
STEP_LENGTH = 0.01
ORTHOGONALITY_TOLERANCE = 1e-9


class Frame(BaseModel):
    """Orthonormal frame: columns are the transported basis vectors."""
    matrix: List[List[float]]

    @classmethod
    def identity(cls, rank: int) -> "Frame":
        return cls(matrix=np.eye(rank).tolist())

    def as_array(self) -> np.ndarray:
        return np.asarray(self.matrix, dtype=float)


class HolonomyElement(BaseModel):
    matrix: List[List[float]]
    angle: Optional[float] = Field(None, description="U(1) view in turns, [0, 1)")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.matrix, dtype=float)


class HolonomyBatch:
    """Holonomies of a loop batch with their weights and (torus) winding classes."""

    def __init__(self, matrices: np.ndarray, weights: np.ndarray, windings: Optional[np.ndarray] = None,
                 is_u1: bool = False):
        self.matrices = matrices
        self.weights = weights
        self.windings = windings
        self.is_u1 = is_u1 and matrices.shape[-1] == 2

    @property
    def size(self) -> int:
        return self.matrices.shape[0]

    @property
    def rank(self) -> int:
        return self.matrices.shape[-1]

    def angles(self) -> np.ndarray:
        return rotation_angle(self.matrices)

    def orthogonality_defect(self) -> float:
        return orthogonality_defect(self.matrices)

    def element(self, i: int) -> HolonomyElement:
        angle = float(self.angles()[i]) if self.is_u1 else None
        return HolonomyElement(matrix=self.matrices[i].tolist(), angle=angle)

    @classmethod
    def concat(cls, batches: List["HolonomyBatch"]) -> "HolonomyBatch":
        windings = None
        if all(b.windings is not None for b in batches):
            windings = np.concatenate([b.windings for b in batches])
        return cls(np.concatenate([b.matrices for b in batches]),
                   np.concatenate([b.weights for b in batches]), windings, batches[0].is_u1)


def rotation(angle_rad: np.ndarray) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.stack([np.stack([c, -s], axis=-1), np.stack([s, c], axis=-1)], axis=-2)


def rotation_angle(Q: np.ndarray) -> np.ndarray:
    turns = np.mod(np.arctan2(Q[..., 1, 0], Q[..., 0, 0]) / (2.0 * math.pi), 1.0)
    return np.where(turns >= 1.0, 0.0, turns)


def polar(Q: np.ndarray) -> np.ndarray:
    """Nearest orthogonal matrix (Frobenius) via batched SVD."""
    U, _, Vt = np.linalg.svd(Q)
    return U @ Vt


def orthogonality_defect(Q: np.ndarray) -> float:
    eye = np.eye(Q.shape[-1])
    gram = np.swapaxes(Q, -1, -2) @ Q
    return float(np.max(np.linalg.norm(gram - eye, axis=(-2, -1)))) if Q.size else 0.0


def default_steps(max_segment_length: float) -> int:
    return max(MIN_STEPS, int(math.ceil(max_segment_length / STEP_LENGTH)))


def _rk4_segment(connection: MetricConnection, manifold, a: np.ndarray, b: np.ndarray,
                 Q: np.ndarray, steps: int, chart: np.ndarray) -> np.ndarray:
    h = 1.0 / steps

    def rhs(t, Y):
        x = manifold.segment_point(a, b, t)
        v = manifold.segment_velocity(a, b, t)
        return -connection.contract(x, v, chart) @ Y

    for k in range(steps):
        t = k * h
        k1 = rhs(t, Q)
        k2 = rhs(t + 0.5 * h, Q + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, Q + 0.5 * h * k2)
        k4 = rhs(t + h, Q + h * k3)
        Q = Q + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return polar(Q)


def _switch_chart(connection: MetricConnection, manifold, a, b, Q, steps, chart):
    if connection.n_charts == 1:
        return Q, chart
    t = np.linspace(0.0, 1.0, 2 * steps + 1)
    nodes = np.stack([manifold.segment_point(a, b, ti) for ti in t], axis=1)
    new_chart = connection.choose_chart(nodes, chart)
    moved = new_chart != chart
    if np.any(moved):
        M = connection.frame_change(a[moved], chart[moved], new_chart[moved])
        Q = Q.copy()
        Q[moved] = M @ Q[moved]
    return Q, new_chart


def transport_segments(connection: MetricConnection, a: np.ndarray, b: np.ndarray, Q: np.ndarray,
                       steps: int, chart: Optional[np.ndarray] = None):
    """Batched transport along lifted segments a -> b; returns (Q, chart)."""
    manifold = connection.manifold
    if chart is None:
        chart = connection.initial_chart(a)
    Q, chart = _switch_chart(connection, manifold, a, b, Q, steps, chart)
    return _rk4_segment(connection, manifold, a, b, Q, steps, chart), chart


def transport_segment(connection: MetricConnection, segment: GeodesicSegment, frame: Frame,
                      steps: int) -> Frame:
    """Transport `frame` from segment.p to segment.q along the minimal geodesic."""
    if steps < 1:
        raise ValueError("steps must be at least 1")
    a = np.asarray(segment.start, dtype=float)[None]
    b = np.asarray(segment.end, dtype=float)[None]
    Q0 = frame.as_array()[None]
    chart = connection.initial_chart(a)
    Q, chart = transport_segments(connection, a, b, Q0, steps, chart)
    if connection.n_charts > 1:
        Q = connection.frame_change(b, chart, connection.initial_chart(a)) @ Q
    return Frame(matrix=Q[0].tolist())


def _holonomy_group(connection: MetricConnection, lifted: np.ndarray, steps: int) -> np.ndarray:
    n = lifted.shape[0]
    r = connection.rank
    Q = np.broadcast_to(np.eye(r), (n, r, r)).copy()
    chart0 = connection.initial_chart(lifted[:, 0])
    chart = chart0.copy()
    for i in range(lifted.shape[1] - 1):
        Q, chart = transport_segments(connection, lifted[:, i], lifted[:, i + 1], Q, steps, chart)
    if connection.n_charts > 1:
        moved = chart != chart0
        if np.any(moved):
            Q[moved] = connection.frame_change(lifted[moved, -1], chart[moved], chart0[moved]) @ Q[moved]
    return Q


def holonomy(connection: MetricConnection, loops: GeodesicLoopBatch,
             steps_per_segment: Optional[int] = None) -> HolonomyBatch:
    """
    //_1 along each loop, starting from the identity frame.

    Without a fixed step count each loop uses max(8, ceil(longest segment / 0.01))
    steps on every segment; loops are grouped by step count.
    """
    n = loops.size
    r = connection.rank
    matrices = np.empty((n, r, r))
    if steps_per_segment is not None:
        steps = np.full(n, int(steps_per_segment))
    else:
        longest = np.max(loops.segment_lengths(), axis=1) if n else np.zeros(0)
        steps = np.array([default_steps(float(length)) for length in longest], dtype=int)
    for s in np.unique(steps):
        idx = np.nonzero(steps == s)[0]
        matrices[idx] = _holonomy_group(connection, loops.lifted[idx], int(s))
    windings = loops.windings if isinstance(connection.manifold, FlatTorus) else None
    result = HolonomyBatch(matrices, loops.weights, windings, connection.is_u1)
    defect = result.orthogonality_defect()
    if defect >= ORTHOGONALITY_TOLERANCE:
        logger.warning(f"Holonomy orthogonality defect {defect:.3g} above {ORTHOGONALITY_TOLERANCE}")
    return result


def holonomy_of_loop(connection: MetricConnection, loop: PiecewiseGeodesicLoop,
                     steps_per_segment: Optional[int] = None) -> HolonomyElement:
    return holonomy(connection, loop.as_batch(connection.manifold), steps_per_segment).element(0)


def u1_line_integrals(connection: MetricConnection, loops: GeodesicLoopBatch) -> np.ndarray:
    """Closed-form / Gauss-Legendre integral of omega around each loop."""
    if isinstance(connection, TrivialConnection) and connection.rank == 2:
        return np.zeros(loops.size)
    if not isinstance(connection, U1FormConnection):
        raise UnsupportedTransport(
            f"exact-u1 transport needs a U(1) form on a circle or flat torus, got {connection.describe()}"
        )
    a, b = loops.lifted[:, :-1], loops.lifted[:, 1:]
    return np.sum(connection.line_integral(a, b), axis=1)


def holonomy_u1_exact(connection: MetricConnection, loops: GeodesicLoopBatch) -> HolonomyBatch:
    """//_1 = exp(-J * integral of omega), per segment exact."""
    angle = -u1_line_integrals(connection, loops)
    return HolonomyBatch(rotation(angle), loops.weights, loops.windings, True)


def _cone_integral(connection: U1FormConnection, lifted: np.ndarray, resolution: int) -> float:
    """
    Integral of F over the cone H(sigma, tau) = x0 + sigma (gamma(tau) - x0),
    Gauss-Legendre in sigma and on every segment in tau.
    """
    if connection.dim < 2:
        return 0.0
    manifold = connection.manifold
    nodes, weights = np.polynomial.legendre.leggauss(resolution)
    nodes = 0.5 * (nodes + 1.0)
    weights = 0.5 * weights
    u = manifold.to_lattice(lifted)
    u0 = u[0]
    a, b = u[:-1], u[1:]                                    # (m, n)
    gamma = a[:, None, :] + nodes[None, :, None] * (b - a)[:, None, :]   # (m, T, n)
    radial = gamma - u0                                     # d H / d sigma
    # segment-local parameter t: d gamma / dt = b - a
    tangent = (b - a)[:, None, :]
    H = u0 + nodes[:, None, None, None] * radial[None]      # (S, m, T, n)
    F = connection.form_curvature(H)                        # (S, m, T, n, n)
    dtau = np.broadcast_to(nodes[:, None, None, None] * tangent[None], H.shape)
    integrand = np.einsum("smtij,mti,smtj->smt", F, radial, dtau)
    return float(np.einsum("s,t,smt->", weights, weights, integrand))


def stokes_check(connection: MetricConnection, loop: PiecewiseGeodesicLoop, resolution: int = 32,
                 transport: str = "exact-u1", steps_per_segment: Optional[int] = None) -> float:
    """
    |hol(loop) - exp(-J * integral of F over the cone filling)| in Frobenius norm,
    for a contractible loop on a flat torus.
    """
    manifold = connection.manifold
    if not isinstance(manifold, FlatTorus):
        raise UnsupportedTransport("stokes_check fills loops by cones in the universal cover of a torus")
    batch = loop.as_batch(manifold)
    nu = batch.windings[0]
    if np.any(nu != 0):
        raise NotContractible(f"loop has winding {nu.tolist()}")
    if isinstance(connection, TrivialConnection):
        return 0.0
    if not isinstance(connection, U1FormConnection):
        raise UnsupportedTransport("stokes_check compares U(1) holonomy with exp of the curvature integral")
    if transport == "exact-u1":
        Q = holonomy_u1_exact(connection, batch).matrices[0]
    else:
        Q = holonomy(connection, batch, steps_per_segment).matrices[0]
    flux = _cone_integral(connection, loop.lifted, resolution)
    return float(np.linalg.norm(Q - rotation(-flux)))


def scale_loops(loops: GeodesicLoopBatch, factor: float) -> GeodesicLoopBatch:
    """Dilate lifted loops about their base point (contractible torus loops only)."""
    base = loops.lifted[:, :1]
    return GeodesicLoopBatch(loops.manifold, base + factor * (loops.lifted - base), loops.weights)


def _ambient_gammas(connection: MetricConnection, x: np.ndarray) -> np.ndarray:
    """(..., n, r, r): Gamma contracted with each ambient unit vector."""
    n = x.shape[-1]
    return np.stack([connection.contract(x, np.broadcast_to(np.eye(n)[a], x.shape)) for a in range(n)], axis=-3)


def _divergence(connection: MetricConnection, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    n = x.shape[-1]
    total = 0.0
    for a in range(n):
        e = np.eye(n)[a]
        ev = np.broadcast_to(e, x.shape)
        total = total + (connection.contract(x + h * e, ev) - connection.contract(x - h * e, ev)) / (2.0 * h)
    return total


def refine_bridge(lifted: np.ndarray, m: int, substeps: int, rng: np.random.Generator) -> np.ndarray:
    """Fill each partition interval with a Gaussian bridge of `substeps` increments (variance 2/(m K))."""
    n_loops, _, d = lifted.shape
    K = substeps
    a, b = lifted[:, :-1], lifted[:, 1:]
    steps = rng.normal(0.0, math.sqrt(2.0 / (m * K)), size=(n_loops, m, K, d))
    walk = np.cumsum(steps, axis=2)
    frac = (np.arange(1, K + 1) / K)[None, None, :, None]
    bridge = walk - frac * walk[:, :, -1:, :] + frac * (b - a)[:, :, None, :]
    path = a[:, :, None, :] + bridge
    fine = np.concatenate([lifted[:, :1], path.reshape(n_loops, m * K, d)], axis=1)
    return fine


def ito_euler_path(connection: MetricConnection, path: np.ndarray, correction: str = "literal") -> np.ndarray:
    """
    Euler-Maruyama for the Ito form of the transport equation along a fine
    lifted path of unit duration; returns the endpoint frames before projection.

    literal:  dA = -Gamma_a A dX^a - 2 Gamma_a Gamma_a A ds
    standard: dA = -Gamma_a A dX^a + (Gamma_a Gamma_a - d_a Gamma_a) A ds
    """
    if not isinstance(connection.manifold, FlatTorus):
        raise UnsupportedTransport("the Ito scheme needs globally defined coefficients (flat torus)")
    if correction not in ("literal", "standard"):
        raise ValueError(f"Unknown Ito correction: {correction}")
    ds = 1.0 / (path.shape[1] - 1)
    n_loops = path.shape[0]
    r = connection.rank
    A = np.broadcast_to(np.eye(r), (n_loops, r, r)).copy()
    for k in range(path.shape[1] - 1):
        x = path[:, k]
        dX = path[:, k + 1] - x
        G = _ambient_gammas(connection, x)
        GG = np.einsum("nars,nast->nrt", G, G)
        drift = -2.0 * GG if correction == "literal" else GG - _divergence(connection, x)
        A = A - connection.contract(x, dX) @ A + ds * drift @ A
    return A


def transport_ito_euler(connection: MetricConnection, batch: LoopBatch, substeps: int,
                        rng: np.random.Generator, correction: str = "literal") -> HolonomyBatch:
    """Ito holonomy along the sampled bridge refined to `substeps` increments per interval, polar-projected."""
    if not isinstance(connection.manifold, FlatTorus):
        raise UnsupportedTransport("the Ito scheme needs globally defined coefficients (flat torus)")
    loops = build_loops(batch)
    path = refine_bridge(loops.lifted, batch.m, substeps, rng)
    A = ito_euler_path(connection, path, correction)
    return HolonomyBatch(polar(A), loops.weights, loops.windings, connection.is_u1)
