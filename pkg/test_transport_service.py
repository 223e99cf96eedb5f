import math
import os
import sys

import numpy as np
import pytest
from scipy.linalg import expm

# Add the project root to the path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from services.bridge_service import (
    GeodesicLoopBatch, LoopBatch, PiecewiseGeodesicLoop, build_loops, sample_admissible,
)
from services.connection_service import J, build_connection, flat_angles
from services.geometry_service import build_manifold
from services.selftest_service import octant_loop
from services.transport_service import (
    Frame, holonomy, holonomy_of_loop, holonomy_u1_exact, ito_euler_path, polar, refine_bridge, rotation,
    rotation_angle, scale_loops, stokes_check, transport_ito_euler, transport_segment, u1_line_integrals,
)
from utils.errors import NotContractible, UnsupportedTransport


def circular_gap(a, b):
    d = np.mod(np.asarray(a) - np.asarray(b), 1.0)
    return np.minimum(d, 1.0 - d)


L_X = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
L_Y = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])


def square_loop(corner, side, pieces=2):
    corners = np.array(corner) + side * np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    nodes = []
    for i in range(4):
        a, b = corners[i], corners[(i + 1) % 4]
        for k in range(pieces):
            nodes.append(a + (b - a) * k / pieces)
    nodes.append(corners[0])
    return PiecewiseGeodesicLoop(lifted=np.array(nodes))


class TestTransportService:
    """Frame transport, holonomy along loops, the Stokes check and the Ito scheme"""

    def setup_method(self):
        self.circle = build_manifold({"kind": "circle", "circumference": 1.0})
        self.torus = build_manifold({"kind": "flat_torus", "basis": [[1.0, 0.0], [0.0, 1.0]]})
        self.big = build_manifold({"kind": "flat_torus", "basis": [[4.0, 0.0], [0.0, 4.0]]})
        self.sphere = build_manifold({"kind": "sphere2"})
        self.rng = np.random.default_rng(5)

    def _loops(self, m=32, size=100):
        batch = sample_admissible(self.big, np.zeros(2), m, self.rng, size)
        return build_loops(batch)

    def test_trivial_keeps_frame(self):
        connection = build_connection({"type": "trivial"}, self.circle)
        segment = self.circle.geodesic_segment(np.array([0.1]), np.array([0.3]))
        frame = Frame(matrix=rotation(np.array(0.7)).tolist())
        out = transport_segment(connection, segment, frame, steps=10)
        assert np.allclose(out.as_array(), frame.as_array(), atol=1e-14)

    def test_constant_coefficient_segment(self):
        c = 10.0
        connection = build_connection({"type": "constant", "matrices": [(c * J).tolist()]}, self.circle)
        segment = self.circle.geodesic_segment(np.array([0.0]), np.array([0.2]))
        out = transport_segment(connection, segment, Frame.identity(2), steps=100)
        assert np.allclose(out.as_array(), rotation(np.array(-c * 0.2)), atol=1e-10)

    def test_rk4_is_fourth_order(self):
        c = 10.0
        connection = build_connection({"type": "constant", "matrices": [(c * J).tolist()]}, self.circle)
        segment = self.circle.geodesic_segment(np.array([0.0]), np.array([0.2]))
        exact = rotation(np.array(-c * 0.2))
        coarse = np.linalg.norm(transport_segment(connection, segment, Frame.identity(2), 8).as_array() - exact)
        fine = np.linalg.norm(transport_segment(connection, segment, Frame.identity(2), 16).as_array() - exact)
        assert 12.0 < coarse / fine < 20.0

    def test_flat_circle_generator(self):
        connection = build_connection({"type": "flat_u1", "periods": [0.3]}, self.circle)
        loop = PiecewiseGeodesicLoop(lifted=np.linspace(0.0, 1.0, 9)[:, None])
        element = holonomy_of_loop(connection, loop)
        assert circular_gap(element.angle, 0.3) < 1e-9

    def test_flat_contractible_loop_is_identity(self):
        connection = build_connection({"type": "flat_u1", "periods": [0.3, 0.8]}, self.torus)
        element = holonomy_of_loop(connection, square_loop([0.2, 0.3], 0.15))
        assert np.allclose(element.as_array(), np.eye(2), atol=1e-9)

    def test_octant_triangle(self):
        connection = build_connection({"type": "levi_civita"}, self.sphere)
        element = holonomy_of_loop(connection, octant_loop(self.sphere))
        assert circular_gap(element.angle, 0.25) * 2.0 * math.pi < 1e-6

    def test_holonomy_is_orthogonal(self):
        connection = build_connection({"type": "sin_product", "amplitude": 1.5}, self.big)
        result = holonomy(connection, self._loops())
        assert result.orthogonality_defect() < 1e-9
        assert np.allclose(np.abs(np.linalg.det(result.matrices)), 1.0, atol=1e-9)

    def test_flat_holonomy_depends_on_winding_only(self):
        periods = [0.3, 0.45]
        connection = build_connection({"type": "flat_u1", "periods": periods}, self.big)
        loops = self._loops()
        angles = holonomy(connection, loops).angles()
        assert np.max(circular_gap(angles, flat_angles(periods, loops.windings))) < 1e-9

    def test_exact_matches_ode(self):
        connection = build_connection({"type": "sin_form", "amplitude": 1.0}, self.big)
        loops = self._loops(m=64, size=200)
        ode = holonomy(connection, loops).matrices
        exact = holonomy_u1_exact(connection, loops).matrices
        assert np.max(np.linalg.norm(ode - exact, axis=(-2, -1))) < 1e-8

    def test_exact_trivial_is_identity(self):
        connection = build_connection({"type": "trivial"}, self.big)
        loops = self._loops(size=20)
        assert np.all(u1_line_integrals(connection, loops) == 0.0)
        assert np.allclose(holonomy_u1_exact(connection, loops).matrices, np.eye(2))

    def test_exact_needs_u1_form(self):
        connection = build_connection({"type": "levi_civita"}, self.sphere)
        loop = octant_loop(self.sphere)
        with pytest.raises(UnsupportedTransport):
            holonomy_u1_exact(connection, loop.as_batch(self.sphere))

    def test_reversed_loop_gives_inverse(self):
        connection = build_connection({"type": "sin_product", "amplitude": 1.0}, self.big)
        loops = self._loops(size=50)
        forward = holonomy(connection, loops).matrices
        backward = holonomy(connection, loops.reversed()).matrices
        assert np.max(np.abs(backward - np.swapaxes(forward, -1, -2))) < 1e-8

    def test_concatenation_order(self):
        a = np.zeros((3, 3))
        a[0, 1], a[1, 0] = -2.0, 2.0
        b = np.zeros((3, 3))
        b[1, 2], b[2, 1] = -3.0, 3.0
        connection = build_connection({"type": "constant", "matrices": [a.tolist(), b.tolist()]}, self.torus)
        steps = np.linspace(0.0, 1.0, 6)
        first = PiecewiseGeodesicLoop(lifted=np.stack([steps, np.zeros(6)], axis=1))
        second = PiecewiseGeodesicLoop(lifted=np.stack([np.zeros(6), steps], axis=1))
        joined = PiecewiseGeodesicLoop(lifted=np.concatenate([first.lifted, second.lifted[1:] + first.lifted[-1]]))
        h1 = holonomy_of_loop(connection, first, steps_per_segment=50).as_array()
        h2 = holonomy_of_loop(connection, second, steps_per_segment=50).as_array()
        h12 = holonomy_of_loop(connection, joined, steps_per_segment=50).as_array()
        assert np.allclose(h12, h2 @ h1, atol=1e-12)
        assert np.allclose(h1, expm(-a), atol=1e-9)
        assert not np.allclose(h2 @ h1, h1 @ h2, atol=1e-3)

    def test_gauge_covariance(self):
        plain = build_connection({"type": "sin_form", "amplitude": 0.5}, self.big)
        gauged = build_connection({"type": "sin_form", "amplitude": 0.5,
                                   "gauge": {"amplitude": 0.1, "direction": 1}}, self.big)
        loops = self._loops(size=50)
        exact_gap = holonomy_u1_exact(plain, loops).matrices - holonomy_u1_exact(gauged, loops).matrices
        assert np.max(np.abs(exact_gap)) < 1e-12
        ode_gap = holonomy(plain, loops).matrices - holonomy(gauged, loops).matrices
        assert np.max(np.abs(ode_gap)) < 1e-8

    def test_stokes_flat_residual(self):
        connection = build_connection({"type": "flat_u1", "periods": [0.3, 0.6]}, self.torus)
        assert stokes_check(connection, square_loop([0.4, 0.1], 0.2)) < 1e-12

    def test_stokes_sin_form_residual(self):
        connection = build_connection({"type": "sin_form", "amplitude": 1.0}, self.torus)
        loop = square_loop([0.1, 0.2], 0.2)
        assert stokes_check(connection, loop) < 1e-6
        assert stokes_check(connection, loop, transport="ode") < 1e-6

    def test_holonomy_angle_scales_with_area(self):
        connection = build_connection({"type": "sin_form", "amplitude": 1.0}, self.torus)
        loops = square_loop([0.0, 0.0], 0.1).as_batch(self.torus)
        full = u1_line_integrals(connection, loops)[0]
        half = u1_line_integrals(connection, scale_loops(loops, 0.5))[0]
        assert full == pytest.approx(0.1 * math.sin(0.2 * math.pi), rel=1e-12)
        assert half / full == pytest.approx(0.25, abs=0.02)

    def test_stokes_rejects_winding_loop(self):
        connection = build_connection({"type": "flat_u1", "periods": [0.3]}, self.circle)
        loop = PiecewiseGeodesicLoop(lifted=np.linspace(0.0, 1.0, 9)[:, None])
        with pytest.raises(NotContractible):
            stokes_check(connection, loop)

    def test_ito_trivial_is_identity(self):
        connection = build_connection({"type": "trivial"}, self.big)
        batch = sample_admissible(self.big, np.zeros(2), 16, self.rng, 20)
        result = transport_ito_euler(connection, batch, 4, self.rng)
        assert np.allclose(result.matrices, np.eye(2), atol=1e-15)

    @pytest.mark.parametrize("correction", ["literal", "standard"])
    def test_ito_flat_circle_matches_loop_holonomy(self, correction):
        circle = build_manifold({"kind": "circle", "circumference": 4.0})
        connection = build_connection({"type": "flat_u1", "periods": [0.3]}, circle)
        batch = sample_admissible(circle, np.zeros(1), 16, self.rng, 200)
        ito = transport_ito_euler(connection, batch, 16, self.rng, correction=correction)
        exact = holonomy_u1_exact(connection, build_loops(batch))
        assert np.array_equal(ito.windings, exact.windings)
        assert np.max(circular_gap(ito.angles(), exact.angles())) < 1e-2

    def _so3_paths(self, amplitude, substeps):
        # lattice coordinates on 4Z^2 scale the ambient coefficients by 1/4
        matrices = 4.0 * amplitude * np.stack([L_X, L_Y])
        connection = build_connection({"type": "constant", "matrices": matrices.tolist()}, self.big)
        batch = sample_admissible(self.big, np.zeros(2), 16, self.rng, 200)
        path = refine_bridge(build_loops(batch).lifted, 16, substeps, np.random.default_rng(11))
        return connection, path, batch.weights

    def _stratonovich_gap(self, connection, coarse, fine, weights, correction):
        reference = holonomy(connection, GeodesicLoopBatch(self.big, fine, weights), steps_per_segment=4)
        ito = polar(ito_euler_path(connection, coarse, correction))
        return float(np.mean(np.linalg.norm(ito - reference.matrices, axis=(-2, -1))))

    def test_ito_corrections_differ_off_u1(self):
        connection, path, weights = self._so3_paths(1.0, 32)
        literal = polar(ito_euler_path(connection, path, "literal"))
        standard = polar(ito_euler_path(connection, path, "standard"))
        assert float(np.mean(np.linalg.norm(literal - standard, axis=(-2, -1)))) > 0.1
        assert np.max(np.abs(np.linalg.det(standard) - 1.0)) < 1e-9
        literal_gap = self._stratonovich_gap(connection, path, path, weights, "literal")
        standard_gap = self._stratonovich_gap(connection, path, path, weights, "standard")
        assert standard_gap < literal_gap

    def test_ito_gap_shrinks_with_substeps(self):
        connection, path, weights = self._so3_paths(1.0, 64)
        coarse = self._stratonovich_gap(connection, path[:, ::8], path, weights, "standard")
        finer = self._stratonovich_gap(connection, path[:, ::2], path, weights, "standard")
        assert finer < 0.75 * coarse

    def test_ito_needs_torus(self):
        connection = build_connection({"type": "levi_civita"}, self.sphere)
        batch = LoopBatch(self.sphere, np.array([1.0, 0.0, 0.0]), 2, np.array([[[0.0, 1.0, 0.0]]]))
        with pytest.raises(UnsupportedTransport):
            transport_ito_euler(connection, batch, 4, self.rng)

    def test_rotation_angle_in_turns(self):
        assert float(rotation_angle(rotation(np.array(0.5 * math.pi)))) == pytest.approx(0.25)
        assert float(rotation_angle(rotation(np.array(-0.5 * math.pi)))) == pytest.approx(0.75)
        assert float(rotation_angle(np.eye(2))) == 0.0

    def test_batch_of_one_loop(self):
        connection = build_connection({"type": "flat_u1", "periods": [0.3]}, self.circle)
        lifted = np.linspace(0.0, 1.0, 9)[None, :, None]
        loops = GeodesicLoopBatch(self.circle, lifted, np.ones(1))
        assert loops.windings.tolist() == [[1]]
        assert circular_gap(holonomy_u1_exact(connection, loops).angles()[0], 0.3) < 1e-12
