import math
import os
import sys

import numpy as np
import pytest
from pydantic import ValidationError

# Add the project root to the path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from api.models import ManifoldDescriptor
from cache.cache_manager import diagonal_kernel_cache, image_set_cache, spectral_coefficient_cache
from services.geometry_service import FlatTorus, base_point_for, build_manifold
from utils.errors import ConfigError, DistanceTooLarge, NonPositiveTime


class TestGeometryService:
    """Catalog manifolds: distances, radii, interpolation and heat kernels"""

    def setup_method(self):
        self.circle = build_manifold({"kind": "circle", "circumference": 1.0})
        self.torus = build_manifold({"kind": "flat_torus", "basis": [[1.0, 0.0], [0.0, 1.0]]})
        self.sphere = build_manifold({"kind": "sphere2"})
        self.rng = np.random.default_rng(7)

    def test_distances(self):
        assert self.circle.distance(np.array([0.0]), np.array([0.3])) == pytest.approx(0.3)
        assert self.circle.distance(np.array([0.0]), np.array([0.8])) == pytest.approx(0.2)
        assert self.torus.distance(np.array([0.0, 0.0]), np.array([0.9, 0.0])) == pytest.approx(0.1)
        north = np.array([0.0, 0.0, 1.0])
        equator = np.array([1.0, 0.0, 0.0])
        assert self.sphere.distance(north, equator) == pytest.approx(math.pi / 2)

    def test_distance_symmetric_and_zero(self):
        p = self.torus.reduce(self.rng.random((50, 2)))
        q = self.torus.reduce(self.rng.random((50, 2)))
        assert np.allclose(self.torus.distance(p, q), self.torus.distance(q, p))
        assert np.all(self.torus.distance(p, p) == 0.0)

    def test_injectivity_radius_and_rho(self):
        assert self.circle.injectivity_radius() == pytest.approx(0.5)
        assert self.circle.rho() == pytest.approx(0.25)
        assert self.torus.injectivity_radius() == pytest.approx(0.5)
        assert self.torus.rho() == pytest.approx(0.25)
        assert self.sphere.injectivity_radius() == pytest.approx(math.pi)
        assert self.sphere.rho() == pytest.approx(math.pi / 2)

    def test_skewed_lattice_radius(self):
        torus = FlatTorus([[2.0, 0.0], [1.0, 1.0]])
        # shortest nonzero vectors are (1, 1) and (-1, 1)
        assert torus.injectivity_radius() == pytest.approx(math.sqrt(2.0) / 2)

    def test_interpolate_examples(self):
        mid = self.torus.interpolate(np.array([0.0, 0.0]), np.array([0.2, 0.0]), 0.5)
        assert np.allclose(mid, [0.1, 0.0])
        wrap = self.circle.interpolate(np.array([0.9]), np.array([0.1]), 0.5)
        assert min(abs(wrap[0]), abs(1.0 - wrap[0])) < 1e-12
        a = np.array([1.0, 0.0, 0.0])
        b = np.array([math.cos(0.4), math.sin(0.4), 0.0])
        quarter = self.sphere.interpolate(a, b, 0.25)
        assert self.sphere.distance(a, quarter) == pytest.approx(0.1, abs=1e-12)
        assert abs(quarter[2]) < 1e-12

    def test_interpolate_endpoints(self):
        p = self.sphere.reduce(self.rng.normal(size=(1000, 3)))
        v = self.rng.normal(size=(1000, 3))
        v = v - np.sum(v * p, axis=1, keepdims=True) * p
        v = 1.2 * self.rng.random((1000, 1)) * v / np.linalg.norm(v, axis=1, keepdims=True)
        q = self.sphere.exp(p, v)
        assert np.max(self.sphere.distance(self.sphere.interpolate(p, q, 0.0), p)) < 1e-10
        assert np.max(self.sphere.distance(self.sphere.interpolate(p, q, 1.0), q)) < 1e-10

    def test_interpolate_too_far(self):
        with pytest.raises(DistanceTooLarge):
            self.circle.interpolate(np.array([0.0]), np.array([0.3]), 0.5)
        with pytest.raises(DistanceTooLarge):
            self.sphere.geodesic_segment(np.array([1.0, 0.0, 0.0]), np.array([-1.0, 0.0, 0.0]))

    def test_geodesic_segment(self):
        seg = self.circle.geodesic_segment(np.array([0.95]), np.array([0.05]))
        assert seg.length == pytest.approx(0.1)
        assert np.allclose(seg.end, [1.05])
        assert np.allclose(seg.velocity, [0.1])

    def test_heat_kernel_examples(self):
        zero = np.array([0.0])
        assert self.circle.heat_kernel(1.0, zero, zero) == pytest.approx(1.0, abs=1e-5)
        assert self.circle.heat_kernel(0.01, zero, np.array([0.1])) == pytest.approx(2.19696, abs=1e-5)
        assert self.torus.heat_kernel_diagonal_total(np.zeros(2)) == pytest.approx(1.0, abs=1e-5)
        pole = np.array([0.0, 0.0, 1.0])
        assert self.sphere.heat_kernel_diagonal_total(pole) == pytest.approx(0.112877, abs=1e-6)

    def test_heat_kernel_nonpositive_time(self):
        with pytest.raises(NonPositiveTime):
            self.circle.heat_kernel(0.0, np.array([0.0]), np.array([0.1]))
        with pytest.raises(NonPositiveTime):
            self.sphere.heat_kernel(-1.0, np.array([1.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]))

    def test_heat_kernel_symmetric(self):
        p = self.torus.reduce(self.rng.random((20, 2)))
        q = self.torus.reduce(self.rng.random((20, 2)))
        assert np.array_equal(self.torus.heat_kernel(0.1, p, q), self.torus.heat_kernel(0.1, q, p))

    @pytest.mark.parametrize("kind", ["circle", "torus", "sphere"])
    def test_stochastic_completeness(self, kind):
        manifold = {"circle": self.circle, "torus": self.torus, "sphere": self.sphere}[kind]
        points, weights = manifold.quadrature(64)
        x = manifold.default_base_point()
        total = np.sum(weights * manifold.heat_kernel(0.25, np.broadcast_to(x, points.shape), points))
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_semigroup_on_circle(self):
        points, weights = self.circle.quadrature(256)
        x, y = np.array([0.1]), np.array([0.35])
        n = points.shape[0]
        lhs = np.sum(weights * self.circle.heat_kernel(0.25, np.broadcast_to(x, (n, 1)), points)
                     * self.circle.heat_kernel(0.5, points, np.broadcast_to(y, (n, 1))))
        assert lhs == pytest.approx(float(self.circle.heat_kernel(0.75, x, y)), abs=1e-5)

    def test_heat_step_variance(self):
        x = np.zeros((20000, 2))
        steps = FlatTorus([[10.0, 0.0], [0.0, 10.0]]).sample_heat_step(x, 0.01, self.rng)
        steps = np.where(steps > 5.0, steps - 10.0, steps)
        assert np.var(steps) == pytest.approx(0.02, rel=0.05)

    def test_sphere_heat_step_stays_on_sphere(self):
        x = np.broadcast_to([1.0, 0.0, 0.0], (500, 3))
        y = self.sphere.sample_heat_step(x, 1.0 / 16, self.rng)
        assert np.allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-12)

    def test_reduce_fundamental_domain(self):
        torus = FlatTorus([[2.0, 0.0], [0.0, 3.0]])
        x = torus.reduce(np.array([[-0.5, 7.0], [4.0, -3.0]]))
        u = torus.to_lattice(x)
        assert np.all((u >= 0.0) & (u < 1.0))

    def test_build_manifold_errors(self):
        with pytest.raises(ConfigError):
            build_manifold({"kind": "flat_torus"})
        with pytest.raises(ConfigError):
            build_manifold({"kind": "klein_bottle"})
        with pytest.raises(ConfigError):
            base_point_for(self.torus, [0.1, 0.2, 0.3])

    @pytest.mark.parametrize("circumference", [0.0, -2.0])
    def test_circle_rejects_nonpositive_circumference(self, circumference):
        with pytest.raises(ConfigError):
            build_manifold({"kind": "circle", "circumference": circumference})
        with pytest.raises(ValidationError):
            ManifoldDescriptor(kind="circle", circumference=circumference)

    def test_circle_default_circumference(self):
        circle = build_manifold({"kind": "circle"})
        assert circle.B[0, 0] == 1.0
        assert build_manifold(ManifoldDescriptor(kind="circle")).B[0, 0] == 1.0

    def test_diagonal_kernel_is_cached(self):
        diagonal_kernel_cache.clear()
        circle = build_manifold({"kind": "circle", "circumference": 3.0})
        first = circle.heat_kernel_diagonal_total(np.array([0.5]))
        second = circle.heat_kernel_diagonal_total(np.array([0.5]))
        assert first == second
        assert diagonal_kernel_cache.misses == 1
        assert diagonal_kernel_cache.hits == 1
        assert len(diagonal_kernel_cache) == 1

    def test_kernel_coefficients_shared_across_instances(self):
        image_set_cache.clear()
        spectral_coefficient_cache.clear()
        first = FlatTorus([[2.0, 0.0], [0.0, 3.0]])
        second = FlatTorus([[2.0, 0.0], [0.0, 3.0]])
        p, q = np.array([0.1, 0.2]), np.array([1.5, 2.5])
        assert first.heat_kernel(0.5, p, q) == second.heat_kernel(0.5, p, q)
        assert image_set_cache.misses == 1
        assert image_set_cache.hits == 1
        build_manifold({"kind": "sphere2"}).spectral_coefficients(0.3)
        build_manifold({"kind": "sphere2"}).spectral_coefficients(0.3)
        assert spectral_coefficient_cache.misses == 1
        assert len(spectral_coefficient_cache) == 1
