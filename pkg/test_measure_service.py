import math
import os
import sys
from fractions import Fraction

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

# Add the project root to the path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from services.geometry_service import FlatTorus
from services.measure_service import (
    HolonomyMeasure, aggregate_angles, analytic_flat_u1, arc_distance, arc_mass, bl_distance, bootstrap_floor,
    delta_identity, empirical_measure, kish_ess, support_estimate, two_sample_test,
)
from services.transport_service import HolonomyBatch, HolonomyElement, rotation
from utils.errors import DimensionMismatch, EmptySample


def theta_masses(radius=30):
    """Class masses exp(-nu^2/4)/Z on the unit circle, keyed by nu."""
    raw = {nu: math.exp(-nu * nu / 4.0) for nu in range(-radius, radius + 1)}
    total = sum(raw.values())
    return {nu: w / total for nu, w in raw.items()}


def u1(angles, weights=None):
    angles = np.asarray(angles, dtype=float)
    weights = np.full(angles.size, 1.0 / angles.size) if weights is None else np.asarray(weights, dtype=float)
    return HolonomyMeasure("empirical", 2, weights, angles)


class TestMeasureService:
    """Empirical and analytic measures, distances, arc masses and supports"""

    def setup_method(self):
        self.circle = FlatTorus([[1.0]], kind="circle")
        self.rng = np.random.default_rng(3)

    def test_single_identity_sample(self):
        mu = empirical_measure([(HolonomyElement(matrix=np.eye(2).tolist(), angle=0.0), 1.0)])
        assert mu.is_u1
        assert mu.angles.tolist() == [0.0]
        assert mu.weights.tolist() == [1.0]

    def test_self_normalized_weights(self):
        a = HolonomyElement(matrix=rotation(np.array(0.5 * math.pi)).tolist(), angle=0.25)
        b = HolonomyElement(matrix=rotation(np.array(1.5 * math.pi)).tolist(), angle=0.75)
        assert empirical_measure([(a, 1.0), (b, 1.0)]).weights.tolist() == pytest.approx([0.5, 0.5])
        mu = empirical_measure([(a, 1.0), (b, 3.0)])
        assert mu.weights.tolist() == pytest.approx([0.25, 0.75])
        assert abs(mu.total_mass() - 1.0) < 1e-12

    def test_empirical_from_batch(self):
        matrices = rotation(2.0 * math.pi * np.array([0.1, 0.2, 0.3]))
        mu = empirical_measure(HolonomyBatch(matrices, np.array([2.0, 1.0, 1.0]), is_u1=True))
        assert mu.angles == pytest.approx([0.1, 0.2, 0.3])
        assert mu.weights == pytest.approx([0.5, 0.25, 0.25])

    def test_empty_sample(self):
        with pytest.raises(EmptySample):
            empirical_measure([])
        with pytest.raises(EmptySample):
            empirical_measure(HolonomyBatch(np.zeros((0, 2, 2)), np.zeros(0), is_u1=True))

    def test_analytic_trivial_periods_is_delta(self):
        mu = analytic_flat_u1(self.circle, [0.0])
        assert mu.angles.tolist() == [0.0]
        assert mu.weights.tolist() == pytest.approx([1.0])

    def test_analytic_irrational_masses(self):
        theta = math.sqrt(2.0) - 1.0
        mu = analytic_flat_u1(self.circle, [theta])
        masses = theta_masses()
        for nu in (0, 1, -1, 2):
            angle = (nu * theta) % 1.0
            idx = int(np.argmin(arc_distance(mu.angles, angle)))
            assert mu.weights[idx] == pytest.approx(masses[nu], abs=1e-9)
        assert masses[0] == pytest.approx(0.28209, abs=1e-5)
        assert masses[1] == pytest.approx(0.21970, abs=1e-5)

    def test_analytic_rational_aggregates_classes(self):
        mu = analytic_flat_u1(self.circle, [0.25])
        assert mu.size == 4
        masses = theta_masses()
        for k in range(4):
            expected = sum(w for nu, w in masses.items() if nu % 4 == k)
            idx = int(np.argmin(arc_distance(mu.angles, k / 4)))
            assert mu.weights[idx] == pytest.approx(expected, abs=1e-9)

    def test_analytic_tail_range(self):
        with pytest.raises(ValueError):
            analytic_flat_u1(self.circle, [0.3], tail=1e-3)

    def test_w1_examples(self):
        assert bl_distance(u1([0.3, 0.6]), u1([0.3, 0.6])) == pytest.approx(0.0, abs=1e-12)
        assert bl_distance(u1([0.0]), u1([0.5])) == pytest.approx(math.pi)
        assert bl_distance(u1([0.0]), u1([0.0, 0.5])) == pytest.approx(math.pi / 2)
        # wrap-around goes the short way
        assert bl_distance(u1([0.95]), u1([0.05])) == pytest.approx(0.2 * math.pi)

    def test_w1_rotation_invariant(self):
        mu = u1(self.rng.random(50), self.rng.dirichlet(np.ones(50)))
        nu = u1(self.rng.random(30), self.rng.dirichlet(np.ones(30)))
        base = bl_distance(mu, nu)
        for turns in (0.1, 0.37, 0.9):
            assert abs(bl_distance(mu.rotated(turns), nu.rotated(turns)) - base) < 1e-10

    def test_matrix_distance_is_pseudometric(self):
        def random_measure():
            k = int(self.rng.integers(1, 6))
            mats = Rotation.random(k, random_state=self.rng).as_matrix()
            return HolonomyMeasure("empirical", 3, self.rng.dirichlet(np.ones(k)), matrices=mats)

        for _ in range(200):
            a, b, c = random_measure(), random_measure(), random_measure()
            assert bl_distance(a, a) == 0.0
            assert bl_distance(a, b) == pytest.approx(bl_distance(b, a), abs=1e-15)
            assert bl_distance(a, c) <= bl_distance(a, b) + bl_distance(b, c) + 1e-12

    def test_rank_mismatch(self):
        with pytest.raises(DimensionMismatch):
            bl_distance(delta_identity(3, u1=False), delta_identity(2, u1=False))

    def test_arc_mass_examples(self):
        assert arc_mass(delta_identity(), 0.1) == 0.0
        mu = analytic_flat_u1(self.circle, [0.3])
        eps = Fraction(3, 20)
        expected = sum(w for nu, w in theta_masses().items()
                       if eps < (Fraction(3, 10) * nu) % 1 < 1 - eps)
        assert arc_mass(mu, 0.15) == pytest.approx(expected, abs=1e-9)

    def test_arc_mass_nonincreasing(self):
        mu = u1(self.rng.random(200))
        values = [arc_mass(mu, eps) for eps in np.linspace(0.01, 0.49, 25)]
        assert all(b <= a for a, b in zip(values, values[1:]))
        assert arc_mass(mu, 0.4999999) == 0.0

    def test_arc_mass_range(self):
        with pytest.raises(ValueError):
            arc_mass(delta_identity(), 0.5)

    def test_roots_support(self):
        clusters = support_estimate(analytic_flat_u1(self.circle, [0.25]), 0.01)
        assert len(clusters) == 4
        for cluster in clusters:
            assert min(abs(cluster.angle - k / 4) for k in range(5)) < 1e-9

    def test_identity_support(self):
        clusters = support_estimate(delta_identity(3, u1=False), 0.01)
        assert len(clusters) == 1
        assert np.allclose(clusters[0].matrix, np.eye(3))
        clusters = support_estimate(delta_identity(), 0.01)
        assert len(clusters) == 1
        assert min(clusters[0].angle, 1.0 - clusters[0].angle) < 1e-12

    def test_close_atoms_merge(self):
        clusters = support_estimate(u1([0.999, 0.001, 0.5], [0.3, 0.3, 0.4]), 0.05)
        assert len(clusters) == 2
        assert min(clusters[0].angle, 1.0 - clusters[0].angle) < 1e-12
        assert clusters[0].mass == pytest.approx(0.6)
        assert clusters[1].angle == pytest.approx(0.5)

    def test_close_matrix_atoms_merge(self):
        a = np.eye(3)
        b = Rotation.from_rotvec([0.0, 0.0, 0.004]).as_matrix()
        c = Rotation.from_rotvec([0.0, 0.0, 0.004 / 2]).as_matrix()
        mu = HolonomyMeasure("empirical", 3, np.array([0.5, 0.5]), matrices=np.stack([a, b]))
        clusters = support_estimate(mu, 0.01)
        assert len(clusters) == 1
        assert np.allclose(clusters[0].matrix, c, atol=1e-6)
        assert clusters[0].atoms == 2

    def test_aggregate_angles_wraps(self):
        angles, weights = aggregate_angles(np.array([0.0, 1.0 - 1e-13, 0.5]), np.array([0.2, 0.3, 0.5]))
        assert angles.size == 2
        assert sorted(weights.tolist()) == pytest.approx([0.5, 0.5])

    def test_bootstrap_floor(self):
        assert bootstrap_floor(delta_identity(), self.rng) == 0.0
        small = bootstrap_floor(u1(self.rng.random(100)), self.rng, resamples=50)
        large = bootstrap_floor(u1(self.rng.random(6400)), self.rng, resamples=50)
        assert 0.0 < large < small

    def test_two_sample_test(self):
        mu = u1(self.rng.random(300))
        same = two_sample_test(mu, mu, self.rng, resamples=50)
        assert same.distance < 1e-12 and same.p_value == 1.0 and not same.reject
        far = two_sample_test(mu, u1(0.5 * self.rng.random(300)), self.rng, resamples=200)
        assert far.reject
        assert far.p_value == pytest.approx(1.0 / 201)

    def test_histogram_and_ess(self):
        mu = u1([0.05, 0.15, 0.95], [0.5, 0.25, 0.25])
        hist = mu.histogram(10)
        assert hist.bins == 10
        assert hist.masses[0] == 0.5 and hist.masses[1] == 0.25 and hist.masses[9] == 0.25
        assert kish_ess(np.ones(10)) == pytest.approx(10.0)
        assert kish_ess(np.array([1.0, 0.0, 0.0])) == pytest.approx(1.0)

    def test_dict_layout(self):
        mu = analytic_flat_u1(self.circle, [0.25])
        data = mu.to_dict()
        assert data["group"] == "U1"
        assert data["angle_units"] == "turns"
        assert data["distance_units"] == "arc length on the unit circle"
        back = HolonomyMeasure.from_dict(data)
        assert bl_distance(mu, back) < 1e-12
        assert back.meta.omitted_mass == 1e-12
