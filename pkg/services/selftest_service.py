"""
Selftest Service
Small closed-form checks behind `selftest`: kernel constants, the
Gauss-Bonnet octant, flat-circle atoms, the trivial connection, a rational
support and both Bohr-Sommerfeld outcomes.
"""

import logging
import math
import time
from typing import Callable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel

from api.models import ExperimentConfig
from services.bridge_service import PiecewiseGeodesicLoop
from services.connection_service import SphereLeviCivita
from services.experiment_service import (
    ExperimentOutcome, max_atom_offset, new_report, resolve_config, run_bs_detector, run_distribution,
    run_family_convergence, run_subgroup_criterion,
)
from services.geometry_service import FlatTorus, RoundSphere
from services.measure_service import analytic_flat_u1, support_estimate
from services.transport_service import holonomy_of_loop
from utils.errors import HolonomyError

logger = logging.getLogger(__name__)

SELFTEST_SEED = 20240601
SELFTEST_SAMPLES = 1000


class SelftestCheck(BaseModel):
    name: str
    passed: bool
    value: Optional[float] = None
    expected: Optional[float] = None
    detail: str = ""


def _config(seed: int, **data) -> ExperimentConfig:
    cfg = ExperimentConfig(seed=seed, samples=SELFTEST_SAMPLES, **data)
    return resolve_config(cfg, workers=1)


def check_torus_kernel(seed: int) -> SelftestCheck:
    value = float(FlatTorus([[1.0]]).heat_kernel(0.01, np.array([0.0]), np.array([0.1])))
    expected = 2.19696
    return SelftestCheck(name="circle heat kernel p_0.01(0, 0.1)", value=value, expected=expected,
                         passed=abs(value - expected) < 1e-5)


def check_sphere_diagonal(seed: int) -> SelftestCheck:
    p = np.array([1.0, 0.0, 0.0])
    value = float(RoundSphere().heat_kernel(1.0, p, p))
    expected = 0.112877
    return SelftestCheck(name="sphere heat kernel p_1(x, x)", value=value, expected=expected,
                         passed=abs(value - expected) < 1e-6)


def octant_loop(sphere: RoundSphere, pieces: int = 2) -> PiecewiseGeodesicLoop:
    """Geodesic triangle e1 -> e2 -> e3 -> e1, each edge cut into `pieces` arcs."""
    corners = np.eye(3)
    nodes = []
    for i in range(3):
        a, b = corners[i], corners[(i + 1) % 3]
        for k in range(pieces):
            nodes.append(sphere.segment_point(a, b, k / pieces))
    nodes.append(corners[0])
    return PiecewiseGeodesicLoop(lifted=np.array(nodes))


def check_octant(seed: int) -> SelftestCheck:
    sphere = RoundSphere()
    element = holonomy_of_loop(SphereLeviCivita(sphere), octant_loop(sphere))
    expected = 0.25
    return SelftestCheck(name="octant triangle holonomy (turns)", value=element.angle, expected=expected,
                         passed=abs(element.angle - expected) * 2.0 * math.pi < 1e-6)


def check_flat_circle(seed: int) -> SelftestCheck:
    cfg = _config(seed, manifold={"kind": "circle", "circumference": 4.0},
                  connection={"type": "flat_u1", "periods": [0.3]}, m=64, transport="exact-u1")
    outcome = run_distribution(cfg)
    mu = outcome.measures["measure"]
    offset = max_atom_offset(mu.angles, analytic_flat_u1(FlatTorus([[4.0]], kind="circle"), [0.3]).angles)
    return SelftestCheck(name="flat circle atoms at 0.3 nu", value=offset, expected=0.0,
                         passed=offset < 1e-9 and outcome.report.verdict == "PASS",
                         detail=outcome.report.summary)


def check_trivial(seed: int) -> SelftestCheck:
    cfg = _config(seed, manifold={"kind": "flat_torus", "basis": [[4.0, 0.0], [0.0, 4.0]]},
                  connection={"type": "trivial", "rank": 3}, m=64)
    outcome = run_distribution(cfg)
    distance = outcome.report.rows[0]["distance"]
    return SelftestCheck(name="trivial connection gives the identity atom", value=distance, expected=0.0,
                         passed=outcome.report.verdict == "PASS")


def check_rational_support(seed: int) -> SelftestCheck:
    cfg = _config(seed, manifold={"kind": "circle"}, connection={"type": "flat_u1", "periods": [0.25]},
                  m=1024, transport="exact-u1", subgroup={"kind": "roots", "order": 4})
    outcome = run_subgroup_criterion(cfg)
    mu = next(iter(outcome.measures.values()))
    clusters = support_estimate(mu, cfg.merge_tol)
    return SelftestCheck(name="theta = 1/4 support is the 4th roots", value=float(len(clusters)), expected=4.0,
                         passed=len(clusters) == 4 and outcome.report.verdict == "PASS")


def check_family_limit(seed: int) -> SelftestCheck:
    cfg = _config(seed, manifold={"kind": "circle", "circumference": 4.0}, m=64, transport="exact-u1",
                  connection={"type": "family", "base": {"type": "flat_u1", "periods": [0.0]},
                              "delta": {"type": "flat_u1", "periods": [0.3]}, "schedule": [1.0, 0.5, 0.0]})
    outcome = run_family_convergence(cfg)
    last = outcome.report.rows[-1]["distance"]
    return SelftestCheck(name="family member t=0 against the limit", value=last, expected=0.0, passed=last == 0.0)


def check_bs_detector(seed: int) -> List[SelftestCheck]:
    torus = {"kind": "flat_torus", "basis": [[1.0, 0.0], [0.0, 1.0]]}
    schedule = [1.0 / 2 ** k for k in range(8)]
    positive = run_bs_detector(_config(seed, manifold=torus, connection={
        "type": "family", "base": {"type": "flat_u1", "periods": [0.0, 0.0]},
        "delta": {"type": "flat_u1", "periods": [0.3, 0.6]}, "schedule": schedule}))
    negative = run_bs_detector(_config(seed, manifold=torus,
                                       connection={"type": "flat_u1", "periods": [0.5, 0.0]}))
    return [
        SelftestCheck(name="Bohr-Sommerfeld family t (0.3, 0.6)", passed=positive.report.verdict == "PASS",
                      detail=positive.report.summary),
        SelftestCheck(name="constant periods (0.5, 0) are not Bohr-Sommerfeld", passed=negative.report.verdict == "FAIL",
                      detail=negative.report.summary),
    ]


CHECKS: List[Callable] = [
    check_torus_kernel, check_sphere_diagonal, check_octant, check_flat_circle, check_trivial,
    check_rational_support, check_family_limit, check_bs_detector,
]


def run_selftest(seed: Optional[int] = None) -> ExperimentOutcome:
    seed = SELFTEST_SEED if seed is None else int(seed)
    started = time.perf_counter()
    checks: List[SelftestCheck] = []
    for check in CHECKS:
        try:
            result = check(seed)
        except HolonomyError as e:
            logger.error(f"Selftest {check.__name__} raised {type(e).__name__}: {e}")
            result = SelftestCheck(name=check.__name__, passed=False, detail=f"{type(e).__name__}: {e}")
        for item in result if isinstance(result, list) else [result]:
            logger.info(f"{'PASS' if item.passed else 'FAIL'} {item.name}")
            checks.append(item)

    report = new_report("selftest", _config(seed, manifold={"kind": "circle"}, connection={"type": "trivial"}))
    report.rows = [c.model_dump() for c in checks]
    failed = [c.name for c in checks if not c.passed]
    report.verdict = "FAIL" if failed else "PASS"
    report.summary = f"{len(checks) - len(failed)}/{len(checks)} checks passed" + (
        f"; failed: {', '.join(failed)}" if failed else "")
    report.runtime_seconds = time.perf_counter() - started
    table: Tuple[List[str], List[List]] = (
        ["name", "passed", "value", "expected"],
        [[c.name, c.passed, c.value, c.expected] for c in checks],
    )
    return ExperimentOutcome(report, {}, {"selftest": table})
