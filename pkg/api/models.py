from pydantic import BaseModel, ConfigDict, Field, validator
from typing import Any, Dict, List, Literal, Optional


def is_power_of_two(m: int) -> bool:
    return m >= 2 and (m & (m - 1)) == 0


class ManifoldDescriptor(BaseModel):
    kind: Literal["circle", "flat_torus", "sphere2"] = Field(..., description="Catalog manifold")
    circumference: Optional[float] = Field(None, description="Circle circumference L (default 1.0)")
    basis: Optional[List[List[float]]] = Field(None, description="Lattice generators as rows")

    @validator('circumference')
    def validate_circumference(cls, v):
        if v is not None and v <= 0:
            raise ValueError("circumference must be positive")
        return v


class GaugeDescriptor(BaseModel):
    """Exact term d(amplitude * sin(2 pi u^direction)) added to a U(1) form."""
    amplitude: float = Field(..., description="Gauge function amplitude b")
    direction: int = Field(0, description="Lattice coordinate index k (0-based)")


class ConnectionDescriptor(BaseModel):
    """
    Connection or family descriptor. Coordinate indices are 0-based lattice
    coordinates, so `component: 1` means the du^2 component.
    """
    type: Literal["trivial", "flat_u1", "sin_form", "sin_product", "constant",
                  "levi_civita", "sum", "family"] = Field(..., description="Connection type")
    periods: Optional[List[float]] = Field(None, description="Flat U(1) periods theta_j (mod 1)")
    amplitude: float = Field(1.0, description="Amplitude of a sinusoidal term")
    component: Optional[int] = Field(None, description="Form component i of a sinusoidal term")
    direction: Optional[int] = Field(None, description="Coordinate the sine depends on")
    phase: float = Field(0.0, description="Phase of a sin_form term (radians)")
    factors: Optional[List[int]] = Field(None, description="Coordinates (k, l) of a sin_product term")
    matrices: Optional[List[List[List[float]]]] = Field(None, description="Constant skew matrices, one per direction")
    rank: int = Field(2, description="Rank of a trivial connection")
    gauge: Optional[GaugeDescriptor] = None
    terms: Optional[List["ConnectionDescriptor"]] = Field(None, description="Summands of a `sum` connection")
    base: Optional["ConnectionDescriptor"] = Field(None, description="Family limit member (t=0)")
    delta: Optional["ConnectionDescriptor"] = Field(None, description="Family direction: member(t) = base + t*delta")
    schedule: Optional[List[float]] = Field(None, description="Family parameters t_k, decreasing to 0")

    @validator('rank')
    def validate_rank(cls, v):
        if v < 1:
            raise ValueError("rank must be at least 1")
        return v

    @validator('schedule')
    def validate_schedule(cls, v):
        if v is None:
            return v
        if not v:
            raise ValueError("family schedule must not be empty")
        if any(t < 0 for t in v):
            raise ValueError("family schedule entries must be nonnegative")
        if any(b >= a for a, b in zip(v, v[1:])):
            raise ValueError("family schedule must be strictly decreasing")
        return v


ConnectionDescriptor.model_rebuild()


class SubgroupDescriptor(BaseModel):
    """Closed subgroup H of O(r) for the containment criterion."""
    kind: Literal["trivial", "roots", "so"] = Field(..., description="{I}, q-th roots of unity in U(1), or SO(r)")
    order: Optional[int] = Field(None, description="q for the roots subgroup")

    @validator('order')
    def validate_order(cls, v):
        if v is not None and v < 1:
            raise ValueError("subgroup order must be positive")
        return v


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    description: Optional[str] = Field(None, description="Free-form annotation, ignored by the runner")
    notes: Optional[List[str]] = None
    manifold: ManifoldDescriptor
    connection: ConnectionDescriptor
    base_point: Optional[List[float]] = Field(None, description="Base point x (default: origin / (1,0,0))")
    m: int = Field(64, description="Partition size, a power of two")
    m_schedule: Optional[List[int]] = Field(None, description="Increasing powers of two for refine/subgroup")
    samples: int = Field(10000, description="Admissible loops per run")
    seed: Optional[int] = Field(None, description="Master seed (mandatory)")
    sampler: Literal["exact", "is"] = "exact"
    transport: Literal["ode", "exact-u1", "ito"] = "ode"
    steps_per_segment: Optional[int] = Field(None, description="Fixed RK4 steps per segment (default adaptive)")
    ito_substeps: int = Field(16, description="Bridge refinement per interval for the Ito scheme")
    ito_correction: Literal["literal", "standard"] = "literal"
    out_dir: Optional[str] = None
    workers: Optional[int] = None
    chunk_size: Optional[int] = None
    attempt_factor: float = Field(10.0, description="Give up after attempt_factor * samples raw loops")
    tail: float = Field(1e-12, description="Omitted mass of analytic theta sums")
    hk_tolerance: Optional[float] = None
    bins: int = Field(100, description="U(1) histogram bins")
    bootstrap: int = Field(200, description="Bootstrap resamples for sigma")
    epsilons: List[float] = Field(default_factory=lambda: [0.05, 0.1])
    merge_tol: float = Field(0.01, description="Clustering / subgroup neighbourhood radius (arc length or Frobenius)")
    threshold: float = Field(1e-3, description="Mass threshold for subgroup and Bohr-Sommerfeld verdicts")
    relative_floor: float = Field(0.05, description="Terminal distance floor relative to the first distance")
    reference: Literal["auto", "analytic", "finest"] = "auto"
    subgroup: Optional[SubgroupDescriptor] = None
    resolution: float = Field(0.01, description="Angle resolution of the jump-demo group track (turns)")
    group_range: int = Field(100, description="|nu| bound of the jump-demo group enumeration")
    group_reach: float = Field(0.45, description="Rotation reach (turns) of the generator sweep in the jump demo")
    estimator: Literal["analytic", "empirical"] = "analytic"
    compare_seed: Optional[int] = Field(None, description="Seed of an independent comparison run (dist)")
    stokes_loops: int = Field(100, description="Contractible loops checked by `stokes`")
    stokes_resolution: int = Field(32, description="Gauss-Legendre nodes per cone direction")
    dump_samples: bool = False

    @validator('m')
    def validate_m(cls, v):
        if not is_power_of_two(v):
            raise ValueError(f"m must be a power of two >= 2, got {v}")
        return v

    @validator('m_schedule')
    def validate_m_schedule(cls, v):
        if v is None:
            return v
        for m in v:
            if not is_power_of_two(m):
                raise ValueError(f"m_schedule entries must be powers of two >= 2, got {m}")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("m_schedule must be increasing")
        return v

    @validator('samples')
    def validate_samples(cls, v):
        if v < 1:
            raise ValueError("samples must be at least 1")
        return v

    @validator('epsilons')
    def validate_epsilons(cls, v):
        if any(not 0 < e < 0.5 for e in v):
            raise ValueError("arc-mass epsilons must lie in (0, 1/2)")
        return v

    @validator('tail')
    def validate_tail(cls, v):
        if not 0 < v <= 1e-6:
            raise ValueError("tail must lie in (0, 1e-6]")
        return v

    @validator('group_reach')
    def validate_group_reach(cls, v):
        if not 0 < v <= 0.5:
            raise ValueError("group_reach must lie in (0, 1/2]")
        return v

    @validator('merge_tol')
    def validate_merge_tol(cls, v):
        if v <= 0:
            raise ValueError("merge_tol must be positive")
        return v


class ExperimentReport(BaseModel):
    subcommand: str
    verdict: Optional[Literal["PASS", "FAIL"]] = None
    summary: str = ""
    seed: int
    config_hash: str
    version: str
    tolerances: Dict[str, float] = Field(default_factory=dict)
    runtime_seconds: float = 0.0
    rows: List[Dict[str, Any]] = Field(default_factory=list)
    diagnostics: Dict[str, Any] = Field(default_factory=dict)
    files: List[str] = Field(default_factory=list)


class ExperimentRequest(BaseModel):
    """HTTP body: a full config plus optional overrides."""
    config: ExperimentConfig
    seed: Optional[int] = None
    workers: Optional[int] = None
    write_files: bool = Field(False, description="Also write the output directory on the server")
