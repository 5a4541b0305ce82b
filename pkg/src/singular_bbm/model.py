"""Branching-rate measures, branching mechanisms and scenario configuration.

A scenario is stored as a TOML file with three required sections and one
optional one::

    [measure]
    dimension = 1
    kind = "atoms"              # or "shells" (requires dimension >= 2)
    atoms = [[0.0, 1.0]]        # [position, weight] pairs (kind = "atoms")
    # shells = [[1.0, 1.0]]     # [radius, weight] pairs (kind = "shells")

    [mechanism]
    pmf = [[0.0, 0.0, 1.0]]     # one offspring pmf (p0, p1, ...) per support point

    [run]
    x0 = [0.0]
    horizon = 2.0
    obs_times = [1.0, 2.0]
    seed = 2024
    replicas = 100
    population_cap = 20000000   # optional

    [engine]                    # optional, see RunSettings
    backend = "auto"
    dt = 1e-3
    epsilon = 0.0632
    local_time = "bridge"
    deltas = [0.25]
    directions = [[1.0], [-1.0]]

Unknown sections or keys are rejected.
"""

from __future__ import annotations

import enum
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PMF_ATOL = 1e-12
DEFAULT_POPULATION_CAP = 20_000_000


class ModelError(ValueError):
    """Raised for malformed measures, mechanisms or scenario files."""


class MeasureKind(str, enum.Enum):
    ATOMS_1D = "atoms"
    SHELLS_RADIAL = "shells"


@dataclass(frozen=True)
class RateMeasure:
    """Positive branching-rate measure: point atoms on the line or radial shells.

    Shell weights multiply the surface measure of unit density per unit area.
    """

    dimension: int
    kind: MeasureKind
    atoms: tuple[tuple[float, float], ...] = ()
    shells: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", MeasureKind(self.kind))
        object.__setattr__(self, "atoms", tuple((float(p), float(w)) for p, w in self.atoms))
        object.__setattr__(self, "shells", tuple((float(r), float(w)) for r, w in self.shells))

    @classmethod
    def single_atom(cls, weight: float, position: float = 0.0) -> RateMeasure:
        return cls(1, MeasureKind.ATOMS_1D, atoms=((position, weight),))

    @classmethod
    def single_shell(cls, dimension: int, radius: float, weight: float) -> RateMeasure:
        return cls(dimension, MeasureKind.SHELLS_RADIAL, shells=((radius, weight),))

    @property
    def points(self) -> tuple[tuple[float, float], ...]:
        return self.atoms if self.kind is MeasureKind.ATOMS_1D else self.shells

    @property
    def support(self) -> np.ndarray:
        """Atom positions or shell radii."""
        return np.array([p for p, _ in self.points], dtype=float)

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.points], dtype=float)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class BranchingMechanism:
    """Offspring pmf (p0, p1, ..., p_nmax) for each support point of the measure."""

    per_site: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        object.__setattr__(
            self, "per_site", tuple(tuple(float(p) for p in pmf) for pmf in self.per_site)
        )

    @classmethod
    def uniform(cls, pmf, n_sites: int = 1) -> BranchingMechanism:
        return cls(tuple(tuple(pmf) for _ in range(n_sites)))

    @classmethod
    def binary(cls, n_sites: int = 1) -> BranchingMechanism:
        return cls.uniform((0.0, 0.0, 1.0), n_sites)

    @property
    def nmax(self) -> int:
        return max(len(p) for p in self.per_site) - 1

    def pmf_matrix(self) -> np.ndarray:
        """Pmfs padded with zeros to a (n_sites, nmax + 1) array."""
        out = np.zeros((len(self.per_site), self.nmax + 1))
        for i, pmf in enumerate(self.per_site):
            out[i, : len(pmf)] = pmf
        return out

    def mean_offspring(self) -> np.ndarray:
        """Q at every site."""
        p = self.pmf_matrix()
        return p @ np.arange(p.shape[1])

    def second_moment(self) -> np.ndarray:
        p = self.pmf_matrix()
        return p @ np.arange(p.shape[1]) ** 2

    def __len__(self):
        return len(self.per_site)


@dataclass(frozen=True)
class SignedNu:
    """The signed measure (Q - 1) mu on the support of ``base``."""

    base: RateMeasure
    nu_weights: np.ndarray
    positive_part: np.ndarray
    negative_part: np.ndarray

    @property
    def dimension(self) -> int:
        return self.base.dimension

    @property
    def support(self) -> np.ndarray:
        return self.base.support

    @property
    def kind(self) -> MeasureKind:
        return self.base.kind

    def signed_points(self) -> list[tuple[float, float]]:
        return [(float(p), float(w)) for p, w in zip(self.support, self.nu_weights)]

    def is_zero(self) -> bool:
        return not np.any(self.nu_weights)


@dataclass(frozen=True)
class Scenario:
    measure: RateMeasure
    mechanism: BranchingMechanism
    initial_position: tuple[float, ...]
    horizon: float
    observation_times: tuple[float, ...]
    seed: int = 0
    replica_count: int = 1
    population_cap: int | None = DEFAULT_POPULATION_CAP

    def __post_init__(self):
        object.__setattr__(
            self, "initial_position", tuple(float(v) for v in np.atleast_1d(self.initial_position))
        )
        object.__setattr__(self, "observation_times", tuple(float(t) for t in self.observation_times))

    @property
    def dimension(self) -> int:
        return self.measure.dimension


@dataclass(frozen=True)
class RunSettings:
    """Engine options that are not part of the model itself."""

    backend: str = "auto"
    dt: float = 1e-3
    epsilon: float | None = None  # None means 2 * sqrt(dt)
    local_time: str = "bridge"
    deltas: tuple[float, ...] = ()
    directions: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "deltas", tuple(float(d) for d in self.deltas))
        object.__setattr__(
            self, "directions", tuple(tuple(float(v) for v in r) for r in self.directions)
        )

    @property
    def eps(self) -> float:
        return 2.0 * math.sqrt(self.dt) if self.epsilon is None else self.epsilon


@dataclass
class ValidationReport:
    ok: bool
    reasons: list[str] = field(default_factory=list)

    def __bool__(self):
        return self.ok


def _measure_problems(m: RateMeasure) -> list[str]:
    out = []
    if m.dimension < 1:
        out.append("dimension must be >= 1")
    if m.kind is MeasureKind.ATOMS_1D:
        if m.dimension != 1:
            out.append("atom measures require dimension 1")
        if m.shells:
            out.append("shells given for an atom measure")
    else:
        if m.dimension < 2:
            out.append("shell measures require dimension >= 2")
        if m.atoms:
            out.append("atoms given for a shell measure")
    pts = m.points
    if not pts:
        out.append("measure has no support points")
    locs = [p for p, _ in pts]
    if len(set(locs)) != len(locs):
        out.append("duplicate support point")
    for p, w in pts:
        if not (math.isfinite(p) and math.isfinite(w)):
            out.append("non-finite support point or weight")
        if m.kind is MeasureKind.SHELLS_RADIAL and not p > 0:
            out.append("radius must be positive")
        if not w > 0:
            out.append("weights must be strictly positive")
    return out


def _mechanism_problems(mech: BranchingMechanism, n_sites: int) -> list[str]:
    out = []
    if len(mech) != n_sites:
        out.append(f"mechanism has {len(mech)} sites but the measure has {n_sites}")
    for i, pmf in enumerate(mech.per_site):
        if not pmf:
            out.append(f"site {i}: empty pmf")
            continue
        if any(p < 0 or not math.isfinite(p) for p in pmf):
            out.append(f"site {i}: pmf entries must be finite and nonnegative")
        if abs(sum(pmf) - 1.0) > PMF_ATOL:
            out.append(f"site {i}: pmf sums to {sum(pmf)!r}, not 1")
    return out


def validate_scenario(s: Scenario) -> ValidationReport:
    reasons = _measure_problems(s.measure) + _mechanism_problems(s.mechanism, len(s.measure))
    if len(s.initial_position) != s.measure.dimension:
        reasons.append("initial position has the wrong dimension")
    if not s.horizon > 0:
        reasons.append("horizon must be positive")
    obs = s.observation_times
    if not obs:
        reasons.append("no observation times")
    if any(b <= a for a, b in zip(obs, obs[1:])):
        reasons.append("observation times must be strictly increasing")
    if obs and (obs[0] <= 0 or obs[-1] > s.horizon):
        reasons.append("observation times must lie in (0, horizon]")
    if s.replica_count < 1:
        reasons.append("replica_count must be >= 1")
    if not 0 <= s.seed < 2**64:
        reasons.append("seed must be an unsigned 64-bit integer")
    if s.population_cap is not None and s.population_cap < 1:
        reasons.append("population_cap must be positive")
    return ValidationReport(not reasons, reasons)


def build_signed_nu(measure: RateMeasure, mech: BranchingMechanism) -> SignedNu:
    if len(mech) != len(measure):
        raise ModelError(
            f"mechanism has {len(mech)} sites but the measure has {len(measure)} support points"
        )
    w = measure.weights
    nu = (mech.mean_offspring() - 1.0) * w
    return SignedNu(measure, nu, np.where(nu > 0, nu, 0.0), np.where(nu < 0, -nu, 0.0))


def signed_nu_from_points(points, dimension: int = 1) -> SignedNu:
    """Build a SignedNu directly from (location, signed weight) pairs.

    Used by the eigenvalue routines, which accept measures that are not of
    the form (Q - 1) mu for a positive mu with a given mechanism.
    """
    pts = [(float(p), float(w)) for p, w in points]
    kind = MeasureKind.ATOMS_1D if dimension == 1 else MeasureKind.SHELLS_RADIAL
    base_pts = tuple((p, abs(w) if w != 0 else 1.0) for p, w in pts)
    base = RateMeasure(dimension, kind, **({"atoms": base_pts} if dimension == 1 else {"shells": base_pts}))
    nu = np.array([w for _, w in pts])
    return SignedNu(base, nu, np.where(nu > 0, nu, 0.0), np.where(nu < 0, -nu, 0.0))


# -- TOML round trip ---------------------------------------------------------

_SECTIONS = {
    "measure": {"dimension", "kind", "atoms", "shells"},
    "mechanism": {"pmf"},
    "run": {"x0", "horizon", "obs_times", "seed", "replicas", "population_cap"},
    "engine": {"backend", "dt", "epsilon", "local_time", "deltas", "directions"},
}


def _check_keys(doc: dict):
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ModelError(f"unknown section(s): {sorted(unknown)}")
    for name in ("measure", "mechanism", "run"):
        if name not in doc:
            raise ModelError(f"missing section [{name}]")
    for name, body in doc.items():
        bad = set(body) - _SECTIONS[name]
        if bad:
            raise ModelError(f"unknown key(s) in [{name}]: {sorted(bad)}")


def scenario_from_dict(doc: dict) -> tuple[Scenario, RunSettings]:
    _check_keys(doc)
    m, mech, run = doc["measure"], doc["mechanism"], doc["run"]
    try:
        measure = RateMeasure(
            dimension=int(m["dimension"]),
            kind=MeasureKind(m["kind"]),
            atoms=tuple(tuple(a) for a in m.get("atoms", ())),
            shells=tuple(tuple(s) for s in m.get("shells", ())),
        )
        scenario = Scenario(
            measure=measure,
            mechanism=BranchingMechanism(tuple(tuple(p) for p in mech["pmf"])),
            initial_position=tuple(run["x0"]),
            horizon=float(run["horizon"]),
            observation_times=tuple(run["obs_times"]),
            seed=int(run.get("seed", 0)),
            replica_count=int(run.get("replicas", 1)),
            population_cap=run.get("population_cap", DEFAULT_POPULATION_CAP),
        )
        settings = RunSettings(**doc.get("engine", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"malformed scenario: {exc}") from exc
    return scenario, settings


def scenario_to_dict(s: Scenario, settings: RunSettings | None = None) -> dict:
    m = s.measure
    measure = {"dimension": m.dimension, "kind": m.kind.value}
    if m.atoms:
        measure["atoms"] = [list(a) for a in m.atoms]
    if m.shells:
        measure["shells"] = [list(a) for a in m.shells]
    run = {
        "x0": list(s.initial_position),
        "horizon": s.horizon,
        "obs_times": list(s.observation_times),
        "seed": s.seed,
        "replicas": s.replica_count,
    }
    if s.population_cap is not None:
        run["population_cap"] = s.population_cap
    doc = {"measure": measure, "mechanism": {"pmf": [list(p) for p in s.mechanism.per_site]}, "run": run}
    if settings is not None:
        eng = {
            "backend": settings.backend,
            "dt": settings.dt,
            "local_time": settings.local_time,
            "deltas": list(settings.deltas),
            "directions": [list(r) for r in settings.directions],
        }
        if settings.epsilon is not None:
            eng["epsilon"] = settings.epsilon
        doc["engine"] = eng
    return doc


def loads_scenario(text: str) -> tuple[Scenario, RunSettings]:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ModelError(f"invalid TOML: {exc}") from exc
    return scenario_from_dict(doc)


def dumps_scenario(s: Scenario, settings: RunSettings | None = None) -> str:
    return tomli_w.dumps(scenario_to_dict(s, settings))


def load_scenario(path) -> tuple[Scenario, RunSettings]:
    return loads_scenario(Path(path).read_text())


def save_scenario(path, s: Scenario, settings: RunSettings | None = None):
    Path(path).write_text(dumps_scenario(s, settings))
