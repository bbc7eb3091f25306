"""Scenario files: TOML ingestion and validation.

A scenario has the blocks ``grid``, ``market``, ``jumps``, ``population``,
``claim``, ``solver``, ``verification``, ``oracle`` and ``output``.  Loading
collects every validation failure before raising, and each semantic failure
names the model assumption it breaks.
"""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .basis import INTENSITY_FORMS, JumpSpec, TimeGrid, build_time_grid, make_jump_spec, no_jumps
from .equilibrium import ClaimSpec
from .errors import ConfigurationError, MfgJumpError
from .market import PHI_FORMS, MarketSpec
from .projection import LAWS, TypeLaws, law_mean

BACKENDS = ("lattice", "lsmc")
SUITES = ("closed_form", "oracle", "identity", "measure_change", "projection", "fixed_point", "degeneracy")

CITE_MEAN_RHO = "equilibrium requires E[rho] != 1"
CITE_ALPHA = "risk aversion must be bounded away from 0"
CITE_ZETA = "compensator density must satisfy 0 <= zeta <= c_nu"
CITE_CLAIM = "the liability B must be bounded"


class ScenarioError(ConfigurationError):
    """All validation failures of one scenario file."""

    def __init__(self, path, errors):
        self.path = str(path)
        self.errors = list(errors)
        lines = "\n".join(f"  - {e}" for e in self.errors)
        super().__init__(f"invalid scenario {self.path}:\n{lines}")


@dataclass(frozen=True)
class SolverOptions:
    backend: str = "lattice"
    paths: int = 1000
    agents: int = 100
    basis_degree: int = 2
    ridge: float = 1e-8
    u_max: float | None = None
    check_paths: int = 2000
    check_agents: int = 100


@dataclass(frozen=True)
class OracleOptions:
    theta_step: float = 0.01
    theta_min: float = -2.0
    theta_max: float = 2.0
    x0: float = 0.0


@dataclass(frozen=True)
class Scenario:
    name: str
    description: str
    grid: TimeGrid
    market: MarketSpec
    jumps: JumpSpec
    laws: TypeLaws
    claim: ClaimSpec
    solver: SolverOptions
    oracle: OracleOptions
    verification: tuple
    output: dict
    raw: dict = field(repr=False, default_factory=dict)
    source: str = ""

    def with_overrides(self, **solver) -> "Scenario":
        """Copy with solver options replaced (``None`` values are ignored)."""
        opts = {k: v for k, v in solver.items() if v is not None}
        if not opts:
            return self
        new = SolverOptions(**{**self.solver.__dict__, **opts})
        errs: list[str] = []
        _check_solver(new, errs)
        if errs:
            raise ScenarioError(self.source or self.name, errs)
        raw = copy.deepcopy(self.raw)
        raw.setdefault("solver", {}).update(opts)
        return Scenario(**{**self.__dict__, "solver": new, "raw": raw})


# --------------------------------------------------------------------------
# block parsers: each appends messages to ``errs`` and returns None on failure
# --------------------------------------------------------------------------


def _guard(errs, block, fn):
    try:
        return fn()
    except MfgJumpError as e:
        errs.append(f"[{block}] {e}")
    except (KeyError, TypeError, ValueError) as e:
        errs.append(f"[{block}] malformed entry: {e!r}")
    return None


def _parse_grid(d):
    return build_time_grid(float(d.get("horizon", 1.0)), int(d["n_steps"]))


def _parse_market(d):
    phi = dict(d.get("phi", {"form": "constant", "values": [0.0]}))
    form = phi.pop("form", "constant")
    if form not in PHI_FORMS:
        raise ConfigurationError(f"unknown phi form {form!r}")
    for key in ("values", "base", "breaks"):
        if key in phi:
            phi[key] = _tuplify(phi[key])
    fn = PHI_FORMS[form](**phi)
    dim = int(d.get("d", 1))
    sigma = d.get("sigma", [[1.0 if i == j else 0.0 for j in range(dim)] for i in range(dim)])
    s0 = d.get("s0", [1.0] * dim)
    bound = float(d.get("phi_bound", fn.bound))
    return MarketSpec(dim, fn, sigma, s0, bound)


def _tuplify(x):
    return tuple(_tuplify(v) for v in x) if isinstance(x, (list, tuple)) else float(x)


def _parse_jumps(d, errs):
    atoms = d.get("atoms", [])
    if not atoms:
        return no_jumps()
    K = len(atoms)
    z = dict(d.get("zeta", {"form": "constant", "values": [1.0] * K}))
    form = z.pop("form", "constant")
    if form not in INTENSITY_FORMS:
        raise ConfigurationError(f"unknown intensity form {form!r}")
    if "value" in z:
        z["values"] = [z.pop("value")] * K
    for key in ("values", "base", "breaks"):
        if key in z:
            z[key] = _tuplify(z[key])
    zeta = INTENSITY_FORMS[form](**z)
    c_nu = float(d.get("c_nu", getattr(zeta, "bound", 1.0)))
    if zeta.bound > c_nu + 1e-12 or zeta.lower < -1e-12:
        errs.append(
            f"[jumps] {CITE_ZETA} (zeta ranges over [{zeta.lower:g}, {zeta.bound:g}], c_nu = {c_nu:g})"
        )
        return None
    return make_jump_spec(atoms, zeta, c_nu)


def _parse_law(name, d):
    d = dict(d)
    kind = d.pop("law", "constant")
    if kind not in LAWS:
        raise ConfigurationError(f"unknown law {kind!r} for {name}")
    for key in ("values", "probs"):
        if key in d:
            d[key] = _tuplify(d[key])
    return LAWS[kind](**d)


def _parse_population(d, errs):
    laws = {}
    for name in ("x0", "alpha", "rho"):
        law = _guard(errs, "population", lambda: _parse_law(name, d.get(name, {"law": "constant", "value": 0.0 if name != "alpha" else 1.0})))
        if law is None:
            return None
        laws[name] = law
    ok = True
    if not laws["alpha"].lower > 0:
        errs.append(f"[population] {CITE_ALPHA} (alpha law has lower bound {laws['alpha'].lower:g})")
        ok = False
    if hasattr(laws["rho"], "atoms") and laws["rho"].atoms() is not None:
        m = law_mean(laws["rho"])
        if abs(m - 1.0) < 1e-12:
            errs.append(f"[population] {CITE_MEAN_RHO} (got E[rho] = {m:g})")
            ok = False
    if not ok:
        return None
    return _guard(errs, "population", lambda: TypeLaws(**laws))


def _parse_claim(d, errs):
    d = dict(d)
    kind = d.get("kind", "zero")
    if kind == "stoploss" and "k2" not in d:
        errs.append(f"[claim] {CITE_CLAIM}: stop-loss needs a finite cap k2 > 0")
        return None
    try:
        return ClaimSpec(**d)
    except ConfigurationError as e:
        errs.append(f"[claim] {CITE_CLAIM}: {e}")
    except TypeError as e:
        errs.append(f"[claim] malformed entry: {e}")
    return None


def _check_solver(s: SolverOptions, errs):
    if s.backend not in BACKENDS:
        errs.append(f"[solver] backend must be one of {', '.join(BACKENDS)} (got {s.backend!r})")
    for key in ("paths", "agents", "check_paths", "check_agents"):
        if getattr(s, key) < 1:
            errs.append(f"[solver] {key} must be >= 1")
    if s.basis_degree not in (1, 2, 3):
        errs.append("[solver] basis_degree must be 1, 2 or 3")
    if s.u_max is not None and not s.u_max > 0:
        errs.append("[solver] u_max must be positive")


def parse_scenario(doc: dict, source: str = "<scenario>") -> Scenario:
    errs: list[str] = []
    known = {"name", "description", "grid", "market", "jumps", "population", "claim", "solver",
             "verification", "oracle", "output"}
    for key in doc:
        if key not in known:
            errs.append(f"unknown block {key!r}")
    if "grid" not in doc or "n_steps" not in doc.get("grid", {}):
        errs.append("[grid] n_steps is required")
        grid = None
    else:
        grid = _guard(errs, "grid", lambda: _parse_grid(doc["grid"]))
    market = _guard(errs, "market", lambda: _parse_market(doc.get("market", {})))
    jumps = _guard(errs, "jumps", lambda: _parse_jumps(doc.get("jumps", {}), errs))
    laws = _parse_population(doc.get("population", {}), errs)
    claim = _parse_claim(doc.get("claim", {}), errs)
    solver = _guard(errs, "solver", lambda: SolverOptions(**doc.get("solver", {})))
    if solver is not None:
        _check_solver(solver, errs)
    oracle = _guard(errs, "oracle", lambda: OracleOptions(**doc.get("oracle", {})))
    suites = tuple(doc.get("verification", {}).get("suites", ()))
    for s in suites:
        if s not in SUITES:
            errs.append(f"[verification] unknown suite {s!r}; choose from {', '.join(SUITES)}")
    if errs:
        raise ScenarioError(source, errs)
    return Scenario(
        name=str(doc.get("name", Path(source).stem)),
        description=str(doc.get("description", "")),
        grid=grid, market=market, jumps=jumps, laws=laws, claim=claim, solver=solver, oracle=oracle,
        verification=suites, output=dict(doc.get("output", {})), raw=copy.deepcopy(doc), source=source,
    )


def load_scenario(path) -> Scenario:
    """Read and validate a scenario file; a bare name selects a shipped scenario."""
    p = Path(path)
    if not p.exists() and p.suffix == "" and p.name in shipped_scenarios():
        text = resources.files("mfgjump").joinpath("scenarios", f"{p.name}.toml").read_text()
        source = f"{p.name}.toml"
    else:
        if not p.is_file():
            raise ConfigurationError(f"scenario file not found: {p}")
        text = p.read_text()
        source = str(p)
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ScenarioError(source, [f"parse error: {e}"]) from None
    return parse_scenario(doc, source)


def shipped_scenarios() -> list[str]:
    root = resources.files("mfgjump").joinpath("scenarios")
    return sorted(f.name[:-5] for f in root.iterdir() if f.name.endswith(".toml"))
