import copy
import sys

import pytest

from mfgjump.errors import ConfigurationError
from mfgjump.scenario import (
    CITE_ALPHA,
    CITE_CLAIM,
    CITE_MEAN_RHO,
    CITE_ZETA,
    ScenarioError,
    load_scenario,
    parse_scenario,
    shipped_scenarios,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SHIPPED = ["hetero-alpha", "merton", "stoploss-cpp", "tilt-check", "tiny-oracle"]

BASE = {
    "grid": {"horizon": 1.0, "n_steps": 4},
    "market": {"phi": {"form": "constant", "values": [0.2]}},
    "jumps": {"atoms": [{"mark": 1.0, "weight": 0.5}], "zeta": {"form": "constant", "value": 1.0}, "c_nu": 1.0},
    "population": {"alpha": {"law": "constant", "value": 2.0}, "rho": {"law": "constant", "value": 0.5}},
    "claim": {"kind": "stoploss", "k2": 1.0},
}


def doc(**blocks):
    d = copy.deepcopy(BASE)
    for k, v in blocks.items():
        d[k] = v
    return d


def test_shipped_scenarios_load():
    assert shipped_scenarios() == SHIPPED
    for name in SHIPPED:
        sc = load_scenario(name)
        assert sc.name == name and sc.verification


def test_minimal_document_parses():
    sc = parse_scenario(doc())
    assert sc.grid.n_steps == 4 and sc.jumps.n_atoms == 1 and sc.solver.backend == "lattice"


def test_unit_mean_rho_rejected_with_citation():
    d = doc(population={"alpha": {"law": "constant", "value": 2.0}, "rho": {"law": "constant", "value": 1.0}})
    with pytest.raises(ScenarioError) as e:
        parse_scenario(d)
    assert any(CITE_MEAN_RHO in m for m in e.value.errors)


def test_intensity_bound_rejected_with_citation():
    d = doc()
    d["jumps"]["zeta"]["value"] = 2.0
    with pytest.raises(ScenarioError) as e:
        parse_scenario(d)
    assert any(CITE_ZETA in m for m in e.value.errors)


def test_all_errors_collected():
    d = doc(
        population={"alpha": {"law": "constant", "value": 0.0}, "rho": {"law": "constant", "value": 0.0}},
        claim={"kind": "stoploss"},
        solver={"backend": "quantum", "paths": 0},
        verification={"suites": ["nonsense"]},
        extra={},
    )
    with pytest.raises(ScenarioError) as e:
        parse_scenario(d)
    text = "\n".join(e.value.errors)
    for needle in (CITE_ALPHA, CITE_CLAIM, "backend", "paths must be", "unknown suite", "unknown block"):
        assert needle in text
    assert len(e.value.errors) >= 6


def test_missing_grid_reported():
    d = doc()
    del d["grid"]
    with pytest.raises(ScenarioError, match="n_steps is required"):
        parse_scenario(d)


def test_parse_error_reports_position(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[grid]\nn_steps = = 4\n")
    with pytest.raises(ScenarioError, match=r"line 2"):
        load_scenario(p)


def test_missing_file_names_path(tmp_path):
    p = tmp_path / "nope.toml"
    with pytest.raises(ConfigurationError, match="nope.toml"):
        load_scenario(p)


def test_overrides_validate_and_record():
    sc = load_scenario("merton")
    new = sc.with_overrides(paths=50, backend="lsmc")
    assert new.solver.paths == 50 and new.raw["solver"]["backend"] == "lsmc"
    assert sc.solver.paths == 1000
    with pytest.raises(ScenarioError):
        sc.with_overrides(agents=0)


def test_file_roundtrip(tmp_path):
    from importlib import resources

    text = resources.files("mfgjump").joinpath("scenarios", "stoploss-cpp.toml").read_text()
    p = tmp_path / "copy.toml"
    p.write_text(text)
    a, b = load_scenario(p), load_scenario("stoploss-cpp")
    assert a.raw == b.raw == tomllib.loads(text)
