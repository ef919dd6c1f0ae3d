import json
import random
import sqlite3
from fractions import Fraction

import pytest

from bdderr import popcount_report
from cgp import CgpSettings
from circuitgen import LtgSpec, PopcountSpec, gen_popcount_exact
from complib import (
    ApproxComponent,
    ComponentLibrary,
    TauSchedule,
    build_ltg_library,
    build_popcount_library,
    compare_ltg_styles,
    compare_with_truncation,
    exact_component,
    ltg_tau_schedule,
    pareto_filter,
    popcount_tau_schedule,
    popcount_time_limit,
    run_cgp_job,
    spec_from_key,
    truncation_baseline,
)
from errors import ContractViolation, MissingArtifactError, MissingComponentKey, UnresolvedComponentError
from netlist import Gate, Netlist

TINY = CgpSettings(lam=2, max_iterations=30, restarts=1, points=2)


def _fake(key: str, area: float, abs_sum: int, tag: int, metric: str | None = "mae") -> ApproxComponent:
    """Popcount-shaped component whose netlist is a chain of ``tag`` inverters, so ids differ."""
    gates = tuple(Gate(3 + i, "NOT", (2 + i,)) for i in range(tag))
    net = Netlist(("p0", "p1", "p2"), gates, (2 + tag,))
    report = popcount_report(8, min(abs_sum, 8), abs_sum, 3 if abs_sum else 0)
    return ApproxComponent(key, "popcount", net, report, area, metric=metric, tau=float(report.mae))


def test_spec_from_key():
    assert spec_from_key("ltg-p2-n1-k3") == LtgSpec((1, 1, -1), 3)
    assert spec_from_key("pc-m7") == PopcountSpec(7)
    with pytest.raises(ContractViolation):
        spec_from_key("adder-8")


def test_popcount_schedules_for_eight_inputs():
    mae, wcae = popcount_tau_schedule(8)
    assert (mae.metric, mae.lo, mae.hi) == ("mae", 0.1, 4.0)
    assert (wcae.metric, wcae.lo, wcae.hi) == ("wcae", 1.0, 128.0)
    points = mae.points()
    assert len(points) == 10
    assert points[0] == pytest.approx(0.1) and points[-1] == pytest.approx(4.0)
    assert points == sorted(points)


def test_popcount_schedules_for_two_inputs():
    mae, wcae = popcount_tau_schedule(2)
    assert mae.hi == 1.0
    assert wcae.hi == 2.0


def test_popcount_schedules_need_two_inputs():
    with pytest.raises(ContractViolation):
        popcount_tau_schedule(1)


def test_schedule_is_geometric():
    assert TauSchedule("mae", 1.0, 100.0, 3).points() == pytest.approx([1.0, 10.0, 100.0])
    assert TauSchedule("mae", 0.5, 2.0, 1).points() == [0.5]


@pytest.mark.parametrize("lo, hi, count", [(0.0, 1.0, 3), (2.0, 1.0, 3), (1.0, 2.0, 0)])
def test_bad_schedules(lo, hi, count):
    with pytest.raises(ContractViolation):
        TauSchedule("mae", lo, hi, count)


def test_ltg_schedule_tracks_the_sum_width():
    mde, wcde = ltg_tau_schedule(LtgSpec((1, 1, -1), 2))
    # |S| <= 6 needs 3 bits
    assert (mde.hi, wcde.hi) == (4.0, 8.0)


@pytest.mark.parametrize("m, factor", [(8, 1), (15, 1), (16, 2), (31, 2), (32, 10), (50, 10)])
def test_popcount_time_limit(m, factor):
    assert popcount_time_limit(m, 3.0) == 3.0 * factor


def test_pareto_drops_dominated_equal_error():
    kept = pareto_filter([_fake("pc-m3", 10.0, 0, 1), _fake("pc-m3", 12.0, 0, 2)])
    assert [c.area for c in kept] == [10.0]


def test_pareto_keeps_a_tradeoff_curve():
    members = [_fake("pc-m3", 5.0, 3, 1), _fake("pc-m3", 6.0, 2, 2), _fake("pc-m3", 7.0, 1, 3)]
    assert len(pareto_filter(members)) == 3


def test_pareto_always_keeps_exact_components(lib):
    exact = exact_component(PopcountSpec(3), lib)
    cheap_and_exact = _fake("pc-m3", 1.0, 0, 4)
    kept = pareto_filter([exact, cheap_and_exact])
    assert exact in kept and cheap_and_exact in kept


def test_pareto_output_is_mutually_non_dominated():
    rng = random.Random(4)
    members = [_fake("pc-m3", float(rng.randint(1, 40)), rng.randint(0, 8), tag) for tag in range(1, 101)]
    kept = pareto_filter(members)
    for a in kept:
        for b in kept:
            if a is b:
                continue
            assert not (a.area <= b.area and a.report.mae <= b.report.mae
                        and (a.area < b.area or a.report.mae < b.report.mae))
    for c in members:
        assert any(k.area <= c.area and k.report.mae <= c.report.mae for k in kept)


def test_library_lookup(small_library, small_model):
    key = small_model.output_keys()[0]
    members = small_library.get(key)
    assert [c.area for c in members] == sorted(c.area for c in members)
    assert small_library.exact(key).metric is None
    exact = small_library.exact(key)
    assert small_library.resolve(key, exact.id) is exact
    with pytest.raises(UnresolvedComponentError):
        small_library.resolve(key, "0" * 16)
    with pytest.raises(MissingComponentKey):
        small_library.get("pc-m42")


def test_require_reports_refused_keys():
    library = ComponentLibrary(refusals={"ltg-p50-n50-k2": "200 input bits"})
    with pytest.raises(MissingComponentKey, match="refused"):
        library.require(["ltg-p50-n50-k2"])
    with pytest.raises(MissingComponentKey):
        library.require(["pc-m3"])


def test_add_prefers_exact_provenance(lib):
    exact = exact_component(PopcountSpec(3), lib)
    rediscovered = ApproxComponent(exact.key, "popcount", exact.netlist, exact.report, exact.area,
                                   metric="mae", tau=0.5, run_id="pc-m3-mae-00")
    library = ComponentLibrary([rediscovered, exact])
    assert len(library) == 1
    assert library.exact("pc-m3").run_id == "exact"


def test_with_mode(small_library):
    assert len(small_library.with_mode("all")) == len(small_library)
    only_mde = small_library.with_mode("mde")
    assert all(c.kind == "popcount" or c.metric in (None, "mde") for c in only_mde)
    assert len(small_library.with_mode("pareto")) <= len(small_library)
    with pytest.raises(ContractViolation):
        small_library.with_mode("best")


def test_save_and_load(tmp_path, small_library, lib):
    small_library.refusals["ltg-p50-n50-k2"] = "200 input bits"
    small_library.save(tmp_path / "lib")
    assert (tmp_path / "lib" / "library.db").exists()
    loaded = ComponentLibrary.load(tmp_path / "lib", lib)
    assert loaded.keys() == small_library.keys()
    assert [c.id for c in loaded] == [c.id for c in small_library]
    assert [c.report for c in loaded] == [c.report for c in small_library]
    assert loaded.refusals == small_library.refusals
    assert loaded.audit() == len(small_library)
    with sqlite3.connect(tmp_path / "lib" / "library.db") as db:
        assert db.execute("select count(*) from components").fetchone()[0] == len(small_library)
    assert len(list((tmp_path / "lib" / "components").glob("*.gnl"))) == len(small_library)


def test_audit_catches_a_wrong_report(lib):
    exact = exact_component(PopcountSpec(3), lib)
    lying = ApproxComponent(exact.key, "popcount", exact.netlist,
                            popcount_report(8, 1, 1, 1), exact.area)
    with pytest.raises(ContractViolation):
        ComponentLibrary([lying]).audit()


def test_load_without_index(tmp_path):
    with pytest.raises(MissingArtifactError, match="build-library"):
        ComponentLibrary.load(tmp_path)


def test_run_cgp_job_returns_verifiable_payload(lib):
    job = {
        "job_id": "pc-m4-mae-00", "kind": "popcount", "key": "pc-m4", "metric": "mae", "tau": 0.5,
        "seed": 1, "tech": lib.to_dict(), "cgp": {"lam": 2, "max_iterations": 40, "restarts": 2}, "m": 4,
    }
    payload = run_cgp_job(job)
    assert payload["gnl"].startswith("# gnl v1")
    assert Fraction(payload["report"]["mae"]) <= Fraction(1, 2)
    assert payload["manifest"]["iterations"] == 40


def test_popcount_library_contains_exact_components(lib):
    build = build_popcount_library([1, 3], TINY, lib, seed=2)
    keys = {c.key for c in build.components}
    assert keys == {"pc-m1", "pc-m3"}
    assert not build.failed
    # one exact plus up to 2 metrics x 2 thresholds
    assert sum(c.metric is None for c in build.components) == 2
    assert all(c.error(c.metric) <= c.tau for c in build.components if c.metric)


def test_library_keeps_a_manifest_per_evolved_component(tmp_path, lib):
    build = build_popcount_library([3], TINY, lib, seed=2)
    evolved = [c for c in build.components if c.metric]
    assert evolved
    assert set(build.manifests) == {c.run_id for c in evolved}
    for c in evolved:
        manifest = build.manifests[c.run_id]
        assert manifest["component_id"] == c.id
        assert manifest["key"] == "pc-m3"
        assert isinstance(manifest["config"]["seed"], int)
        assert manifest["config"]["max_iterations"] == TINY.max_iterations
        assert manifest["termination"] in ("iterations", "time", "budget")
        assert manifest["best_area"] == pytest.approx(c.area)

    library = ComponentLibrary()
    library.extend(build)
    library.save(tmp_path / "lib")
    runs = sorted(p.stem for p in (tmp_path / "lib" / "runs").glob("*.json"))
    assert runs == sorted(build.manifests)
    loaded = ComponentLibrary.load(tmp_path / "lib", lib)
    assert loaded.manifests == json.loads(json.dumps(build.manifests))
    with sqlite3.connect(tmp_path / "lib" / "library.db") as db:
        assert db.execute("select count(*) from runs").fetchone()[0] == len(build.manifests)
    assert set(loaded.with_mode("all").manifests) == set(build.manifests)


def test_ltg_library_records_refusals(lib):
    big = LtgSpec((1,) * 50 + (-1,) * 50, 2)
    small = LtgSpec((-1, 1), 1)
    build = build_ltg_library([big, small], ["mde"], TINY, lib, seed=0)
    assert "200 input bits" in build.refusals[big.key]
    assert {c.key for c in build.components} == {"ltg-p1-n1-k1"}
    assert all(c.metric in (None, "mde") for c in build.components)


def test_truncation_baseline(lib):
    points = truncation_baseline(4, lib)
    assert [p.t for p in points] == [0, 1, 2, 3]
    assert points[0].report.ep == 0
    assert [p.report.mae for p in points] == [0, Fraction(1, 2), Fraction(1), Fraction(3, 2)]
    assert [p.area for p in points] == sorted((p.area for p in points), reverse=True)


def test_compare_with_truncation(lib):
    spec = PopcountSpec(4)
    rows = compare_with_truncation([exact_component(spec, lib)], lib)
    assert len(rows) == 1
    assert rows[0]["truncation_t"] == 0
    assert rows[0]["area"] == exact_component(spec, lib).area


def test_exact_component_area_matches_netlist(lib):
    c = exact_component(PopcountSpec(5), lib)
    assert c.is_exact and c.kind == "popcount"
    assert c.netlist == gen_popcount_exact(PopcountSpec(5))


def test_compare_ltg_styles(lib):
    summary = compare_ltg_styles(LtgSpec((1, -1, 1), 2), TINY, lib)
    assert set(summary) == {"one_tree", "two_tree"}
    for row in summary.values():
        assert row["components"] >= 1
        assert row["exact_area"] > 0
        assert row["inverted_hypervolume"] >= 0.0
