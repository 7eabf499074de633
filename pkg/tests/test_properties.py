import csv
import json

import numpy as np
import pytest

from surroshap.allocation import AllocationResult
from surroshap.grid import Scenario, generate_scenario, synthesize_system
from surroshap.properties import (
    check_signs,
    exact_allocator,
    perturb_and_compare,
    relative_distance,
    reshape_profile_search,
    run_property_suite,
    write_evidence_csv,
    write_reports_json,
)

from conftest import conditions, entity, single_bus


def test_signs_on_three_entity_game(game3):
    s, oc = game3
    X = exact_allocator(s, Scenario((oc,)))
    p1, p4 = check_signs(X, s)
    assert p1.passed and p4.passed
    assert p1.evidence[0].perturbed == pytest.approx(-1.0)
    assert p4.evidence[0].perturbed == pytest.approx(1.5)


def test_no_renewables_is_vacuous():
    s = single_bus([entity(0, "thermal", beta=1, p_max=10, offer=10), entity(1, "load", p_max=5)])
    p1, p4 = check_signs([2.5, 2.5], s)
    assert p1.vacuous and p1.passed and not p1.evidence
    assert not p4.vacuous


def test_violation_names_the_entity(game3):
    s, _ = game3
    p1, p4 = check_signs(AllocationResult(np.array([1.0, 0.5, -0.2]), method="hand", t=7), s)
    assert not p1.passed and not p4.passed
    assert [e.entity for e in p1.failures] == [1]
    assert p1.failures[0].description.startswith("period 7")
    assert [e.entity for e in p4.failures] == [2]


def test_period_labels_follow_the_scenario(game3):
    s, _ = game3
    p1, _ = check_signs(np.zeros((2, 3)), s, periods=[5, 9])
    assert [e.description.split(":")[0] for e in p1.evidence] == ["period 5", "period 9"]
    with pytest.raises(ValueError):
        check_signs(np.zeros((2, 3)), s, periods=[1])


def test_load_scaled_to_zero_gets_nothing(game3):
    s, oc = game3
    rep = perturb_and_compare(s, Scenario((oc,)), 2, "load_scale", factors=(0.5, 0.0))
    assert rep.passed
    assert rep.evidence[-1].perturbed == pytest.approx(0, abs=1e-12)


def test_halving_beta_strictly_lowers_allocation(game3):
    s, oc = game3
    rep = perturb_and_compare(s, Scenario((oc,)), 0, "beta_scale", factors=(0.5,))
    e = rep.evidence[0]
    assert e.baseline == pytest.approx(1.5) and e.perturbed == pytest.approx(0.75)
    assert e.perturbed < e.baseline


def test_offer_cut_on_clean_unit():
    ents = [entity(0, "thermal", beta=1.044, p_max=20, offer=20), entity(1, "thermal", beta=0.44, p_max=20, offer=40),
            entity(2, "renewable", p_max=5), entity(3, "load", p_max=15), entity(4, "load", p_max=10)]
    s = single_bus(ents)
    sc = Scenario((conditions(rho_g=[20, 40], r_max=[5], d_max=[15, 10]),))
    rep = perturb_and_compare(s, sc, 1, "offer_scale", factors=(0.9,))
    assert rep.passed
    assert rep.evidence[0].perturbed <= rep.evidence[0].baseline + 1e-9


def test_incompatible_perturbation(game3):
    s, oc = game3
    with pytest.raises(ValueError, match="applies to"):
        perturb_and_compare(s, Scenario((oc,)), 1, "beta_scale")
    with pytest.raises(ValueError):
        perturb_and_compare(s, Scenario((oc,)), 0, "beta_scale", factors=(1.5,))


def test_flat_single_bus_has_no_improving_reshape():
    s = single_bus([entity(0, "thermal", beta=1, p_max=100, offer=20), entity(1, "load", p_max=10)])
    sc = Scenario((conditions(t=1, rho_g=[20], d_max=[6]), conditions(t=2, rho_g=[20], d_max=[4])))
    rep = reshape_profile_search(s, sc, 1)
    assert rep.vacuous and rep.passed
    assert rep.note == "none found within budget"


@pytest.fixture
def surplus_fixture():
    """Two loads; only period 2 has renewable output, and load 3 is off in period 2."""
    s = single_bus([entity(0, "thermal", beta=1, p_max=100, offer=20), entity(1, "renewable", p_max=10),
                    entity(2, "load", p_max=10), entity(3, "load", p_max=10)])
    sc = Scenario((conditions(t=1, rho_g=[20], r_max=[0], d_max=[5, 5]),
                   conditions(t=2, rho_g=[20], r_max=[10], d_max=[5, 0])))
    return s, sc


def test_shifting_load_into_surplus_helps(surplus_fixture):
    s, sc = surplus_fixture
    rep = reshape_profile_search(s, sc, 2)
    assert rep.passed and not rep.vacuous
    cer, total, energy = rep.evidence
    assert cer.perturbed < cer.baseline
    assert total.perturbed < total.baseline
    assert abs(energy.perturbed - energy.baseline) <= 1e-9
    assert rep.profile[1] > 5


def test_reshape_preconditions(game3, surplus_fixture):
    s, oc = game3
    with pytest.raises(ValueError):
        reshape_profile_search(s, Scenario((oc,)), 2)
    s, sc = surplus_fixture
    with pytest.raises(ValueError):
        reshape_profile_search(s, sc, 0)


def test_relative_distance_values():
    x = np.array([1.5, -1.0, 1.5])
    assert relative_distance(x, x) == 0
    assert relative_distance(x, 2 * x) == pytest.approx(1.0)
    # sqrt(1.5^2 + 1 + 0.5^2) / sqrt(1.5^2 + 1 + 1.5^2) = sqrt(3.5 / 5.5)
    assert relative_distance(x, [0, 0, 2]) == pytest.approx(0.7977240352, abs=1e-9)
    with pytest.raises(ZeroDivisionError):
        relative_distance(np.zeros(3), x)
    with pytest.raises(ValueError):
        relative_distance(x, [1.0, 2.0])


def test_suite_passes_on_random_small_systems():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        s = synthesize_system(int(rng.integers(1, 4)), int(rng.integers(0, 3)), int(rng.integers(1, 4)),
                              int(rng.integers(1, 5)), seed=seed, capacity_factor=50)
        sc = generate_scenario(s, 2, seed)
        reports = run_property_suite(s, sc, reshape_budget=3)
        failed = [(r.property_id, [vars(e) for e in r.failures]) for r in reports if not r.passed]
        assert not failed, f"system seed {seed}: {failed}"


def test_report_files(surplus_fixture, tmp_path):
    s, sc = surplus_fixture
    reports = run_property_suite(s, sc, reshape_budget=2)
    write_reports_json(reports, tmp_path / "r.json")
    write_evidence_csv(reports, tmp_path / "e.csv")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert {d["property"] for d in doc} == {1, 2, 3, 4, 5, 6}
    rows = list(csv.DictReader(open(tmp_path / "e.csv")))
    assert len(rows) == sum(len(r.evidence) for r in reports)
    assert all(r["ok"] == "1" for r in rows)
