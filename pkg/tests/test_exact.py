import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from surroshap.exact import (
    CapacityError,
    CharacteristicTable,
    all_coalitions,
    check_axioms,
    exact_shapley,
    load_table,
    permutation_shapley,
    save_table,
    shapley_weights,
    tabulate_characteristic,
)
from surroshap.grid import synthesize_system, generate_scenario

from conftest import conditions, entity, single_bus


def random_table(n, seed):
    v = np.random.default_rng(seed).normal(size=1 << n)
    v[0] = 0
    return CharacteristicTable(v, n)


def test_two_entity_table_size():
    s = single_bus([entity(0, "thermal", beta=1, p_max=10, offer=10), entity(1, "load", p_max=5)])
    table = tabulate_characteristic(s, conditions(rho_g=[10], d_max=[5]))
    assert table.values.shape == (4,)
    assert table.values.tolist() == [0, 0, 0, 5]
    assert exact_shapley(table).x.tolist() == pytest.approx([2.5, 2.5])


def test_three_entity_table_and_values(game3):
    s, oc = game3
    table = tabulate_characteristic(s, oc)
    assert table.values.tolist() == pytest.approx([0, 0, 0, 0, 0, 5, 0, 2])
    res = exact_shapley(table)
    assert res.x.tolist() == pytest.approx([1.5, -1.0, 1.5], abs=1e-12)
    assert res.method == "exact" and res.M == 0
    assert res.efficiency_residual == pytest.approx(0, abs=1e-12)


def test_capacity_guard():
    s = synthesize_system(5, 5, 15, 4, seed=0)
    oc = generate_scenario(s, 1, 0)[0]
    with pytest.raises(CapacityError, match="sampling"):
        tabulate_characteristic(s, oc)


def test_constant_game_gives_zero():
    assert np.all(exact_shapley(CharacteristicTable(np.zeros(16), 4)).x == 0)


def test_weights_match_factorials():
    for n in (1, 2, 5, 12):
        w = shapley_weights(n)
        ref = [math.factorial(z) * math.factorial(n - z - 1) / math.factorial(n) for z in range(n)]
        assert w == pytest.approx(ref, rel=1e-12)
    # each player's weights over all subsets of the others add to one
    n = 30
    w = shapley_weights(n)
    assert sum(math.comb(n - 1, z) * w[z] for z in range(n)) == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("n", [1, 2, 3, 5, 8])
def test_matches_permutation_average(n):
    for seed in range(3):
        table = random_table(n, seed)
        assert exact_shapley(table).x == pytest.approx(permutation_shapley(table), abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 9), st.integers(0, 10_000), st.floats(-3, 3))
def test_efficiency_and_linearity(n, seed, alpha):
    A, B = random_table(n, seed), random_table(n, seed + 1)
    xa, xb = exact_shapley(A).x, exact_shapley(B).x
    assert abs(xa.sum() - A.grand) <= 1e-9 * max(1, abs(A.grand))
    combo = exact_shapley(alpha * A + B).x
    assert combo == pytest.approx(alpha * xa + xb, abs=1e-9)


def test_axioms_pass_on_exact_output():
    table = random_table(6, 3)
    rep = check_axioms(table, exact_shapley(table))
    assert rep.passed


def test_efficiency_failure_is_reported():
    table = random_table(5, 1)
    x = exact_shapley(table).x.copy()
    x[2] += 1
    rep = check_axioms(table, x)
    assert not rep.efficiency
    assert rep.efficiency_residual == pytest.approx(1.0)


def test_duplicate_loads_are_symmetric():
    ents = [entity(0, "thermal", beta=1.0, p_max=20, offer=10), entity(1, "thermal", beta=0.44, p_max=20, offer=30),
            entity(2, "renewable", p_max=4), entity(3, "load", p_max=6), entity(4, "load", p_max=6)]
    s = single_bus(ents)
    table = tabulate_characteristic(s, conditions(rho_g=[10, 30], r_max=[4], d_max=[6, 6]))
    rep = check_axioms(table, exact_shapley(table))
    assert (3, 4) in rep.symmetric_pairs
    assert rep.symmetry_residual <= 1e-9
    assert rep.passed


def test_null_player_detected():
    # a renewable with zero available output never changes anything
    ents = [entity(0, "thermal", beta=1.0, p_max=20, offer=10), entity(1, "renewable", p_max=4),
            entity(2, "load", p_max=6)]
    s = single_bus(ents)
    table = tabulate_characteristic(s, conditions(rho_g=[10], r_max=[0], d_max=[6]))
    rep = check_axioms(table, exact_shapley(table))
    assert rep.null_players == [1]
    assert rep.dummy and rep.dummy_residual == 0


def test_all_coalitions_bit_order():
    S = all_coalitions(3)
    assert S[5].tolist() == [True, False, True]
    assert S.shape == (8, 3)


def test_table_file_round_trip(tmp_path, game3):
    table = tabulate_characteristic(*game3)
    path = tmp_path / "t.ssct"
    save_table(table, path)
    data = path.read_bytes()
    assert data[:4] == b"SSCT" and len(data) == 8 + 8 * 8
    assert np.array_equal(load_table(path).values, table.values)


def test_table_rejects_nonzero_empty_value():
    with pytest.raises(ValueError):
        CharacteristicTable(np.ones(4), 2)
