import numpy as np
import pytest
from scipy.stats import chisquare

from surroshap.allocation import relative_l2
from surroshap.exact import CharacteristicTable, exact_shapley, tabulate_characteristic
from surroshap.grid import generate_scenario, synthesize_system
from surroshap.sampling import (
    NeedsMoreSamplesError,
    accumulate,
    auto_sample_count,
    draw_pairs,
    kernel_estimate,
    kernel_size_distribution,
    kernelshap_allocate,
    log_checkpoints,
    merge,
    new_state,
    sample_paired_batch,
    solve_constrained_wls,
    stratified_mc_allocate,
    tail_checkpoints,
)


def random_table(n, seed):
    v = np.random.default_rng(seed).normal(size=1 << n)
    v[0] = 0
    return CharacteristicTable(v, n)


def test_size_distribution_two_entities():
    d = kernel_size_distribution(2)
    assert d.sizes.tolist() == [1]
    assert d.probs.tolist() == [1.0]


def test_size_distribution_four_entities():
    # binomial count times kernel weight (n-1)/(C(n,z) z (n-z)): 1, 3/4, 1 -> normalized by 11/4
    d = kernel_size_distribution(4)
    assert d.probs == pytest.approx([4 / 11, 3 / 11, 4 / 11], abs=1e-15)


@pytest.mark.parametrize("n", [2, 3, 7, 10, 31])
def test_size_distribution_symmetric(n):
    p = kernel_size_distribution(n).probs
    assert np.array_equal(p, p[::-1])
    assert abs(p.sum() - 1) <= 1e-12


def test_size_distribution_needs_two_entities():
    with pytest.raises(ValueError):
        kernel_size_distribution(1)


def test_paired_batch_complements():
    state = new_state(6, seed=3)
    S = sample_paired_batch(state, 2)
    assert np.array_equal(S[1], ~S[0])
    S = sample_paired_batch(state, 200)
    assert np.array_equal(S[100:], ~S[:100])
    sizes = S.sum(axis=1)
    assert sizes.min() >= 1 and sizes.max() <= 5
    with pytest.raises(ValueError):
        sample_paired_batch(state, 3)


def test_draws_are_counter_based():
    whole = draw_pairs(5, 7, 0, 40_000)
    assert np.array_equal(whole[12_345:30_000], draw_pairs(5, 7, 12_345, 30_000))


def test_size_histogram_matches_distribution():
    n = 4
    S = draw_pairs(n, 11, 0, 100_000)
    counts = np.bincount(S.sum(axis=1), minlength=n + 1)[1:n]
    expected = kernel_size_distribution(n).probs * counts.sum()
    assert counts.sum() == 100_000
    assert chisquare(counts, expected).pvalue > 0.01


def test_one_pair_gives_half_diagonal():
    state = new_state(5, 0)
    s = np.array([1, 0, 1, 1, 0], bool)
    accumulate(state, np.vstack([s, ~s]), [3.0, 1.0])
    assert np.all(np.diag(state.A_hat) == 0.5)
    assert state.b.tolist() == [1.5, 0.5, 1.5, 1.5, 0.5]


def test_zero_emissions_zero_b():
    state = new_state(4, 0)
    accumulate(state, sample_paired_batch(new_state(4, 1), 50), np.zeros(50))
    assert np.all(state.b == 0)


def test_merge_equals_single_pass():
    rng = np.random.default_rng(0)
    S = sample_paired_batch(new_state(6, 2), 400)
    c = rng.normal(size=400)
    whole = accumulate(new_state(6, 2), S, c)
    a = accumulate(new_state(6, 2), S[:150], c[:150])
    b = accumulate(new_state(6, 2), S[150:], c[150:])
    m = merge(a, b)
    assert np.abs(m.A_hat - whole.A_hat).max() <= 1e-12
    assert np.abs(m.b - whole.b).max() <= 1e-12
    assert m.M == 400


def test_known_solution_is_recovered():
    n = 6
    state = accumulate(new_state(n, 0), sample_paired_batch(new_state(n, 4), 2000), np.zeros(2000))
    y = np.random.default_rng(1).normal(size=n)
    state.b_sum = state.ss_sum @ y
    x = solve_constrained_wls(state, y.sum()).x
    assert np.abs(x - y).max() <= 1e-10


def test_two_entity_closed_form():
    rng = np.random.default_rng(5)
    S = sample_paired_batch(new_state(2, 9), 64)
    c = rng.normal(size=64)
    state = accumulate(new_state(2, 9), S, c)
    assert state.A_hat[0, 1] == 0
    b = state.b
    cf = 3.7
    x = solve_constrained_wls(state, cf).x
    assert x == pytest.approx([cf / 2 + (b[0] - b[1]), cf / 2 - (b[0] - b[1])], abs=1e-12)


def test_efficiency_always_holds():
    for seed in range(20):
        table = random_table(7, seed)
        res = kernel_estimate(7, table, table.grand, 1000, seed)
        assert abs(res.x.sum() - table.grand) <= 1e-9 * max(1, abs(table.grand))


def test_singular_moment_matrix_needs_more_samples():
    state = accumulate(new_state(4, 0), np.array([[1, 1, 0, 0], [0, 0, 1, 1]], bool), [1.0, 2.0])
    with pytest.raises(NeedsMoreSamplesError):
        solve_constrained_wls(state, 3.0)


def test_kernelshap_three_entity_game(game3):
    s, oc = game3
    exact = np.array([1.5, -1.0, 1.5])
    for seed in (0, 1):
        res = kernelshap_allocate(s, oc, 1_000_000, seed)
        assert relative_l2(res.x, exact) <= 0.005
        assert res.M == 1_000_000 and res.seed == seed


def test_kernelshap_deterministic(game3):
    s, oc = game3
    a = kernelshap_allocate(s, oc, 50_000, 4)
    b = kernelshap_allocate(s, oc, 50_000, 4)
    assert np.array_equal(a.x, b.x)


def test_doubling_samples_does_not_hurt_in_median():
    table = random_table(8, 2)
    exact = exact_shapley(table).x
    e1 = [relative_l2(kernel_estimate(8, table, table.grand, 4_000, s).x, exact) for s in range(20)]
    e2 = [relative_l2(kernel_estimate(8, table, table.grand, 8_000, s).x, exact) for s in range(20)]
    assert np.median(e2) <= np.median(e1)


def test_pairing_reduces_variance():
    rng_tables = [random_table(6, 100 + k) for k in range(3)]
    for table in rng_tables:
        paired = np.array([kernel_estimate(6, table, table.grand, 400, s).x for s in range(50)])
        unpaired = np.array([kernel_estimate(6, table, table.grand, 400, s, paired=False).x for s in range(50)])
        assert paired.var(axis=0).sum() <= unpaired.var(axis=0).sum()


def test_trajectory_checkpoints_match_shorter_runs():
    table = random_table(6, 8)
    ks = log_checkpoints(40_000, 20, k_min=100)
    res = kernel_estimate(6, table, table.grand, 40_000, 3, checkpoints=ks)
    traj = res.info["trajectory"]
    assert traj.k.tolist() == ks.tolist()
    for k, xk in zip(traj.k[::5], traj.x[::5]):
        assert xk == pytest.approx(kernel_estimate(6, table, table.grand, int(k), 3).x, abs=1e-9)
    assert np.array_equal(traj.x[-1], res.x)


def test_tail_checkpoints_cover_last_fraction():
    ks = tail_checkpoints(4_000_000, 0.1, 100)
    assert ks[0] == 3_600_000 and ks[-1] == 4_000_000
    assert np.all(ks % 2 == 0)
    assert len(ks) >= 90


def test_stratified_constant_game():
    s = synthesize_system(2, 1, 2, 3, seed=0)
    oc = generate_scenario(s, 1, 0)[0]
    zero = lambda conditions, S: np.zeros(len(S))
    res = stratified_mc_allocate(s, oc, 5_000, 1, zero)
    assert np.all(res.x == 0)


def test_stratified_three_entity_game(game3):
    s, oc = game3
    res = stratified_mc_allocate(s, oc, 1_000_000, 2)
    assert relative_l2(res.x, [1.5, -1.0, 1.5]) <= 0.01
    assert "efficiency_residual" in res.info


def test_stratified_residual_reported_nonzero():
    s = synthesize_system(3, 2, 3, 4, seed=1)
    oc = generate_scenario(s, 1, 0)[0]
    table = tabulate_characteristic(s, oc)
    res = stratified_mc_allocate(s, oc, 2_000, 1, table.as_oracle())
    assert res.info["efficiency_residual"] != 0


def test_odd_sample_count_rejected():
    table = random_table(4, 0)
    with pytest.raises(ValueError, match="even"):
        kernel_estimate(4, table, table.grand, 1001, 0)


def test_auto_sample_count_rule():
    table = random_table(6, 5)
    M = auto_sample_count(6, table, table.grand, 0, M_start=1000)
    assert M % 2 == 0 and M >= 1000
    a = np.linalg.norm(kernel_estimate(6, table, table.grand, M, 0).x)
    M2 = int(np.ceil(M * 1.1)) + 1
    M2 -= M2 % 2
    b = np.linalg.norm(kernel_estimate(6, table, table.grand, M2, 0).x)
    assert abs(a - b) <= 1e-3 * a * 1.0001
