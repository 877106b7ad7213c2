import itertools
from math import comb

import numpy as np
import pytest
from scipy.stats import chi2

from sdlss import theory as th
from sdlss.data import make_planted, sparse_latents
from sdlss.errors import BudgetError, ConfigError
from sdlss.models import GeneratorModel, build_generator, gen_forward

from oracles import brute_regions


def spec(normals, offsets, s=None):
    return th.ArrangementSpec(np.array(normals, float), np.array(offsets, float), s)


def test_small_arrangements():
    assert th.count_regions_exact(spec([[1, 0]], [0])) == 2
    assert th.count_regions_exact(spec([[1, 0], [0, 1]], [0, 0])) == 4
    assert th.count_regions_exact(spec(np.zeros((0, 2)), [])) == 1
    # three lines through one point: 6 cells, not the generic 7
    three = spec([[1, 0], [0, 1], [1, 1]], [0, 0, 0])
    assert not th.is_simple(three)
    assert th.count_regions_exact(three) == 6
    assert not th.is_simple(spec([[1, 0], [2, 0]], [0, 1]))


@pytest.mark.parametrize("h", range(1, 7))
def test_plane_formula_against_sampling_oracle(h):
    a = th.random_arrangement(2, h, seed=h)
    count = th.count_regions_exact(a)
    assert count == 1 + h + h * (h - 1) // 2
    # random sampling can miss tiny bounded cells, so it is only a lower bound
    sampled = brute_regions(a.normals, a.offsets, seed=h)
    assert sampled <= count
    if h >= 2:
        assert th.count_regions_vertices(a) == count


def test_random_arrangements_match_closed_form_and_vertex_count():
    rng = np.random.default_rng(0)
    for _ in range(50):
        k, h = int(rng.integers(1, 4)), int(rng.integers(1, 11))
        a = th.random_arrangement(k, h, seed=rng)
        c = th.count_regions_exact(a)
        assert c == th.general_position_count(h, k) == sum(comb(h, i) for i in range(k + 1))
        if h >= k:
            assert th.count_regions_vertices(a) == c


def test_cells_have_interior_witnesses():
    a = th.random_arrangement(3, 6, seed=4)
    for pattern in th.enumerate_cells(a):
        p = th._interior_point(a.normals, a.offsets, np.array(pattern))
        assert p is not None
        assert np.all(np.array(pattern) * (a.normals @ p - a.offsets) > 0)


def test_restricted_counts():
    a = th.random_arrangement(3, 5, 3, seed=1)
    assert th.count_regions_restricted(a, 3) == th.count_regions_exact(a)
    # one hyperplane, two axes each cut once
    assert th.count_regions_restricted(spec([[1, 1]], [0.5]), 1) == 4
    r = th.random_arrangement(4, 5, 2, seed=3, restricted=True)
    total = th.count_regions_restricted(r)
    assert total == 6 * 16 == th.restricted_bound(4, 2, 5)
    for c in itertools.combinations(range(4), 2):
        sub = r.restrict(c)
        assert th.count_regions_vertices(sub) == 16
        assert brute_regions(sub.normals, sub.offsets, seed=7) <= 16


def test_restricted_bound_holds_for_random_cases():
    rng = np.random.default_rng(2)
    for _ in range(15):
        k = int(rng.integers(2, 5))
        s, h = int(rng.integers(1, k + 1)), int(rng.integers(1, 7))
        a = th.random_arrangement(k, h, s, seed=rng, restricted=True)
        assert th.count_regions_restricted(a) == th.restricted_bound(k, s, h)
    # degenerate (parallel) planes can only lose cells
    d = spec([[1, 0, 0], [2, 0, 0], [0, 1, 1]], [0, 1, 0], 2)
    assert th.count_regions_restricted(d) < th.restricted_bound(3, 2, 3)


def test_budget_refusals():
    big = th.ArrangementSpec(np.ones((13, 4)), np.zeros(13))
    with pytest.raises(BudgetError, match="k <= 3 or h <= 12"):
        th.count_regions_exact(big)
    with pytest.raises(BudgetError):
        th.count_regions_restricted(th.ArrangementSpec(np.ones((20, 6)), np.zeros(20), 3))
    with pytest.raises(ConfigError):
        th.count_regions_restricted(spec([[1, 0]], [0]), s=3)


def test_generator_pieces():
    lin = GeneratorModel([np.ones((5, 3))], [np.zeros(5)])
    assert th.count_generator_pieces(lin, 2, samples=500, seed=0).patterns == 1
    one = build_generator([3, 1, 4], seed=0)
    assert th.count_generator_pieces(one, 2, samples=2000, seed=0).patterns <= 2
    G = build_generator([3, 6, 5], seed=1)
    rep = th.count_generator_pieces(G, 2, samples=20000, seed=0)
    assert rep.patterns <= 6 * sum(comb(12, i) for i in range(3))
    # tighter: the one-hidden-layer patterns live in the first-layer arrangement cells
    first = th.first_layer_arrangement(G)
    assert rep.patterns <= th.count_regions_restricted(first, 2)
    assert rep.ok and rep.d == 1 and rep.t == 2
    deep = build_generator([4, 5, 5, 3], seed=2)
    rep = th.count_generator_pieces(deep, 2, samples=20000, seed=0)
    assert rep.patterns <= th.pieces_ceiling(4, 2, 5, 2, 2)


def test_srec_pairs_and_identity_generator():
    A = np.random.default_rng(0).standard_normal((3, 10))
    X = np.random.default_rng(1).standard_normal((50, 10))
    assert not th.srec_violations(A, X, X, 0.5, 0.0).any()
    # identity generator: the check reduces to s-sparse vectors under A
    ident = GeneratorModel([np.eye(12)], [np.zeros(12)])
    rep = th.verify_srec(ident, 3, 6, 0.5, trials=3000, seed=4)
    rng = np.random.default_rng(4)
    hits, done = 0, 0
    while done < 3000:
        B = min(1000, 3000 - done)
        Z1, Z2 = sparse_latents(B, 12, 3, rng), sparse_latents(B, 12, 3, rng)
        As = rng.standard_normal((B, 6, 12)) / np.sqrt(6)
        for A_i, u in zip(As, Z1 - Z2):
            hits += np.linalg.norm(A_i @ u) < 0.5 * np.linalg.norm(u)
        done += B
    assert rep.violations == hits


def test_srec_rate_matches_chi_square_law():
    G = build_generator([16, 32, 64], seed=0)
    for m in (2, 4, 8):
        rep = th.verify_srec(G, 4, m, 0.5, trials=4000, seed=m)
        assert rep.bound_rate == pytest.approx(chi2.cdf(m * 0.25, m))
        assert abs(rep.empirical_rate - rep.bound_rate) < 3 * np.sqrt(rep.bound_rate * (1 - rep.bound_rate) / 4000)
        assert rep.empirical_rate == rep.violations / rep.trials
    near = th.verify_srec(G, 4, 64, 0.9, trials=10000, seed=1)
    assert near.violations == 0
    with pytest.raises(ConfigError):
        th.verify_srec(G, 4, 8, 1.0)


def test_srec_sweep_monotone_and_thread_invariant():
    G = build_generator([16, 32, 64], seed=0)
    ms = [2, 4, 8, 16, 32]
    a = th.srec_sweep(G, 4, ms, 0.5, trials=2000, seed=3)
    b = th.srec_sweep(G, 4, ms, 0.5, trials=2000, seed=3, threads=3)
    assert [r.violations for r in a] == [r.violations for r in b]
    assert th.nonincreasing_within([r.empirical_rate for r in a], [r.std_err for r in a])
    assert not th.nonincreasing_within([0.1, 0.5], [0.01, 0.01])


def test_sample_complexity_sweep_regimes():
    planted = make_planted(20, 3, 100, 30, seed=0)
    cfg = th.recovery_config(3)
    rows = th.sample_complexity_sweep(planted, [1, 10, 100], cfg, instances=30, seed=0, threads=2)
    assert rows[0].median_rel_err > 0.2
    assert rows[-1].median_rel_err < 0.02
    assert th.nonincreasing_within([r.median_rel_err for r in rows], [r.std_err for r in rows])
    assert all(r.q25 <= r.median_rel_err <= r.q75 for r in rows)
    again = th.sample_complexity_sweep(planted, [10], cfg, instances=30, seed=0)
    assert again[0] == rows[1]
