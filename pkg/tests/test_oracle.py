import itertools
import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from metaafa.oracle import (
    CmiQuery,
    GPMarginalOracle,
    PositivityError,
    ZeroProbabilityError,
    argmax_set,
    exact_cmi,
    expected_conditional_entropy,
    expected_one_step_loss,
    gp_posterior,
    identification_check,
    oracle_greedy_policy,
)
from metaafa.taskgen import DiscreteWorldSpec, sample_discrete_world
from metaafa.taskgen.discrete import (
    Propensity,
    channel_world,
    copy_channel,
    independent_channel,
    symmetric_channel,
)
from metaafa.taskgen.priors import kernel_matrix


def binary_entropy(p):
    return -p * math.log(p) - (1 - p) * math.log(1 - p)


def loop_cmi(world, assignment, j, complete_case):
    """I(X_j; Y | assignment) by explicit iteration over every cell of the joint table."""
    pxy = np.zeros((world.supports[j], world.supports[-1]))
    for cell in itertools.product(*[range(s) for s in world.supports]):
        if any(cell[a] != v for a, v in assignment.items()):
            continue
        w = world.pmf[cell]
        if complete_case:
            prop = world.propensities[j - 1]
            w *= float(prop.table[tuple(cell[p] for p in prop.parents)])
        pxy[cell[j], cell[-1]] += w
    pxy /= pxy.sum()
    px, py = pxy.sum(1), pxy.sum(0)
    return sum(pxy[a, b] * math.log(pxy[a, b] / (px[a] * py[b]))
               for a in range(pxy.shape[0]) for b in range(pxy.shape[1]) if pxy[a, b] > 0)


# -- discrete CMI -------------------------------------------------------------


def test_cmi_examples():
    indep = channel_world([0.4, 0.6], [independent_channel([0.3, 0.7])])
    assert exact_cmi(CmiQuery(indep, {}, 1)) == pytest.approx(0.0, abs=1e-15)
    copy = channel_world([0.5, 0.5], [copy_channel()])
    assert abs(exact_cmi(CmiQuery(copy, {}, 1)) - math.log(2)) < 1e-12
    bsc = channel_world([0.5, 0.5], [symmetric_channel(0.1)])
    expected = math.log(2) - binary_entropy(0.1)
    assert abs(exact_cmi(CmiQuery(bsc, {}, 1)) - expected) < 1e-10
    assert expected == pytest.approx(0.368064, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cmi_matches_loop_reference_and_bounds(seed):
    rng = np.random.default_rng(seed)
    spec = DiscreteWorldSpec(feature_supports=(2, 3, 2), n_classes=3, baseline_support=2, mechanism="mnar")
    world = sample_discrete_world(spec, rng)
    assignment = {0: int(rng.integers(2)), 3: int(rng.integers(2))}
    p = _label_given(world, assignment)
    hy = -float(np.sum(p * np.log(p)))
    for j in (1, 2):
        for cc in (False, True):
            got = exact_cmi(CmiQuery(world, assignment, j, complete_case=cc))
            assert abs(got - loop_cmi(world, assignment, j, cc)) < 1e-12
            assert got >= -1e-15
        assert exact_cmi(CmiQuery(world, assignment, j)) <= hy + 1e-12


def _label_given(world, assignment):
    idx = tuple(assignment.get(a, slice(None)) for a in range(world.pmf.ndim))
    sub = world.pmf[idx]
    p = sub.reshape(-1, world.supports[-1]).sum(0)
    return p / p.sum()


def test_identification_under_mar():
    rng = np.random.default_rng(0)
    spec = DiscreteWorldSpec(feature_supports=(2, 2, 3), baseline_support=3, mechanism="mar")
    for _ in range(30):
        world = sample_discrete_world(spec, rng)
        a = {0: int(rng.integers(3)), 1: int(rng.integers(2))}
        for j in (2, 3):
            assert abs(identification_check(world, a, j)["gap"]) < 1e-10


def test_identification_fails_under_mnar():
    # X1 is a noisy copy of Y and is observed almost only when it equals 1
    world = channel_world([0.5, 0.5], [symmetric_channel(0.2)], [Propensity((1,), np.array([0.02, 1.0]))])
    assert identification_check(world, {}, 1)["gap"] > 0.01


def test_no_missingness_gives_zero_gap_exactly():
    rng = np.random.default_rng(1)
    world = sample_discrete_world(DiscreteWorldSpec(mechanism="none"), rng)
    for j in (1, 2, 3):
        assert identification_check(world, {}, j)["gap"] == 0.0


def test_positivity_and_zero_probability_errors():
    world = channel_world([0.5, 0.5], [copy_channel(), copy_channel()],
                          [Propensity((), np.array(1.0)), Propensity((1,), np.array([0.0, 1.0]))])
    with pytest.raises(PositivityError):
        exact_cmi(CmiQuery(world, {1: 0}, 2, complete_case=True))
    # X1 = Y = X2, so X1 = 0 with X2 = 1 never happens
    with pytest.raises(ZeroProbabilityError):
        exact_cmi(CmiQuery(channel_world([0.5, 0.5], [copy_channel(), copy_channel(), copy_channel()]),
                           {1: 0, 2: 1}, 3))
    with pytest.raises(ValueError):
        exact_cmi(CmiQuery(world, {1: 0}, 1))


# -- oracle greedy ------------------------------------------------------------


def test_oracle_greedy_picks_copy_feature():
    for j_copy in (1, 2, 3):
        chans = [copy_channel() if j == j_copy else symmetric_channel(0.3) for j in (1, 2, 3)]
        world = channel_world([0.45, 0.55], chans)
        assert oracle_greedy_policy(world, {}, [1, 2, 3]) == j_copy


def test_oracle_greedy_ties_go_to_lowest_index():
    world = channel_world([0.5, 0.5], [symmetric_channel(0.2)] * 3)
    assert argmax_set({1: 0.3, 2: 0.3, 3: 0.1}) == {1, 2}
    assert oracle_greedy_policy(world, {}, [3, 2]) == 2
    assert oracle_greedy_policy(world, {}, [1, 2, 3]) == 1
    with pytest.raises(ValueError):
        oracle_greedy_policy(world, {}, [])


def test_oracle_greedy_matches_exhaustive_search():
    rng = np.random.default_rng(2)
    spec = DiscreteWorldSpec(feature_supports=(2, 2, 2), baseline_support=2, mechanism="mar")
    for _ in range(20):
        world = sample_discrete_world(spec, rng)
        a = {0: int(rng.integers(2))}
        scores = {j: loop_cmi(world, a, j, True) for j in (1, 2, 3)}
        assert oracle_greedy_policy(world, a, [1, 2, 3]) == max(scores, key=scores.get)
        # the same choice minimises the expected posterior entropy and the Bayes one-step loss
        ent = {j: expected_conditional_entropy(world, a, j) for j in (1, 2, 3)}
        assert min(ent, key=ent.get) == max(scores, key=scores.get)
        for j in (1, 2, 3):
            assert abs(expected_one_step_loss(world, a, j) - ent[j]) < 1e-12


# -- Gaussian processes -------------------------------------------------------


def _gp_problem(n=20, d=2, seed=0, noise=0.1):
    rng = np.random.default_rng(seed)
    hp = {"kernel": "rbf", "lengthscales": [0.8, 1.3][:d], "outputscale": 1.5, "noise_std": noise}
    X = rng.standard_normal((n, d))
    y = rng.standard_normal(n)
    return hp, X, y, rng.standard_normal((7, d))


def test_gp_empty_context_is_prior():
    hp, _, _, Xq = _gp_problem()
    post = gp_posterior(hp, np.zeros((0, 2)), np.zeros(0), Xq)
    assert np.all(post.mean == 0) and np.allclose(post.var, 1.5 + 0.01)


def test_gp_interpolates_with_tiny_noise():
    hp, X, y, _ = _gp_problem(n=5, noise=1e-6)
    post = gp_posterior(hp, X, y, X)
    assert np.max(np.abs(post.mean - y)) < 1e-6
    assert np.max(post.var) < 1e-9


def test_gp_nll_matches_lu_reference():
    hp, X, y, Xq = _gp_problem(n=20)
    yq = np.random.default_rng(9).standard_normal(len(Xq))
    post = gp_posterior(hp, X, y, Xq)
    K = kernel_matrix("rbf", X, X, np.asarray(hp["lengthscales"]), 1.5) + 0.01 * np.eye(20)
    Ks = kernel_matrix("rbf", X, Xq, np.asarray(hp["lengthscales"]), 1.5)
    lu = scipy.linalg.lu_factor(K)
    mean = Ks.T @ scipy.linalg.lu_solve(lu, y)
    var = 1.5 - np.sum(Ks * scipy.linalg.lu_solve(lu, Ks), 0) + 0.01
    ref = 0.5 * (np.log(2 * np.pi * var) + (yq - mean) ** 2 / var)
    assert np.max(np.abs(post.nll(yq) - ref)) < 1e-8


def test_gp_variance_shrinks_with_more_context():
    hp, X, y, Xq = _gp_problem(n=40)
    variances = [gp_posterior(hp, X[:n], y[:n], Xq).var for n in (0, 5, 10, 20, 40)]
    for a, b in zip(variances, variances[1:]):
        assert np.all(b <= a + 1e-12)


def test_marginal_oracle_fully_observed_matches_posterior():
    hp, X, y, Xq = _gp_problem(n=15)
    oracle = GPMarginalOracle(hp, X, y)
    got = oracle.predictive(Xq, np.ones_like(Xq, dtype=bool))
    ref = gp_posterior(hp, X, y, Xq)
    assert np.max(np.abs(got.mean - ref.mean)) < 1e-10
    assert np.max(np.abs(got.var - ref.var)) < 1e-10


def test_marginal_oracle_matches_quadrature():
    hp, X, y, Xq = _gp_problem(n=12, d=2)
    oracle = GPMarginalOracle(hp, X, y)
    nodes, weights = np.polynomial.hermite_e.hermegauss(80)
    weights = weights / weights.sum()
    observed = np.array([[True, False]] * len(Xq))
    got = oracle.predictive(Xq, observed)
    for i, xq in enumerate(Xq):
        pts = np.repeat(xq[None], len(nodes), 0)
        pts[:, 1] = nodes
        post = gp_posterior(hp, X, y, pts)
        mean = weights @ post.mean
        var = weights @ post.var + weights @ (post.mean - mean) ** 2
        assert abs(got.mean[i] - mean) < 1e-8
        assert abs(got.var[i] - var) < 1e-8


def test_marginal_oracle_greedy_prefers_relevant_feature():
    rng = np.random.default_rng(3)
    hp = {"kernel": "rbf", "lengthscales": [0.5, 50.0], "outputscale": 1.0, "noise_std": 0.05}
    X = rng.standard_normal((60, 2))
    y = np.sin(2 * X[:, 0])
    oracle = GPMarginalOracle(hp, X, y)
    assert oracle.greedy(np.zeros(2), np.array([False, False]), [0, 1]) == 0
    with pytest.raises(ValueError):
        GPMarginalOracle({**hp, "kernel": "matern52"}, X, y)
