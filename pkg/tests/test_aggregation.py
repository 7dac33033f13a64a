import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from qasplitfed import aggregation as agg
from qasplitfed.errors import ConfigurationError, DataError
from qasplitfed.params import ParamVector

REFERENCE_COUNTS = [210, 120, 85, 180, 120]


def scalar_snaps(values, server=None):
    server = values if server is None else server
    return [agg.ClientSnapshot(i, ParamVector([("w", np.array([float(v)]))]),
                               ParamVector([("s", np.array([float(s)]))]))
            for i, (v, s) in enumerate(zip(values, server))]


def random_snaps(rng, n, size=7):
    return [agg.ClientSnapshot(i, ParamVector([("fe", rng.normal(size=(size,))), ("be", rng.normal(size=(2, 3)))]),
                               ParamVector([("trunk", rng.normal(size=(size + 1,)))]))
            for i in range(n)]


def mp_weights(b, d, dps=50):
    """High-precision scalar recomputation of r = softmax(1/b) * d / (q . d)."""
    with mpmath.workdps(dps):
        x = [1 / mpmath.mpf(max(bi, agg.BOUND_FLOOR)) for bi in b]
        e = [mpmath.exp(xi) for xi in x]
        z = mpmath.fsum(e)
        q = [ei / z for ei in e]
        w = [qi * mpmath.mpf(di) for qi, di in zip(q, d)]
        s = mpmath.fsum(w)
        return [float(wi / s) for wi in w]


# -- loss bound --------------------------------------------------------------

def test_loss_bound_population_example():
    s = agg.loss_bound([0.1, 0.2, 0.3])
    assert s.mean == pytest.approx(0.2, abs=1e-15)
    assert s.std == pytest.approx(math.sqrt(0.02 / 3), abs=1e-15)
    assert s.std == pytest.approx(0.081650, abs=5e-7)
    assert s.bound == pytest.approx(0.363299, abs=5e-7)
    assert s.bound == s.mean + 2 * s.std and s.count == 3


def test_loss_bound_degenerate_cases():
    assert agg.loss_bound([0.5]).bound == 0.5
    assert agg.loss_bound([0.7] * 9).bound == 0.7
    assert agg.loss_bound([0.1, 0.3], ddof=1).std == pytest.approx(math.sqrt(0.02), rel=1e-14)
    for bad in ([], [float("nan")], [-0.1], [float("inf")]):
        with pytest.raises(DataError):
            agg.loss_bound(bad)


@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=50))
def test_loss_bound_matches_numpy(losses):
    s = agg.loss_bound(losses)
    assert s.std >= 0 and s.mean >= 0
    assert s.mean == pytest.approx(np.mean(losses), rel=1e-12, abs=1e-12)
    assert s.std == pytest.approx(np.std(losses), rel=1e-9, abs=1e-12)


# -- data scores and weights ------------------------------------------------

def test_reference_counts_give_expected_scores():
    d = agg.data_scores(REFERENCE_COUNTS)
    np.testing.assert_allclose(d.scores, [0.29371, 0.16783, 0.11888, 0.25175, 0.16783], atol=5e-6)
    assert abs(math.fsum(d.scores) - 1) <= 1e-12


def test_data_scores_reject_bad_counts():
    with pytest.raises(DataError):
        agg.data_scores([3, 0])
    with pytest.raises(DataError):
        agg.DataScores(np.array([0.5, 0.6]))


def test_two_client_example_nearly_excludes_unreliable_client():
    w = agg.averaging_weights([0.1, 10.0], [0.5, 0.5])
    assert w.q[0] == pytest.approx(0.9999498, abs=5e-8)
    np.testing.assert_allclose(w.r, mp_weights([0.1, 10.0], [0.5, 0.5]), rtol=1e-13)
    assert w.r[0] == pytest.approx(0.99995, abs=1e-6)


def test_equal_bounds_reduce_to_data_scores_exactly():
    d = agg.data_scores(REFERENCE_COUNTS)
    w = agg.averaging_weights([0.37] * 5, d)
    assert np.array_equal(w.r, d.scores)


def test_zero_bound_is_clamped_not_infinite():
    w = agg.averaging_weights([0.0, 0.5], [0.5, 0.5])
    assert np.all(np.isfinite(w.r)) and w.r[0] == 1.0
    with pytest.raises(DataError):
        agg.averaging_weights([float("nan"), 1.0], [0.5, 0.5])


def test_single_client_is_identity():
    snaps = random_snaps(np.random.default_rng(0), 1)
    c, s, w = agg.model_updates(snaps, [0.3], [1.0])
    assert w.r.tolist() == [1.0]
    assert c.equal(snaps[0].client_params) and s.equal(snaps[0].server_params)


def test_mismatched_lengths_are_configuration_errors():
    snaps = scalar_snaps([1, 2])
    with pytest.raises(ConfigurationError):
        agg.model_updates(snaps, [0.1], [0.5, 0.5])
    with pytest.raises(ConfigurationError):
        agg.fedavg(snaps, [1])
    other = [snaps[0], agg.ClientSnapshot(1, ParamVector([("v", np.ones(1))]), snaps[1].server_params)]
    with pytest.raises(ConfigurationError):
        agg.naive_average(other)


bounds = st.floats(0.05, 5.0, allow_nan=False)


@given(st.lists(st.tuples(bounds, st.integers(1, 300)), min_size=1, max_size=8))
def test_weights_are_normalized_and_non_negative(pairs):
    b, m = zip(*pairs)
    w = agg.averaging_weights(b, agg.data_scores(m))
    assert abs(math.fsum(w.r) - 1) <= 1e-12
    assert np.all(w.r >= 0)


@given(st.lists(bounds, min_size=2, max_size=8), st.data())
def test_more_reliable_client_gets_more_weight(b, data):
    i, j = data.draw(st.permutations(range(len(b))))[:2]
    assume(abs(1 / b[i] - 1 / b[j]) > 1e-9)
    w = agg.averaging_weights(b, [1.0 / len(b)] * len(b))
    lo, hi = (i, j) if b[i] < b[j] else (j, i)
    assert w.r[lo] > w.r[hi]


def test_dominance_as_bound_grows():
    d = [0.25] * 4
    others = [0.1, 0.12, 0.15]
    rs = [agg.averaging_weights(others + [bj], d).r[-1] for bj in (0.2, 1.0, 10.0, 1e6)]
    assert all(a > b for a, b in zip(rs, rs[1:]))
    assert rs[-1] < 1e-4
    # the limit is set by the other clients: softmax(1/b) keeps e^0 for b -> inf
    x = [1 / v for v in others]
    limit = 1 / (sum(math.exp(v) for v in x) + 1)
    assert rs[-1] == pytest.approx(limit, rel=1e-4)


# -- averaging ---------------------------------------------------------------

def test_naive_average_of_scalars():
    c, s, w = agg.naive_average(scalar_snaps([1, 2, 3]))
    assert c["w"][0] == 2.0 and s["s"][0] == 2.0
    assert w.r.tolist() == [1 / 3] * 3


def test_fedavg_scalar_example():
    c, _, w = agg.fedavg(scalar_snaps([1, 2, 3, 4, 5]), REFERENCE_COUNTS)
    assert c["w"][0] == pytest.approx(2025 / 715, rel=1e-15)
    assert c["w"][0] == pytest.approx(2.83217, abs=5e-6)


def test_fedavg_rejects_zero_counts():
    with pytest.raises(DataError):
        agg.fedavg(scalar_snaps([1, 2]), [0, 1])


def test_fedavg_single_client_identity():
    snaps = random_snaps(np.random.default_rng(3), 1)
    c, s, _ = agg.fedavg(snaps, [17])
    assert c.equal(snaps[0].client_params) and s.equal(snaps[0].server_params)


def test_equal_counts_fedavg_equals_naive(rng):
    snaps = random_snaps(rng, 4)
    a, b = agg.naive_average(snaps), agg.fedavg(snaps, [9] * 4)
    assert a[0].equal(b[0]) and a[1].equal(b[1])


def test_equal_bounds_and_uniform_scores_match_naive(rng):
    snaps = random_snaps(rng, 5)
    c1, s1, _ = agg.model_updates(snaps, [0.4] * 5, agg.data_scores([1] * 5))
    c2, s2, _ = agg.naive_average(snaps)
    assert c1.to_bytes() == c2.to_bytes() and s1.to_bytes() == s2.to_bytes()


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.data())
def test_permutation_equivariance(seed, n, data):
    rng = np.random.default_rng(seed)
    snaps = random_snaps(rng, n)
    b = rng.uniform(0.05, 3.0, n)
    m = rng.integers(1, 100, n)
    perm = data.draw(st.permutations(range(n)))
    c, s, w = agg.model_updates(snaps, b, agg.data_scores(m))
    cp, sp, wp = agg.model_updates([snaps[i] for i in perm], b[perm], agg.data_scores(m[perm]))
    np.testing.assert_allclose(wp.r, w.r[perm], rtol=1e-15, atol=0)
    assert c.to_bytes() == cp.to_bytes() and s.to_bytes() == sp.to_bytes()


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.sampled_from(["qa", "fedavg", "naive"]))
def test_average_lies_in_client_hull(seed, n, strategy):
    rng = np.random.default_rng(seed)
    snaps = random_snaps(rng, n)
    m = rng.integers(1, 100, n)
    if strategy == "qa":
        c, s, _ = agg.model_updates(snaps, rng.uniform(0.01, 3.0, n), agg.data_scores(m))
    elif strategy == "fedavg":
        c, s, _ = agg.fedavg(snaps, m)
    else:
        c, s, _ = agg.naive_average(snaps)
    for got, parts in ((c, [x.client_params for x in snaps]), (s, [x.server_params for x in snaps])):
        stack = np.stack([p.flat() for p in parts])
        assert np.all(got.flat() >= stack.min(0)) and np.all(got.flat() <= stack.max(0))


# -- server momentum ------------------------------------------------------------

def test_fedavg_m_first_round_is_fedavg_with_zero_velocity(rng):
    snaps = random_snaps(rng, 3)
    c, s, _, st_ = agg.fedavg_m(snaps, [3, 4, 5], agg.MomentumState(0.9))
    c0, s0, _ = agg.fedavg(snaps, [3, 4, 5])
    assert c.equal(c0) and s.equal(s0)
    assert not st_.velocity_client.flat().any()


def test_fedavg_m_zero_momentum_equals_fedavg_every_round(rng):
    state = agg.MomentumState(0.0)
    for _ in range(4):
        snaps = random_snaps(rng, 3)
        c, s, _, state = agg.fedavg_m(snaps, [5, 2, 7], state)
        c0, s0, _ = agg.fedavg(snaps, [5, 2, 7])
        assert c.to_bytes() == c0.to_bytes() and s.to_bytes() == s0.to_bytes()


def test_fedavg_m_constant_pseudo_gradient_accumulates():
    # each round the clients sit one unit below the current global model
    state = agg.MomentumState(0.9)
    g = 10.0
    c, _, _, state = agg.fedavg_m(scalar_snaps([g]), [1], state)
    g = c["w"][0]
    steps = []
    for _ in range(3):
        c, _, _, state = agg.fedavg_m(scalar_snaps([g - 1.0]), [1], state)
        steps.append(g - c["w"][0])
        g = c["w"][0]
    np.testing.assert_allclose(steps, [1.0, 1.9, 2.71], atol=1e-12)


def test_fedavg_m_zero_delta_keeps_model():
    state = agg.MomentumState(0.9)
    c, _, _, state = agg.fedavg_m(scalar_snaps([2.5]), [1], state)
    c2, _, _, state = agg.fedavg_m(scalar_snaps([2.5]), [1], state)
    assert c2["w"][0] == 2.5


def test_momentum_must_be_in_unit_interval():
    with pytest.raises(ConfigurationError):
        agg.MomentumState(1.0)
