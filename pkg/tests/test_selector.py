import math

import pytest
from hypothesis import given, settings, strategies as st

from markermap import nn, selector as sel, tensor as T
from markermap.errors import ShapeError
from markermap.rng import Rng
from markermap.tensor import Matrix


# -- temperature schedule ------------------------------------------------------


def test_schedule_endpoints_and_monotonicity():
    sched = sel.TemperatureSchedule(4.0, 0.01, 60)
    assert sched.tau(0) == 4.0
    assert abs(sched.tau(59) - 0.01) < 1e-9
    taus = [sched.tau(e) for e in range(60)]
    assert all(b < a for a, b in zip(taus, taus[1:]))


def test_schedule_validation():
    with pytest.raises(ValueError):
        sel.TemperatureSchedule(1.5, 0.01, 50)
    with pytest.raises(ValueError):
        sel.TemperatureSchedule(4.0, 0.5, 50)
    with pytest.raises(ValueError):
        sel.TemperatureSchedule(4.0, 0.002, 1)


# -- instance logits -------------------------------------------------------------


def constant_net(d, c):
    net = nn.Mlp([d, d], Rng(0), batchnorm=False)
    dense = net.layers[0][0]
    dense.weight.value.fill(0.0)
    dense.bias.value = Matrix.row_vector([c + j for j in range(d)])
    return net


def test_instance_logits_constant_network():
    net = constant_net(3, 5.0)
    for rows in (1, 4):
        batch = T.constant(Matrix(rows, 3, Rng(rows).normals(3 * rows)))
        out = sel.instance_logits(net, batch)
        assert out.value.to_rows() == [[5.0, 6.0, 7.0]]


def test_instance_logits_single_row_equals_network_output():
    rng = Rng(1)
    net = nn.Mlp([4, 4], rng, batchnorm=False)
    row = Matrix(1, 4, rng.normals(4))
    direct = net.forward(T.constant(row), train=True).value
    averaged = sel.instance_logits(net, T.constant(row)).value
    assert averaged == direct


def test_instance_logits_two_rows_average():
    rng = Rng(2)
    net = nn.Mlp([4, 4], rng, batchnorm=False)
    a = Matrix(1, 4, rng.normals(4))
    b = Matrix(1, 4, rng.normals(4))
    both = Matrix.from_rows([a.row(0), b.row(0)])
    out_a = net.forward(T.constant(a)).value.row(0)
    out_b = net.forward(T.constant(b)).value.row(0)
    mid = sel.instance_logits(net, T.constant(both), train=False).value.row(0)
    for m, (x, y) in zip(mid, zip(out_a, out_b)):
        assert abs(m - (x + y) / 2.0) < 1e-12


# -- aggregation -------------------------------------------------------------------


def make_state(d=4, k=2, beta=0.9, seed=0):
    sched = sel.TemperatureSchedule(4.0, 0.01, 50)
    return sel.SelectorState(d, k, sched, Rng(seed), beta=beta)


def test_aggregate_beta_zero_takes_batch():
    state = make_state(beta=0.0)
    batch = T.constant(Matrix.row_vector([1.0, 2.0, 3.0, 4.0]))
    sel.aggregate_logits(state, batch)
    assert state.logpi == batch.value


def test_aggregate_beta_one_keeps_state():
    state = make_state(beta=1.0)
    before = state.logpi.clone()
    sel.aggregate_logits(state, T.constant(Matrix.row_vector([9.0, 9.0, 9.0, 9.0])))
    assert state.logpi == before


def test_aggregate_scalar_arithmetic():
    state = make_state(d=1, k=1, beta=0.9)
    sel.aggregate_logits(state, T.constant(Matrix.scalar(10.0)))
    assert abs(state.logpi.item() - 1.0) < 1e-12


# -- sampling ------------------------------------------------------------------------


def test_sample_zero_noise_uniform_logits():
    d, k = 5, 3
    logits = T.constant(Matrix.zeros(1, d))
    for tau in (4.0, 1.0, 0.05):
        sample = sel.sample_relaxed(logits, tau, k, noise=Matrix.zeros(k, d))
        for i in range(k):
            for v in sample.gamma.value.row(i):
                assert abs(v - 1.0 / d) < 1e-12


def test_sample_low_temperature_dominant_logit():
    rng = Rng(3)
    logits = Matrix.row_vector([0.0, 100.0, 0.0, 0.0])
    sample = sel.sample_relaxed(T.constant(logits), 0.01, 8, rng)
    for i in range(8):
        assert sample.gamma.value.get(i, 1) >= 0.999


def test_sample_argmax_frequencies_match_categorical():
    # smaller-N version of the sampling-law acceptance criterion
    probs = [1 / 6, 1 / 3, 1 / 2]
    logits = T.constant(Matrix.row_vector([math.log(p) for p in probs]))
    rng = Rng(12345)
    n = 20000
    sample = sel.sample_relaxed(logits, 0.1, n, rng)
    counts = [0, 0, 0]
    gamma = sample.gamma.value
    for i in range(n):
        row = gamma.row(i)
        counts[row.index(max(row))] += 1
    for c, p in zip(counts, probs):
        assert abs(c / n - p) < 0.03


def test_sample_shift_invariance():
    rng = Rng(7)
    noise = sel.gumbel_noise(rng, 4, 6)
    base = Matrix(1, 6, Rng(8).normals(6))
    shifted = base.clone()
    for j in range(6):
        shifted.data[j] += 13.7
    a = sel.sample_relaxed(T.constant(base), 0.7, 4, noise=noise).gamma.value
    b = sel.sample_relaxed(T.constant(shifted), 0.7, 4, noise=noise).gamma.value
    for x, y in zip(a.data, b.data):
        assert abs(x - y) < 1e-12


def test_hardening_is_monotone_in_temperature():
    logits = T.constant(Matrix.row_vector([2.0, 0.0, -1.0, 0.5]))
    rng = Rng(9)
    noises = [sel.gumbel_noise(rng, 1, 4) for _ in range(200)]
    previous = 0.0
    for tau in (4.0, 2.0, 1.0, 0.5, 0.1, 0.02):
        avg_max = sum(
            max(sel.sample_relaxed(logits, tau, 1, noise=nz).gamma.value.row(0))
            for nz in noises
        ) / len(noises)
        assert avg_max >= previous - 1e-12
        previous = avg_max


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(-30, 30, allow_nan=False), min_size=2, max_size=8),
    st.floats(0.02, 8.0),
    st.integers(0, 2**32 - 1),
)
def test_sample_rows_are_probability_vectors(logit_row, tau, seed):
    logits = T.constant(Matrix.row_vector(logit_row))
    sample = sel.sample_relaxed(logits, tau, 3, Rng(seed))
    gamma = sample.gamma.value
    for i in range(3):
        row = gamma.row(i)
        assert all(v >= 0.0 for v in row)
        assert abs(sum(row) - 1.0) <= 1e-9


def test_sample_requires_positive_temperature():
    with pytest.raises(ValueError):
        sel.sample_relaxed(T.constant(Matrix.zeros(1, 3)), 0.0, 2, Rng(0))


def test_state_sampling_and_budget_validation():
    state = make_state(d=6, k=2, seed=4)
    sample = sel.sample_gumbel_softmax(state, 1.0)
    assert sample.gamma.value.shape == (2, 6)
    with pytest.raises(ShapeError):
        sel.SelectorState(3, 4, sel.TemperatureSchedule(4.0, 0.01, 10), Rng(0))


def test_prior_indices_boost_logits():
    sched = sel.TemperatureSchedule(4.0, 0.01, 10)
    state = sel.SelectorState(5, 2, sched, Rng(0), prior_indices=[1, 3])
    assert state.logpi.row(0) == [0.0, 2.0, 0.0, 2.0, 0.0]


# -- density -----------------------------------------------------------------------------


def adaptive_simpson(f, a, b, tol, depth=24):
    def simpson(lo, hi):
        mid = (lo + hi) / 2.0
        return (hi - lo) / 6.0 * (f(lo) + 4.0 * f(mid) + f(hi)), mid

    def recurse(lo, hi, whole, level):
        left, lmid = simpson(lo, (lo + hi) / 2.0)
        right, rmid = simpson((lo + hi) / 2.0, hi)
        if level <= 0 or abs(left + right - whole) < 15.0 * tol:
            return left + right
        return recurse(lo, (lo + hi) / 2.0, left, level - 1) + recurse(
            (lo + hi) / 2.0, hi, right, level - 1
        )

    whole, _ = simpson(a, b)
    return recurse(a, b, whole, depth)


def test_density_pinned_value_uniform_tau_one():
    # K=2, tau=1, uniform class probabilities: the density is uniform on the
    # simplex, so p((1/2, 1/2)) is exactly 1
    value = sel.gumbel_softmax_density([0.5, 0.5], [0.5, 0.5], 1.0)
    assert abs(value - 1.0) < 1e-12


def test_density_symmetry_under_reversal():
    pi = [0.5, 0.5]
    for tau in (0.5, 1.0, 2.0):
        a = sel.gumbel_softmax_density([0.3, 0.7], pi, tau)
        b = sel.gumbel_softmax_density([0.7, 0.3], pi, tau)
        assert abs(a - b) < 1e-12


def test_density_boundary_rejected():
    with pytest.raises(ValueError):
        sel.gumbel_softmax_density([0.0, 1.0], [0.5, 0.5], 1.0)


@pytest.mark.parametrize("tau", [0.5, 2.0])
@pytest.mark.parametrize("pi", [[0.5, 0.5], [0.2, 0.8]])
def test_density_normalizes_by_quadrature(tau, pi):
    eps = 1e-9

    def f(g):
        return sel.gumbel_softmax_density([g, 1.0 - g], pi, tau)

    integral = adaptive_simpson(f, eps, 1.0 - eps, 1e-6)
    assert abs(integral - 1.0) <= 1e-2


# -- projection ------------------------------------------------------------------------------


def test_projection_one_hot_selects_feature():
    batch = Matrix.from_rows([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    gamma = T.constant(Matrix.from_rows([[0.0, 1.0, 0.0]]))
    out = sel.project_selection(T.constant(batch), sel.GumbelSample(gamma, None))
    assert out.value.to_rows() == [[2.0], [5.0]]


def test_projection_uniform_gamma_averages():
    batch = Matrix.from_rows([[3.0, 6.0, 9.0]])
    gamma = T.constant(Matrix.full(2, 3, 1.0 / 3.0))
    out = sel.project_selection(T.constant(batch), sel.GumbelSample(gamma, None))
    for v in out.value.row(0):
        assert abs(v - 6.0) < 1e-12


def test_projection_gradient_matches_finite_differences():
    rng = Rng(21)
    batch = Matrix(4, 6, rng.normals(24))
    noise = sel.gumbel_noise(rng, 3, 6)
    base = Matrix(1, 6, rng.normals(6))
    target = Matrix(4, 3, rng.normals(12))

    def loss_for(values, as_param=False):
        node = T.parameter(values.clone()) if as_param else T.constant(values.clone())
        sample = sel.sample_relaxed(node, 0.8, 3, noise=noise)
        xs = sel.project_selection(T.constant(batch), sample)
        return node, T.mse(xs, target)

    node, loss = loss_for(base, as_param=True)
    T.backward(loss)
    eps = 1e-6
    for j in range(6):
        plus, minus = base.clone(), base.clone()
        plus.data[j] += eps
        minus.data[j] -= eps
        fd = (loss_for(plus)[1].value.item() - loss_for(minus)[1].value.item()) / (2 * eps)
        an = node.grad.data[j]
        assert abs(fd - an) / max(abs(fd), abs(an), 1e-6) < 1e-4


def test_projection_shape_mismatch():
    gamma = T.constant(Matrix.zeros(2, 4))
    with pytest.raises(ShapeError):
        sel.project_selection(T.constant(Matrix.zeros(3, 5)),
                              sel.GumbelSample(gamma, None))


# -- extraction -------------------------------------------------------------------------------


def test_extract_top_k_descending():
    assert sel.extract_markers([0.0, 3.0, 1.0, 2.0], 2) == [1, 3]


def test_extract_tie_breaks_to_lower_index():
    assert sel.extract_markers([5.0, 5.0, 5.0], 2) == [0, 1]


def test_extract_budget_validation():
    with pytest.raises(ShapeError):
        sel.extract_markers([1.0, 2.0], 3)
