"""Relaxed categorical feature selection.

A selection layer holds one global log-logit vector over the d input
features, maintained as an exponential moving average of per-batch
instance-wise logits. Each of the K selector nodes draws independent
Gumbel(0,1) noise and emits a temperature-softened near-one-hot row
gamma^(k) = softmax((logpi + g^(k)) / tau); projecting a batch onto the
stacked rows yields its K-dimensional selected representation. Annealing
tau toward zero hardens the selection.
"""

import math

from markermap import tensor as T
from markermap.errors import ShapeError
from markermap.tensor import Matrix


class TemperatureSchedule:
    """Exponential per-epoch decay from tau_initial to tau_final.

    tau(0) = tau_initial and tau(epochs - 1) = tau_final exactly; strictly
    decreasing in between.
    """

    def __init__(self, tau_initial=4.0, tau_final=0.01, epochs=100):
        if tau_initial < 2.0:
            raise ValueError(f"tau_initial must be >= 2, got {tau_initial}")
        if not 0.001 < tau_final < 0.1:
            raise ValueError(f"tau_final must lie in (0.001, 0.1), got {tau_final}")
        if epochs < 2:
            raise ValueError("a temperature schedule needs at least 2 epochs")
        self.tau_initial = tau_initial
        self.tau_final = tau_final
        self.epochs = epochs
        self._decay = (tau_final / tau_initial) ** (1.0 / (epochs - 1))

    def tau(self, epoch):
        if epoch < 0:
            raise ValueError("epoch must be non-negative")
        e = min(epoch, self.epochs - 1)
        return self.tau_initial * self._decay ** e


class SelectorState:
    """Aggregated log-logits, EMA coefficient, budget and noise source."""

    def __init__(self, n_features, k, schedule, rng, beta=0.9,
                 logit_init=0.0, prior_indices=None, prior_boost=2.0):
        if not 1 <= k <= n_features:
            raise ShapeError(f"budget k={k} must lie in [1, {n_features}]")
        if not 0.0 <= beta <= 1.0:
            raise ValueError(f"EMA coefficient beta must lie in [0, 1], got {beta}")
        self.n_features = n_features
        self.k = k
        self.schedule = schedule
        self.rng = rng
        self.beta = beta
        self.logpi = Matrix.full(1, n_features, logit_init)
        if prior_indices:
            for j in prior_indices:
                if not 0 <= j < n_features:
                    raise ShapeError(f"prior marker index {j} out of range [0, {n_features})")
                self.logpi.data[j] += prior_boost


class GumbelSample:
    """K relaxed one-hot rows plus the Gumbel draws that produced them."""

    __slots__ = ("gamma", "noise")

    def __init__(self, gamma, noise):
        self.gamma = gamma
        self.noise = noise


def instance_logits(f_pi, batch, train=True):
    """Apply the logit network per row and average: (n,d) -> (1,d) node."""
    if batch.value.rows < 1:
        raise ShapeError("instance_logits needs a non-empty batch")
    return T.col_mean(f_pi.forward(batch, train=train))


def aggregate_logits(state, batch_logits):
    """EMA update logpi <- beta * logpi + (1 - beta) * batch_logits.

    Returns the aggregated node (differentiable through the new batch term
    only) and stores its value back into the state.
    """
    if batch_logits.value.shape != state.logpi.shape:
        raise ShapeError(
            f"batch logits {batch_logits.value.shape} do not match state {state.logpi.shape}"
        )
    previous = T.constant(state.logpi.clone())
    agg = T.add(T.scale(previous, state.beta), T.scale(batch_logits, 1.0 - state.beta))
    state.logpi = agg.value.clone()
    return agg


def gumbel_noise(rng, k, n_features):
    return Matrix(k, n_features, rng.gumbels(k * n_features))


def sample_relaxed(logits, tau, k, rng=None, noise=None):
    """Draw K relaxed one-hot rows from a shared (1,d) logit node.

    Each row adds independent Gumbel(0,1) noise and applies a row softmax at
    temperature tau. The noise enters as a constant input, so the sample is
    differentiable with respect to the logits. Pass `noise` to reuse draws.
    """
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    d = logits.value.cols
    if noise is None:
        if rng is None:
            raise ValueError("sample_relaxed needs an rng when noise is not given")
        noise = gumbel_noise(rng, k, d)
    elif noise.shape != (k, d):
        raise ShapeError(f"noise {noise.shape} does not match ({k}, {d})")
    perturbed = T.add(T.tile_rows(logits, k), T.constant(noise))
    return GumbelSample(T.softmax_rows(perturbed, tau), noise)


def sample_gumbel_softmax(state, tau, noise=None):
    """Sample from the stored aggregated logits (non-differentiable path)."""
    return sample_relaxed(T.constant(state.logpi), tau, state.k, state.rng, noise)


def gumbel_softmax_density(gamma, pi, tau):
    """Density of the relaxed categorical distribution at an interior simplex
    point: (K-1)! tau^(K-1) (sum_i pi_i / gamma_i^tau)^-K prod_i pi_i / gamma_i^(tau+1).
    """
    k = len(gamma)
    if len(pi) != k:
        raise ShapeError(f"gamma has {k} coordinates but pi has {len(pi)}")
    if any(g <= 0.0 for g in gamma):
        raise ValueError("density is defined only strictly inside the simplex")
    if any(p <= 0.0 for p in pi):
        raise ValueError("class probabilities must be positive")
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    log_sum = math.log(math.fsum(p / g ** tau for p, g in zip(pi, gamma)))
    log_prod = math.fsum(math.log(p) - (tau + 1.0) * math.log(g) for p, g in zip(pi, gamma))
    return math.exp(
        math.lgamma(k) + (k - 1) * math.log(tau) - k * log_sum + log_prod
    )


def project_selection(batch, sample):
    """Selected representation: output column k is <x_i, gamma^(k)>."""
    if batch.value.cols != sample.gamma.value.cols:
        raise ShapeError(
            f"batch has {batch.value.cols} features but gamma has {sample.gamma.value.cols}"
        )
    return T.matmul_bt(batch, sample.gamma)


def extract_markers(logpi, k):
    """Top-k distinct feature indices by logit, descending; ties favor the
    lower index."""
    if isinstance(logpi, Matrix):
        scores = list(logpi.data)
    else:
        scores = list(logpi)
    if not 1 <= k <= len(scores):
        raise ShapeError(f"budget k={k} must lie in [1, {len(scores)}]")
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    return order[:k]
