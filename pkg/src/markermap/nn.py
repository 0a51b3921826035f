"""Dense layers, batch normalization, Adam, learning-rate finder, early stop.

Hidden layers follow the pattern affine -> batch norm -> activation; the
output layer is affine -> activation (identity or softmax), no normalization.
"""

import math
from array import array

from markermap import tensor as T
from markermap._core import K
from markermap.errors import MarkerMapError, ShapeError
from markermap.tensor import Matrix, Node

ACTIVATIONS = ("leaky_relu", "identity", "softmax")


def kaiming_init(rows, cols, rng, fan_in=None):
    """Normal(0, 2/fan_in) weight matrix; fan_in defaults to `rows`."""
    if fan_in is None:
        fan_in = rows
    if fan_in < 1:
        raise ShapeError(f"kaiming_init needs fan_in >= 1, got {fan_in}")
    std = math.sqrt(2.0 / fan_in)
    return Matrix(rows, cols, rng.normals(rows * cols, std=std))


class Dense:
    """Affine map with a Kaiming-initialized weight and zero bias."""

    def __init__(self, in_dim, out_dim, rng, activation="identity", name="dense"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.name = name
        self.weight = T.parameter(kaiming_init(in_dim, out_dim, rng), f"{name}.weight")
        self.bias = T.parameter(Matrix.zeros(1, out_dim), f"{name}.bias")

    def affine(self, x):
        if x.value.cols != self.in_dim:
            raise ShapeError(
                f"{self.name}: input has {x.value.cols} columns, layer expects {self.in_dim}"
            )
        return T.add_bias(T.matmul(x, self.weight), self.bias)

    def params(self):
        return [self.weight, self.bias]


class BatchNorm:
    """Per-feature normalization with running statistics.

    Train mode normalizes with batch statistics and updates the running
    moments (population variance); eval mode uses the running moments only.
    A train-mode batch of one row falls back to the eval statistics so the
    final ragged batch cannot divide by a zero variance.
    """

    def __init__(self, dim, momentum=0.1, eps=1e-5, name="bn"):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must be in (0,1), got {momentum}")
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.name = name
        self.gamma = T.parameter(Matrix.full(1, dim, 1.0), f"{name}.gamma")
        self.beta = T.parameter(Matrix.zeros(1, dim), f"{name}.beta")
        self.running_mean = Matrix.zeros(1, dim)
        self.running_var = Matrix.full(1, dim, 1.0)

    def forward(self, x, train):
        n, d = x.value.shape
        if d != self.dim:
            raise ShapeError(f"{self.name}: got {d} features, expected {self.dim}")
        out = Matrix.zeros(n, d)
        xhat = Matrix.zeros(n, d)
        if train and n > 1:
            mean = Matrix.zeros(1, d)
            var = Matrix.zeros(1, d)
            K.bn_train_forward(
                x.value.data, self.gamma.value.data, self.beta.value.data,
                self.eps, out.data, xhat.data, mean.data, var.data, n, d,
            )
            m = self.momentum
            K.scale(self.running_mean.data, 1.0 - m, self.running_mean.data, d)
            K.acc_scaled(mean.data, m, self.running_mean.data, d)
            K.scale(self.running_var.data, 1.0 - m, self.running_var.data, d)
            K.acc_scaled(var.data, m, self.running_var.data, d)
            gamma, eps = self.gamma, self.eps

            def bw(g, gp):
                K.bn_train_backward(
                    xhat.data, gamma.value.data, var.data, eps, g,
                    _sink(gp[0], n * d), _sink(gp[1], d), _sink(gp[2], d), n, d,
                )

            return Node(out, (x, self.gamma, self.beta), bw)

        K.bn_eval_forward(
            x.value.data, self.gamma.value.data, self.beta.value.data,
            self.running_mean.data, self.running_var.data, self.eps,
            out.data, xhat.data, n, d,
        )
        gamma, rvar, eps = self.gamma, self.running_var, self.eps

        def bw_eval(g, gp):
            K.bn_eval_backward(
                gamma.value.data, rvar.data, eps, xhat.data, g,
                _sink(gp[0], n * d), _sink(gp[1], d), _sink(gp[2], d), n, d,
            )

        return Node(out, (x, self.gamma, self.beta), bw_eval)

    def params(self):
        return [self.gamma, self.beta]


def _sink(slot, size):
    # fused kernels always write all three gradients; unused ones go nowhere
    if slot is not None:
        return slot
    return array("d", bytes(8 * size))


def _activate(x, tag, slope):
    if tag == "identity":
        return x
    if tag == "leaky_relu":
        return T.leaky_relu(x, slope)
    if tag == "softmax":
        return T.softmax_rows(x, 1.0)
    raise ValueError(f"unknown activation {tag!r}")


class Mlp:
    """Chain of Dense layers; hidden layers get batch norm before activation."""

    def __init__(self, dims, rng, output_activation="identity",
                 hidden_activation="leaky_relu", batchnorm=True,
                 output_batchnorm=False, leaky_slope=0.01, name="mlp"):
        if len(dims) < 2:
            raise ShapeError("an Mlp needs at least input and output dimensions")
        self.dims = list(dims)
        self.leaky_slope = leaky_slope
        self.name = name
        self.layers = []
        for i in range(len(dims) - 1):
            last = i == len(dims) - 2
            act = output_activation if last else hidden_activation
            dense = Dense(dims[i], dims[i + 1], rng, act, name=f"{name}.{i}")
            bn = None
            if batchnorm and (not last or output_batchnorm):
                bn = BatchNorm(dims[i + 1], name=f"{name}.{i}.bn")
            self.layers.append((dense, bn))

    @property
    def in_dim(self):
        return self.dims[0]

    @property
    def out_dim(self):
        return self.dims[-1]

    def forward(self, x, train=False):
        for dense, bn in self.layers:
            x = dense.affine(x)
            if bn is not None:
                x = bn.forward(x, train)
            x = _activate(x, dense.activation, self.leaky_slope)
        return x

    def params(self):
        out = []
        for dense, bn in self.layers:
            out.extend(dense.params())
            if bn is not None:
                out.extend(bn.params())
        return out

    def batchnorms(self):
        return [bn for _, bn in self.layers if bn is not None]


class Adam:
    """Bias-corrected Adam over a list of parameter Nodes."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [Matrix.zeros(*p.value.shape) for p in self.params]
        self._v = [Matrix.zeros(*p.value.shape) for p in self.params]

    def step(self):
        self.t += 1
        b1t = self.beta1 ** self.t
        b2t = self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            n = p.value.size
            if not K.all_finite(p.grad.data, n):
                raise MarkerMapError(
                    f"non-finite gradient on parameter {p.name or '<unnamed>'}"
                )
            K.adam_step(
                p.value.data, p.grad.data, m.data, v.data,
                self.lr, self.beta1, self.beta2, self.eps, b1t, b2t, n,
            )

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def second_moment(self, index):
        return self._v[index]


def linear_grid(lo=1e-8, hi=1e-3, count=10):
    """Linearly spaced learning-rate candidates, inclusive of both ends."""
    if count < 1:
        raise ValueError("grid needs at least one point")
    if count == 1:
        return [lo]
    step = (hi - lo) / (count - 1)
    return [lo + i * step for i in range(count)]


def lr_finder(probe, grid):
    """Pick the learning rate whose one-epoch probe reaches the lowest
    validation loss.

    `probe(rate)` must train a fresh model for one epoch and return the
    end-of-probe validation loss (NaN/inf marks a diverged probe). Ties go
    to the smaller rate.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("learning-rate grid is empty")
    for rate in grid:
        if not 0.0 < rate:
            raise ValueError(f"learning rate must be positive, got {rate}")
    best_rate = None
    best_loss = math.inf
    for rate in sorted(grid):
        loss = probe(rate)
        if math.isfinite(loss) and loss < best_loss:
            best_loss = loss
            best_rate = rate
    if best_rate is None:
        raise MarkerMapError(
            "every learning-rate probe diverged; consider rescaling the data"
        )
    return best_rate


class EarlyStopper:
    """Stop when validation loss has not improved for `patience` epochs.

    Never stops before `min_epochs`; always stops at `max_epochs`. Epochs are
    1-indexed in `update`.
    """

    def __init__(self, patience=3, min_epochs=25, max_epochs=100):
        self.patience = patience
        self.min_epochs = min_epochs
        self.max_epochs = max_epochs
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, val_loss):
        self.epoch += 1
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = self.epoch
        if self.epoch >= self.max_epochs:
            return True
        if self.epoch < self.min_epochs:
            return False
        return self.epoch - self.best_epoch >= self.patience
