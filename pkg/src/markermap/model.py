"""Model assembly and the training loop.

Modes:
  supervised   alpha=0: selector -> classifier
  unsupervised alpha=1: selector -> variational autoencoder
  joint        alpha=0.5: both terms on one forward pass
  concrete_vae     K free logit rows instead of the logit network (alpha=1)
  global_gumbel    one free logit row with relaxed top-K sampling (alpha=1)

The loss is alpha * (reconstruction + kl_weight * KL) + (1 - alpha) *
classification; at alpha = 0 the reconstruction branch is never built and at
alpha = 1 the classifier branch is never built, so the boundary properties
(label independence / exactly-zero decoder gradients) hold exactly.
"""

import base64
import json
import math
import struct
import time
from dataclasses import dataclass, field, asdict

from markermap import nn, selector as sel, tensor as T
from markermap._core import K
from markermap.data import gather_markers, gather_rows
from markermap.errors import MarkerMapError, ShapeError, TrainingDiverged
from markermap.rng import Rng
from markermap.tensor import Matrix

MODEL_FORMAT_VERSION = 1

MODE_ALPHA = {
    "supervised": 0.0,
    "unsupervised": 1.0,
    "joint": 0.5,
    "concrete_vae": 1.0,
    "global_gumbel": 1.0,
}

_TOPK_FLOOR = 1e-20


@dataclass
class TrainConfig:
    mode: str = "supervised"
    k: int = 5
    hidden: int = 64
    latent: int = 16
    batch_size: int = 64
    alpha: float = None  # None: derived from mode
    beta: float = 0.9
    tau_initial: float = 4.0
    tau_final: float = 0.01
    tau_epochs: int = None  # anneal horizon; None: max_epochs
    min_epochs: int = 25
    max_epochs: int = 100
    patience: int = 3
    seed: int = 0
    kl_weight: float = 1.0
    classification_loss: str = "cross_entropy"  # or "mse_one_hot"
    learning_rate: float = None  # None: use the finder
    lr_grid_low: float = 1e-8
    lr_grid_high: float = 1e-3
    lr_grid_size: int = 10
    leaky_slope: float = 0.01
    logit_init: float = 0.0
    prior_markers: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODE_ALPHA:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.alpha is not None:
            if not 0.0 <= self.alpha <= 1.0:
                raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
            if self.mode != "joint":
                raise ValueError(
                    "an explicit alpha needs --mode joint; the named modes pin it"
                )

    @property
    def resolved_alpha(self):
        if self.alpha is not None and self.mode == "joint":
            return self.alpha
        return MODE_ALPHA[self.mode]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in values.items() if k in known})


@dataclass
class TrainReport:
    mode: str
    seed: int
    learning_rate: float
    stop_epoch: int
    train_losses: list
    val_losses: list
    markers: list
    wall_time_s: float


class MarkerMapModel:
    """Selector + classifier + VAE wired per mode."""

    def __init__(self, n_features, n_classes, config):
        self.n_features = n_features
        self.n_classes = n_classes
        self.config = config
        self.mode = config.mode
        self.alpha = config.resolved_alpha
        self.fitted = False
        rng = Rng(config.seed).derive("init")
        h = config.hidden
        k = config.k
        if not 1 <= k <= n_features:
            raise ShapeError(f"budget k={k} must lie in [1, {n_features}]")
        schedule = sel.TemperatureSchedule(
            config.tau_initial, config.tau_final,
            config.tau_epochs or config.max_epochs,
        )
        slope = config.leaky_slope
        self.f_pi = None
        self.free_logits = None
        self.selector = None
        if self.mode in ("supervised", "unsupervised", "joint"):
            self.f_pi = nn.Mlp(
                [n_features, h, h, n_features], rng,
                leaky_slope=slope, name="fpi",
            )
            self.selector = sel.SelectorState(
                n_features, k, schedule, rng.derive("selector"),
                beta=config.beta, logit_init=config.logit_init,
                prior_indices=config.prior_markers, prior_boost=2.0,
            )
        elif self.mode == "concrete_vae":
            self.free_logits = T.parameter(
                Matrix.full(k, n_features, config.logit_init), "free_logits"
            )
            self.selector = sel.SelectorState(
                n_features, k, schedule, rng.derive("selector"), beta=config.beta
            )
        else:  # global_gumbel
            self.free_logits = T.parameter(
                Matrix.full(1, n_features, config.logit_init), "free_logits"
            )
            self.selector = sel.SelectorState(
                n_features, k, schedule, rng.derive("selector"), beta=config.beta
            )
        # components follow the mode so an alpha override (e.g. joint with
        # alpha=0) keeps the unused branch present with exactly-zero gradients
        self.f_w = None
        if self.mode in ("supervised", "joint") or (
            self.mode in ("concrete_vae", "global_gumbel") and self.alpha < 1.0
        ):
            if n_classes < 2:
                raise MarkerMapError(
                    f"mode {self.mode!r} (alpha={self.alpha}) needs labeled data"
                )
            self.f_w = nn.Mlp([k, h, n_classes], rng, output_activation="softmax",
                              leaky_slope=slope, name="fw")
        self.enc_trunk = None
        self.enc_mu = None
        self.enc_logvar = None
        self.decoder = None
        if self.mode != "supervised":
            latent = config.latent
            self.enc_trunk = nn.Mlp([k, h, h], rng, output_activation="leaky_relu",
                                    output_batchnorm=True, leaky_slope=slope,
                                    name="enc")
            self.enc_mu = nn.Dense(h, latent, rng, name="enc.mu")
            self.enc_logvar = nn.Dense(h, latent, rng, name="enc.logvar")
            self.decoder = nn.Mlp([latent, h, n_features], rng,
                                  leaky_slope=slope, name="dec")

    @classmethod
    def build(cls, n_features, n_classes, config):
        return cls(n_features, n_classes, config)

    # -- parameters ---------------------------------------------------------

    def trainable_params(self):
        params = []
        if self.f_pi is not None:
            params.extend(self.f_pi.params())
        if self.free_logits is not None:
            params.append(self.free_logits)
        if self.f_w is not None:
            params.extend(self.f_w.params())
        if self.decoder is not None:
            params.extend(self.enc_trunk.params())
            params.extend(self.enc_mu.params())
            params.extend(self.enc_logvar.params())
            params.extend(self.decoder.params())
        return params

    def decoder_params(self):
        return list(self.decoder.params()) if self.decoder is not None else []

    def classifier_params(self):
        return list(self.f_w.params()) if self.f_w is not None else []

    def _batchnorms(self):
        out = []
        for net in (self.f_pi, self.f_w, self.enc_trunk, self.decoder):
            if net is not None:
                out.extend(net.batchnorms())
        return out

    # -- selection ----------------------------------------------------------

    def sample_selection(self, x, tau, rng, noise=None, train=True):
        """Relaxed K x d selection rows for a batch node, per mode."""
        k, d = self.config.k, self.n_features
        if self.mode in ("supervised", "unsupervised", "joint"):
            batch_logits = sel.instance_logits(self.f_pi, x, train=train)
            if train:
                logits = sel.aggregate_logits(self.selector, batch_logits)
            else:
                logits = T.constant(self.selector.logpi)
            return sel.sample_relaxed(logits, tau, k, self.selector.rng, noise)
        if self.mode == "concrete_vae":
            if noise is None:
                noise = sel.gumbel_noise(self.selector.rng, k, d)
            perturbed = T.add(self.free_logits, T.constant(noise))
            return sel.GumbelSample(T.softmax_rows(perturbed, tau), noise)
        # global_gumbel: one noise row, successive masked softmaxes
        if noise is None:
            noise = sel.gumbel_noise(self.selector.rng, 1, d)
        ones = T.constant(Matrix.full(1, d, 1.0))
        scores = T.add(self.free_logits, T.constant(noise))
        rows = []
        for step in range(k):
            row = T.softmax_rows(scores, tau)
            rows.append(row)
            if step + 1 < k:
                mask = T.log(T.clamp_min(T.sub(ones, row), _TOPK_FLOOR))
                scores = T.add(scores, mask)
        gamma = rows[0] if k == 1 else T.stack_rows(rows)
        return sel.GumbelSample(gamma, noise)

    def validation_noise(self, rng):
        rows = 1 if self.mode == "global_gumbel" else self.config.k
        return sel.gumbel_noise(rng, rows, self.n_features)

    def hard_selection_rows(self):
        """One-hot selection rows at the current marker panel."""
        k, d = self.config.k, self.n_features
        out = Matrix.zeros(k, d)
        for row, j in enumerate(self.extract_markers()):
            out.data[row * d + j] = 1.0
        return out

    def selection_probe(self, tau, noise=None):
        """Deterministic relaxed selection for validation.

        With a frozen noise draw the probe follows the distribution training
        sees at the current temperature, so the validation loss keeps
        improving while either the selector or the downstream heads improve
        and early stopping does not fire during the annealing transition.
        Without noise the hard marker panel is used.
        """
        if noise is None:
            return self.hard_selection_rows()
        k, d = self.config.k, self.n_features
        if self.mode in ("supervised", "unsupervised", "joint"):
            perturbed = Matrix.zeros(k, d)
            K.tile_rows(self.selector.logpi.data, perturbed.data, k, d)
            K.acc(noise.data, perturbed.data, k * d)
        elif self.mode == "concrete_vae":
            perturbed = self.free_logits.value.clone()
            K.acc(noise.data, perturbed.data, k * d)
        else:  # global_gumbel: successive masked softmaxes on one noisy row
            scores = self.free_logits.value.clone()
            K.acc(noise.data, scores.data, d)
            out = Matrix.zeros(k, d)
            row = Matrix.zeros(1, d)
            for step in range(k):
                K.softmax_rows(scores.data, tau, row.data, 1, d)
                out.data[step * d : (step + 1) * d] = row.data
                if step + 1 < k:
                    for j in range(d):
                        gap = 1.0 - row.data[j]
                        scores.data[j] += math.log(gap if gap > _TOPK_FLOOR else _TOPK_FLOOR)
            return out
        out = Matrix.zeros(k, d)
        K.softmax_rows(perturbed.data, tau, out.data, k, d)
        return out

    def logit_scores(self):
        """Per-feature score vector used for marker extraction."""
        if self.free_logits is None:
            return list(self.selector.logpi.data)
        if self.mode == "global_gumbel":
            return list(self.free_logits.value.data)
        # concrete_vae: column-max over the K rows, for reporting
        k, d = self.free_logits.value.shape
        data = self.free_logits.value.data
        return [max(data[r * d + j] for r in range(k)) for j in range(d)]

    def extract_markers(self):
        k, d = self.config.k, self.n_features
        if self.mode == "concrete_vae":
            data = self.free_logits.value.data
            chosen = []
            taken = set()
            for r in range(k):
                prefs = sorted(range(d), key=lambda j: (-data[r * d + j], j))
                pick = next(j for j in prefs if j not in taken)
                chosen.append(pick)
                taken.add(pick)
            return chosen
        return sel.extract_markers(self.logit_scores(), k)

    # -- losses ---------------------------------------------------------------

    def loss(self, x, x_target, labels, tau, train, rng=None,
             gumbel_noise=None, latent_noise=None):
        """Scalar loss node over a batch node `x` (target is its Matrix)."""
        alpha = self.alpha
        if alpha < 1.0 and labels is None:
            raise MarkerMapError(
                f"alpha={alpha} weights the classification term but no labels were given"
            )
        sample = self.sample_selection(x, tau, rng, noise=gumbel_noise, train=train)
        xs = sel.project_selection(x, sample)
        recon_term = None
        class_term = None
        if alpha > 0.0:
            trunk = self.enc_trunk.forward(xs, train=train)
            mu = self.enc_mu.affine(trunk)
            logvar = self.enc_logvar.affine(trunk)
            if train:
                n = x.value.rows
                if latent_noise is None:
                    latent_noise = Matrix(
                        n, self.config.latent, rng.normals(n * self.config.latent)
                    )
                std = T.exp(T.scale(logvar, 0.5))
                z = T.add(mu, T.mul(std, T.constant(latent_noise)))
            else:
                z = mu
            xhat = self.decoder.forward(z, train=train)
            recon_term = T.mse(xhat, x_target)
            if self.config.kl_weight != 0.0:
                kl = T.gaussian_kl(mu, logvar)
                recon_term = T.add(recon_term, T.scale(kl, self.config.kl_weight))
        if alpha < 1.0:
            probs = self.f_w.forward(xs, train=train)
            if self.config.classification_loss == "mse_one_hot":
                class_term = T.mse(probs, one_hot(labels, self.n_classes))
            else:
                class_term = T.cross_entropy(probs, labels)
        if recon_term is None:
            return class_term
        if class_term is None:
            return recon_term
        return T.add(T.scale(recon_term, alpha), T.scale(class_term, 1.0 - alpha))

    def evaluation_loss(self, x_matrix, labels, tau=None, noise=None):
        """Deterministic loss on held-out rows: eval-mode batch norm, latent
        mean, and either the hard marker panel (noise=None) or the frozen-
        noise relaxed selection at temperature tau."""
        x = T.constant(x_matrix)
        gamma = sel.GumbelSample(T.constant(self.selection_probe(tau, noise)), noise)
        xs = sel.project_selection(x, gamma)
        alpha = self.alpha
        total = 0.0
        if alpha > 0.0:
            trunk = self.enc_trunk.forward(xs, train=False)
            mu = self.enc_mu.affine(trunk)
            logvar = self.enc_logvar.affine(trunk)
            xhat = self.decoder.forward(mu, train=False)
            value = T.mse(xhat, x_matrix).value.item()
            if self.config.kl_weight != 0.0:
                value += self.config.kl_weight * T.gaussian_kl(mu, logvar).value.item()
            total += alpha * value
        if alpha < 1.0:
            probs = self.f_w.forward(xs, train=False)
            if self.config.classification_loss == "mse_one_hot":
                value = T.mse(probs, one_hot(labels, self.n_classes)).value.item()
            else:
                value = T.cross_entropy(probs, labels).value.item()
            total += (1.0 - alpha) * value
        return total

    # -- inference --------------------------------------------------------------

    def predict(self, x_matrix):
        """Class ids from the hard-selected marker columns (eval mode)."""
        if self.f_w is None:
            raise MarkerMapError(f"mode {self.mode!r} has no classifier")
        if not self.fitted:
            raise MarkerMapError("predict needs a fitted model")
        markers = self.extract_markers()
        xm = gather_markers(x_matrix, markers)
        probs = self.f_w.forward(T.constant(xm), train=False).value
        return _argmax_rows(probs)

    def reconstruct(self, marker_values):
        """Decode full profiles from marker values via the latent mean."""
        if self.decoder is None:
            raise MarkerMapError(f"mode {self.mode!r} has no decoder")
        if not self.fitted:
            raise MarkerMapError("reconstruct needs a fitted model")
        if marker_values.cols != self.config.k:
            raise ShapeError(
                f"expected {self.config.k} marker columns, got {marker_values.cols}"
            )
        xs = T.constant(marker_values)
        trunk = self.enc_trunk.forward(xs, train=False)
        mu = self.enc_mu.affine(trunk)
        return self.decoder.forward(mu, train=False).value


def one_hot(labels, n_classes):
    m = Matrix.zeros(len(labels), n_classes)
    for i, y in enumerate(labels):
        if not 0 <= y < n_classes:
            raise ValueError(f"class id {y} out of range [0, {n_classes})")
        m.data[i * n_classes + y] = 1.0
    return m


def _argmax_rows(m):
    out = []
    for i in range(m.rows):
        row = i * m.cols
        best = 0
        best_v = m.data[row]
        for j in range(1, m.cols):
            if m.data[row + j] > best_v:
                best_v = m.data[row + j]
                best = j
        out.append(best)
    return out


def joint_loss(model, x_matrix, labels=None, tau=1.0, train=False, rng=None,
               gumbel_noise=None, latent_noise=None):
    """Scalar loss node for a batch given as a plain Matrix."""
    return model.loss(T.constant(x_matrix), x_matrix, labels, tau, train,
                      rng=rng, gumbel_noise=gumbel_noise, latent_noise=latent_noise)


def random_markers(n_features, k, seed_or_rng):
    """Baseline: k distinct feature indices drawn uniformly."""
    if k > n_features:
        raise ShapeError(f"cannot pick {k} markers from {n_features} features")
    rng = seed_or_rng if hasattr(seed_or_rng, "sample_indices") else Rng(seed_or_rng).derive("random-markers")
    return rng.sample_indices(n_features, k)


# -- training loop --------------------------------------------------------------


def _epoch(model, x_train, y_train, optimizer, tau, rng, config, epoch_index):
    order = list(range(x_train.rows))
    rng.shuffle(order)
    total = 0.0
    batches = 0
    for start in range(0, len(order), config.batch_size):
        idx = order[start : start + config.batch_size]
        xb = gather_rows(x_train, idx)
        yb = [y_train[i] for i in idx] if y_train is not None else None
        loss = joint_loss(model, xb, yb, tau, train=True, rng=rng)
        value = loss.value.item()
        if not math.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss at epoch {epoch_index} batch {batches} "
                f"(tau={tau:.4g}, lr={optimizer.lr:.4g})"
            )
        T.backward(loss)
        optimizer.step()
        optimizer.zero_grad()
        total += value
        batches += 1
    return total / batches


def fit(model, dataset, splits, config):
    """Learning-rate finder, then annealed training with early stopping."""
    started = time.perf_counter()
    if not splits.train:
        raise MarkerMapError("training split is empty")
    needs_labels = model.alpha < 1.0
    if needs_labels and dataset.labels is None:
        raise MarkerMapError(f"mode {config.mode!r} needs labeled data")
    x_train = gather_rows(dataset.x, splits.train)
    x_val = gather_rows(dataset.x, splits.validation)
    if needs_labels:
        y_train = [dataset.labels[i] for i in splits.train]
        y_val = [dataset.labels[i] for i in splits.validation]
    else:
        y_train = y_val = None
    schedule = sel.TemperatureSchedule(
        config.tau_initial, config.tau_final,
        config.tau_epochs or config.max_epochs,
    )

    val_noise = model.validation_noise(Rng(config.seed).derive("validation"))

    lr = config.learning_rate
    if lr is None:
        def probe(rate):
            trial = MarkerMapModel.build(model.n_features, model.n_classes, config)
            probe_rng = Rng(config.seed).derive("lr-probe")
            optimizer = nn.Adam(trial.trainable_params(), rate)
            try:
                _epoch(trial, x_train, y_train, optimizer, schedule.tau(0),
                       probe_rng, config, 0)
            except TrainingDiverged:
                return math.inf
            return trial.evaluation_loss(x_val, y_val, schedule.tau(0), val_noise)

        grid = nn.linear_grid(config.lr_grid_low, config.lr_grid_high,
                              config.lr_grid_size)
        lr = nn.lr_finder(probe, grid)

    optimizer = nn.Adam(model.trainable_params(), lr)
    stopper = nn.EarlyStopper(config.patience, config.min_epochs, config.max_epochs)
    rng = Rng(config.seed).derive("train")
    train_losses = []
    val_losses = []
    for epoch in range(config.max_epochs):
        tau = schedule.tau(epoch)
        train_losses.append(_epoch(model, x_train, y_train, optimizer, tau,
                                   rng, config, epoch))
        val_losses.append(model.evaluation_loss(x_val, y_val, tau, val_noise))
        if stopper.update(val_losses[-1]):
            break
    model.fitted = True
    return TrainReport(
        mode=config.mode,
        seed=config.seed,
        learning_rate=lr,
        stop_epoch=stopper.epoch,
        train_losses=train_losses,
        val_losses=val_losses,
        markers=model.extract_markers(),
        wall_time_s=time.perf_counter() - started,
    )


# -- persistence --------------------------------------------------------------


def _encode(matrix):
    payload = struct.pack(f"<{matrix.size}d", *matrix.data)
    return {
        "rows": matrix.rows,
        "cols": matrix.cols,
        "data": base64.b64encode(payload).decode("ascii"),
    }


def _decode(blob):
    raw = base64.b64decode(blob["data"])
    values = struct.unpack(f"<{blob['rows'] * blob['cols']}d", raw)
    m = Matrix(blob["rows"], blob["cols"])
    for i, v in enumerate(values):
        m.data[i] = v
    return m


def _state_matrices(model):
    items = []
    for p in model.trainable_params():
        items.append((f"param:{p.name}", p.value))
    for bn in model._batchnorms():
        items.append((f"running_mean:{bn.name}", bn.running_mean))
        items.append((f"running_var:{bn.name}", bn.running_var))
    items.append(("selector:logpi", model.selector.logpi))
    return items


def save_model(model, path):
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": "markermap-model",
        "n_features": model.n_features,
        "n_classes": model.n_classes,
        "fitted": model.fitted,
        "config": model.config.to_dict(),
        "state": {name: _encode(m) for name, m in _state_matrices(model)},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("kind") != "markermap-model":
        raise MarkerMapError(f"{path} is not a model file")
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise MarkerMapError(
            f"unsupported model format version {doc.get('format_version')}"
        )
    config = TrainConfig.from_dict(doc["config"])
    model = MarkerMapModel.build(doc["n_features"], doc["n_classes"], config)
    state = doc["state"]
    for name, matrix in _state_matrices(model):
        if name not in state:
            raise MarkerMapError(f"model file is missing state entry {name!r}")
        loaded = _decode(state[name])
        if loaded.shape != matrix.shape:
            raise MarkerMapError(f"state entry {name!r} has shape {loaded.shape}, "
                                 f"expected {matrix.shape}")
        matrix.data[:] = loaded.data
    model.fitted = bool(doc["fitted"])
    return model
