"""Downstream k-NN classifier, classification metrics, reconstruction
metrics, and power-iteration PCA.

All functions are pure; variances are population variances (divide by n) so
ranks are deterministic.
"""

import math
from array import array

from markermap._core import K
from markermap.errors import MarkerMapError, ShapeError
from markermap.data import gather_markers
from markermap.tensor import Matrix


def knn_classify(train_x, train_y, test_x, markers, k_neighbors=5):
    """Majority vote over the k nearest training rows, Euclidean distance on
    the marker columns only; vote ties go to the smallest class id."""
    if not markers:
        raise ShapeError("marker set is empty")
    if not 1 <= k_neighbors <= train_x.rows:
        raise ShapeError(
            f"k_neighbors={k_neighbors} must lie in [1, {train_x.rows}]"
        )
    a = gather_markers(train_x, markers)
    b = gather_markers(test_x, markers)
    n_train, n_test, m = a.rows, b.rows, a.cols
    # ||b_i - a_j||^2 = |b_i|^2 + |a_j|^2 - 2 <b_i, a_j>; monotone in the dot term
    cross = Matrix.zeros(n_test, n_train)
    K.matmul_abt_acc(b.data, a.data, cross.data, n_test, m, n_train)
    a_norm = array("d", bytes(8 * n_train))
    b_norm = array("d", bytes(8 * n_test))
    K.row_sqnorms(a.data, a_norm, n_train, m)
    K.row_sqnorms(b.data, b_norm, n_test, m)
    predictions = []
    for i in range(n_test):
        row = i * n_train
        dists = [
            (b_norm[i] + a_norm[j] - 2.0 * cross.data[row + j], j)
            for j in range(n_train)
        ]
        dists.sort()
        votes = {}
        for _, j in dists[:k_neighbors]:
            votes[train_y[j]] = votes.get(train_y[j], 0) + 1
        best = max(votes.items(), key=lambda kv: (kv[1], -kv[0]))
        predictions.append(best[0])
    return predictions


class ClassificationReport:
    """Confusion counts plus the derived per-class and aggregate scores."""

    def __init__(self, truth, predicted, n_classes=None):
        if len(truth) != len(predicted):
            raise ShapeError(
                f"{len(truth)} truth labels vs {len(predicted)} predictions"
            )
        if not truth:
            raise ShapeError("cannot score an empty prediction set")
        c = n_classes or max(max(truth), max(predicted)) + 1
        confusion = [[0] * c for _ in range(c)]
        for t, p in zip(truth, predicted):
            confusion[t][p] += 1
        n = len(truth)
        self.n_classes = c
        self.confusion = confusion
        self.accuracy = sum(confusion[j][j] for j in range(c)) / n
        self.support = [sum(confusion[j]) for j in range(c)]
        self.precision = []
        self.recall = []
        self.f1 = []
        self.misclassification = []
        for j in range(c):
            tp = confusion[j][j]
            predicted_j = sum(confusion[t][j] for t in range(c))
            precision = tp / predicted_j if predicted_j else 0.0
            recall = tp / self.support[j] if self.support[j] else 0.0
            f1 = (
                2.0 * precision * recall / (precision + recall)
                if precision + recall > 0.0
                else 0.0
            )
            self.precision.append(precision)
            self.recall.append(recall)
            self.f1.append(f1)
            self.misclassification.append(1.0 - precision)
        self.macro_f1 = sum(self.f1) / c
        self.weighted_f1 = sum(f * s for f, s in zip(self.f1, self.support)) / n
        self.avg_misclassification = sum(self.misclassification) / c

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "macro_f1": self.macro_f1,
            "avg_misclassification": self.avg_misclassification,
            "per_class": [
                {
                    "precision": self.precision[j],
                    "recall": self.recall[j],
                    "f1": self.f1[j],
                    "misclassification": self.misclassification[j],
                    "support": self.support[j],
                }
                for j in range(self.n_classes)
            ],
            "confusion": self.confusion,
        }


def classification_metrics(truth, predicted, n_classes=None):
    return ClassificationReport(truth, predicted, n_classes)


def column_variances(x):
    mean = array("d", bytes(8 * x.cols))
    var = array("d", bytes(8 * x.cols))
    K.col_mean_var(x.data, mean, var, x.rows, x.cols)
    return list(var)


def _descending_ranks(values):
    """Rank 1 = largest; ties share their average rank."""
    order = sorted(range(len(values)), key=lambda j: (-values[j], j))
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for t in range(i, j + 1):
            ranks[order[t]] = avg
        i = j + 1
    return ranks


def _top_variance_indices(values, top_count):
    order = sorted(range(len(values)), key=lambda j: (-values[j], j))
    return set(order[:top_count])


def jaccard_top_variance(original, reconstructed, top_fraction=0.2):
    """Overlap of the top-variance gene sets (largest floor(d * fraction))."""
    if original.shape != reconstructed.shape:
        raise ShapeError(
            f"shape mismatch {original.shape} vs {reconstructed.shape}"
        )
    d = original.cols
    top = int(d * top_fraction)
    if top < 1:
        raise ShapeError(
            f"{d} genes leave an empty top-{top_fraction:.0%} variance set"
        )
    i_x = _top_variance_indices(column_variances(original), top)
    i_r = _top_variance_indices(column_variances(reconstructed), top)
    return len(i_x & i_r) / len(i_x | i_r)


def spearman_rho_variances(original, reconstructed):
    """Pearson correlation of the per-gene variance rank vectors."""
    if original.shape != reconstructed.shape:
        raise ShapeError(
            f"shape mismatch {original.shape} vs {reconstructed.shape}"
        )
    if original.cols < 2:
        raise ShapeError("need at least 2 genes for a rank correlation")
    ra = _descending_ranks(column_variances(original))
    rb = _descending_ranks(column_variances(reconstructed))
    return _pearson(ra, rb)


def _pearson(a, b):
    n = len(a)
    mean_a = sum(a) / n
    mean_b = sum(b) / n
    cov = sa = sb = 0.0
    for x, y in zip(a, b):
        dx = x - mean_a
        dy = y - mean_b
        cov += dx * dy
        sa += dx * dx
        sb += dy * dy
    if sa == 0.0 or sb == 0.0:
        raise MarkerMapError(
            "degenerate rank vector (all variances equal); correlation undefined"
        )
    return cov / math.sqrt(sa * sb)


def mean_l2(original, reconstructed):
    """Mean over rows of the Euclidean distance between paired rows."""
    if original.shape != reconstructed.shape:
        raise ShapeError(
            f"shape mismatch {original.shape} vs {reconstructed.shape}"
        )
    n, d = original.shape
    diff = array("d", bytes(8 * n * d))
    K.sub(original.data, reconstructed.data, diff, n * d)
    norms = array("d", bytes(8 * n))
    K.row_sqnorms(diff, norms, n, d)
    return sum(math.sqrt(v) for v in norms) / n


def _covariance(x):
    n, d = x.shape
    mean = array("d", bytes(8 * d))
    K.col_mean(x.data, mean, n, d)
    centered = Matrix.zeros(n, d)
    for i in range(n):
        row = i * d
        for j in range(d):
            centered.data[row + j] = x.data[row + j] - mean[j]
    cov = Matrix.zeros(d, d)
    K.matmul_atb_acc(centered.data, centered.data, cov.data, n, d, d)
    K.scale(cov.data, 1.0 / n, cov.data, d * d)
    return cov, list(mean)


def _power_iteration(cov, start, tol, max_iter):
    d = cov.rows
    v = array("d", start)
    norm = math.sqrt(K.dot(v, v, d))
    for i in range(d):
        v[i] /= norm
    eigenvalue = 0.0
    work = array("d", bytes(8 * d))
    for _ in range(max_iter):
        K.fill(work, 0.0, d)
        K.matmul_acc(cov.data, v, work, d, d, 1)
        norm = math.sqrt(K.dot(work, work, d))
        if norm <= tol:
            return 0.0, v
        new_eigenvalue = K.dot(v, work, d)
        for i in range(d):
            work[i] /= norm
        drift = math.sqrt(
            sum((work[i] - v[i]) ** 2 for i in range(d))
        )
        flipped = math.sqrt(sum((work[i] + v[i]) ** 2 for i in range(d)))
        v = array("d", work)
        eigenvalue = new_eigenvalue
        if min(drift, flipped) < tol:
            break
    return eigenvalue, v


def top_eigenpairs(cov, count, tol=1e-9, max_iter=10000):
    """Leading eigenpairs of a symmetric matrix via power iteration with
    deflation. Sign convention: the largest-magnitude loading is positive."""
    from markermap.rng import Rng

    d = cov.rows
    work = cov.clone()
    rng = Rng(0).derive("power-iteration")
    pairs = []
    for _ in range(count):
        start = rng.normals(d)
        value, vector = _power_iteration(work, start, tol, max_iter)
        peak = max(range(d), key=lambda i: (abs(vector[i]), -i))
        if vector[peak] < 0.0:
            for i in range(d):
                vector[i] = -vector[i]
        pairs.append((value, list(vector)))
        # deflate: cov <- cov - value * v v^T
        for i in range(d):
            vi = value * vector[i]
            row = i * d
            for j in range(d):
                work.data[row + j] -= vi * vector[j]
    return pairs


def pca_project(reference, *others, tol=1e-9, max_iter=10000):
    """Project matrices onto the top two eigenvectors of the reference
    covariance (all matrices centered by the reference mean).

    Returns (coordinates, eigenvalues): one (n,2) Matrix per input matrix,
    reference first.
    """
    if reference.rows < 3:
        raise ShapeError(f"PCA needs at least 3 rows, got {reference.rows}")
    cov, mean = _covariance(reference)
    pairs = top_eigenpairs(cov, 2, tol=tol, max_iter=max_iter)
    eigenvalues = [p[0] for p in pairs]
    if eigenvalues[0] <= 0.0 or eigenvalues[1] <= eigenvalues[0] * 1e-12:
        raise MarkerMapError(
            "reference covariance has rank < 2; PCA projection undefined"
        )
    basis = Matrix.from_rows([pairs[0][1], pairs[1][1]])  # 2 x d
    results = []
    for m in (reference,) + others:
        if m.cols != reference.cols:
            raise ShapeError(
                f"matrix with {m.cols} columns does not match reference {reference.cols}"
            )
        centered = Matrix.zeros(m.rows, m.cols)
        for i in range(m.rows):
            row = i * m.cols
            for j in range(m.cols):
                centered.data[row + j] = m.data[row + j] - mean[j]
        coords = Matrix.zeros(m.rows, 2)
        K.matmul_abt_acc(centered.data, basis.data, coords.data, m.rows, m.cols, 2)
        results.append(coords)
    return results, eigenvalues
