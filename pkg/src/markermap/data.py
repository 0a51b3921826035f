"""Dataset ingestion, preprocessing, splitting, label noise, synthesis.

CSV contract: UTF-8, comma-separated, first row is the header of gene names
(plus the optional label column), one row per cell, plain decimal numbers.
Datasets are immutable after construction by convention; every transform
returns a new Dataset.
"""

import math
import warnings
from array import array

from markermap._core import K
from markermap.errors import DataFormatError, ShapeError
from markermap.tensor import Matrix


class Dataset:
    """Expression matrix plus optional dense integer labels and names."""

    def __init__(self, x, labels=None, gene_names=None, cell_ids=None,
                 class_names=None, planted_markers=None):
        self.x = x
        self.labels = list(labels) if labels is not None else None
        self.gene_names = list(gene_names) if gene_names else [
            f"gene{j}" for j in range(x.cols)
        ]
        self.cell_ids = list(cell_ids) if cell_ids else [
            f"cell{i}" for i in range(x.rows)
        ]
        self.class_names = list(class_names) if class_names else None
        self.planted_markers = list(planted_markers) if planted_markers else None
        if len(self.gene_names) != x.cols:
            raise ShapeError(f"{len(self.gene_names)} gene names for {x.cols} genes")
        if len(set(self.gene_names)) != len(self.gene_names):
            raise DataFormatError("gene names must be unique")
        if self.labels is not None:
            if len(self.labels) != x.rows:
                raise ShapeError(f"{len(self.labels)} labels for {x.rows} cells")
            c = self.n_classes
            for y in self.labels:
                if not 0 <= y < c:
                    raise DataFormatError(f"label id {y} outside [0, {c})")

    @property
    def n_cells(self):
        return self.x.rows

    @property
    def n_genes(self):
        return self.x.cols

    @property
    def n_classes(self):
        if self.labels is None:
            return 0
        if self.class_names:
            return len(self.class_names)
        return max(self.labels) + 1

    def with_labels(self, labels):
        return Dataset(self.x, labels, self.gene_names, self.cell_ids,
                       self.class_names, self.planted_markers)

    def subset(self, indices):
        sub = gather_rows(self.x, indices)
        labels = [self.labels[i] for i in indices] if self.labels is not None else None
        ids = [self.cell_ids[i] for i in indices]
        return Dataset(sub, labels, self.gene_names, ids,
                       self.class_names, self.planted_markers)


class SplitIndices:
    """Disjoint train/validation/test row indices covering the dataset."""

    __slots__ = ("train", "validation", "test")

    def __init__(self, train, validation, test):
        self.train = list(train)
        self.validation = list(validation)
        self.test = list(test)

    def all_indices(self):
        return self.train + self.validation + self.test


class SyntheticSpec:
    """Parameters of the planted-marker generator."""

    def __init__(self, n=1000, d=100, classes=4, planted=5, delta=4.0,
                 noise_scale=1.0, seed=0):
        if planted > d:
            raise ShapeError(f"cannot plant {planted} markers in {d} genes")
        if classes < 2:
            raise ValueError("synthetic data needs at least 2 classes")
        self.n = n
        self.d = d
        self.classes = classes
        self.planted = planted
        self.delta = delta
        self.noise_scale = noise_scale
        self.seed = seed

    def to_dict(self):
        return {
            "n": self.n, "d": self.d, "classes": self.classes,
            "planted": self.planted, "delta": self.delta,
            "noise_scale": self.noise_scale, "seed": self.seed,
        }


def load_csv(path, label_column=None):
    """Parse a CSV into a Dataset; labels map to dense ids in name order."""
    with open(path, encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            raise DataFormatError(f"{path}:1: empty header row")
        header = [h.strip() for h in header_line.rstrip("\n").split(",")]
        label_idx = None
        if label_column is not None:
            if label_column not in header:
                raise DataFormatError(
                    f"{path}:1: label column {label_column!r} not in header"
                )
            label_idx = header.index(label_column)
        gene_names = [h for i, h in enumerate(header) if i != label_idx]
        rows = []
        raw_labels = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split(",")
            if len(fields) != len(header):
                raise DataFormatError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(fields)}"
                )
            values = []
            for i, field in enumerate(fields):
                if i == label_idx:
                    raw_labels.append(field.strip())
                    continue
                try:
                    values.append(float(field))
                except ValueError:
                    raise DataFormatError(
                        f"{path}:{lineno}: non-numeric expression value {field.strip()!r}"
                    ) from None
            rows.append(values)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    x = Matrix.from_rows(rows)
    labels = None
    class_names = None
    if label_idx is not None:
        class_names = sorted(set(raw_labels))
        table = {name: i for i, name in enumerate(class_names)}
        labels = [table[name] for name in raw_labels]
    return Dataset(x, labels, gene_names, class_names=class_names)


def save_csv(dataset, path, label_column="label"):
    """Inverse of load_csv; floats are written with repr so they round-trip."""
    with open(path, "w", encoding="utf-8") as fh:
        header = list(dataset.gene_names)
        if dataset.labels is not None:
            header.append(label_column)
        fh.write(",".join(header) + "\n")
        class_names = dataset.class_names or [
            str(c) for c in range(dataset.n_classes)
        ]
        for i in range(dataset.n_cells):
            fields = [repr(v) for v in dataset.x.row(i)]
            if dataset.labels is not None:
                fields.append(class_names[dataset.labels[i]])
            fh.write(",".join(fields) + "\n")


def preprocess(dataset, mode="classification", log_transform=True):
    """log2(1+x) then standardize.

    classification: per-gene mean 0 / variance 1 (zero-variance genes map to
    zeros); generative: whole-matrix mean 0 / variance 1. Synthetic Gaussian
    data sets log_transform=False since the log step expects count-like
    non-negative input.
    """
    if mode not in ("classification", "generative"):
        raise ValueError(f"unknown preprocessing mode {mode!r}")
    n, d = dataset.x.shape
    x = dataset.x.clone()
    if log_transform:
        if K.vmin(x.data, x.size) < 0.0:
            raise ValueError("log2(1+x) preprocessing needs non-negative input")
        K.log2_1p(x.data, x.data, x.size)
    if mode == "classification":
        mean = Matrix.zeros(1, d)
        var = Matrix.zeros(1, d)
        K.col_mean_var(x.data, mean.data, var.data, n, d)
        inv = Matrix.zeros(1, d)
        for j in range(d):
            v = var.data[j]
            inv.data[j] = 1.0 / math.sqrt(v) if v > 0.0 else 0.0
        K.colwise_affine(x.data, mean.data, inv.data, x.data, n, d)
    else:
        mean = K.vsum(x.data, x.size) / x.size
        sq = 0.0
        for i in range(x.size):
            diff = x.data[i] - mean
            sq += diff * diff
        var = sq / x.size
        inv = 1.0 / math.sqrt(var) if var > 0.0 else 0.0
        shift = Matrix.full(1, 1, mean)
        scale_ = Matrix.full(1, 1, inv)
        K.colwise_affine(x.data, shift.data, scale_.data, x.data, x.size, 1)
    return Dataset(x, dataset.labels, dataset.gene_names, dataset.cell_ids,
                   dataset.class_names, dataset.planted_markers)


def _allocate(count, fractions):
    """Largest-remainder split of `count` into len(fractions) buckets."""
    raw = [count * f for f in fractions]
    sizes = [int(r) for r in raw]
    remainders = sorted(
        range(len(raw)), key=lambda i: (raw[i] - sizes[i], -i), reverse=True
    )
    shortfall = count - sum(sizes)
    for i in range(shortfall):
        sizes[remainders[i]] += 1
    return sizes


def split(dataset, seed_or_rng, fractions=(0.7, 0.1, 0.2), stratified=True):
    """70/10/20 train/validation/test split, stratified by label when
    available (each class lands in train where possible)."""
    from markermap.rng import Rng

    n = dataset.n_cells
    if n < 10:
        raise ShapeError(f"need at least 10 rows to split, got {n}")
    rng = seed_or_rng if hasattr(seed_or_rng, "shuffle") else Rng(seed_or_rng).derive("split")
    if stratified and dataset.labels is not None:
        by_class = {}
        for i, y in enumerate(dataset.labels):
            by_class.setdefault(y, []).append(i)
        for y, members in by_class.items():
            if len(members) < 3:
                warnings.warn(
                    f"class {y} has only {len(members)} members; stratification is best-effort"
                )
        buckets = ([], [], [])
        for y in sorted(by_class):
            members = by_class[y]
            rng.shuffle(members)
            sizes = _allocate(len(members), fractions)
            if sizes[0] == 0 and members:
                # every class must be represented in train where possible
                donor = 1 if sizes[1] > 0 else 2
                sizes = list(sizes)
                sizes[donor] -= 1
                sizes[0] += 1
            start = 0
            for b, size in enumerate(sizes):
                buckets[b].extend(members[start : start + size])
                start += size
        train, validation, test = (sorted(b) for b in buckets)
        return SplitIndices(train, validation, test)
    order = list(range(n))
    rng.shuffle(order)
    sizes = _allocate(n, fractions)
    train = sorted(order[: sizes[0]])
    validation = sorted(order[sizes[0] : sizes[0] + sizes[1]])
    test = sorted(order[sizes[0] + sizes[1] :])
    return SplitIndices(train, validation, test)


def inject_label_noise(labels, train_indices, fraction, rng, n_classes=None):
    """Resample exactly floor(fraction * n_train) training labels uniformly
    over all classes (the fresh label may repeat the old one). Only training
    rows are touched."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"noise fraction must lie in [0, 1], got {fraction}")
    noisy = list(labels)
    n_train = len(train_indices)
    count = int(fraction * n_train)
    if count == 0:
        return noisy
    classes = n_classes or max(labels) + 1
    chosen = rng.sample_indices(n_train, count)
    for pos in chosen:
        noisy[train_indices[pos]] = rng.randbelow(classes)
    return noisy


def synthesize(spec):
    """Planted-marker generator.

    Each planted gene reads one bit of the class id: cells whose class sets
    that bit draw Normal(+delta/2, 1) and the rest Normal(-delta/2, 1), so
    classes differing in the bit are separated by exactly delta. The signed,
    zero-centered pattern keeps every planted gene useful in both directions
    (a one-sided pattern lets a selection model encode some classes purely
    as "low column values" and then actively avoid their markers). Remaining
    genes are Normal(0, noise_scale) independent of class. Planted indices
    are scattered over the genes and recorded on the returned Dataset;
    separability needs planted >= ceil(log2(classes)).
    """
    from markermap.rng import Rng

    rng = Rng(spec.seed).derive("synthesize")
    planted = sorted(rng.sample_indices(spec.d, spec.planted))
    labels = [i % spec.classes for i in range(spec.n)]
    rng.shuffle(labels)
    n_bits = max(1, math.ceil(math.log2(spec.classes)))
    x = Matrix(spec.n, spec.d, rng.normals(spec.n * spec.d, std=spec.noise_scale))
    half = spec.delta / 2.0
    for idx, g in enumerate(planted):
        bit = idx % n_bits
        for i in range(spec.n):
            sign = 1.0 if (labels[i] >> bit) & 1 else -1.0
            x.data[i * spec.d + g] = rng.normal() + sign * half
    class_names = [f"class{c}" for c in range(spec.classes)]
    return Dataset(x, labels, None, None, class_names, planted)


def gather_markers(x, markers):
    """Marker-column view of a matrix: (n,d) -> (n,k) in marker order."""
    if not markers:
        raise ShapeError("marker set is empty")
    for j in markers:
        if not 0 <= j < x.cols:
            raise ShapeError(f"marker index {j} out of range [0, {x.cols})")
    idx = array("q", markers)
    out = Matrix.zeros(x.rows, len(markers))
    K.gather_cols(x.data, idx, out.data, x.rows, x.cols, len(markers))
    return out


def gather_rows(x, indices):
    """Row subset of a matrix: (n,d) -> (len(indices),d) in index order."""
    if not indices:
        raise ShapeError("row index set is empty")
    for i in indices:
        if not 0 <= i < x.rows:
            raise ShapeError(f"row index {i} out of range [0, {x.rows})")
    idx = array("q", indices)
    out = Matrix.zeros(len(indices), x.cols)
    K.gather_rows(x.data, idx, out.data, len(indices), x.cols)
    return out
