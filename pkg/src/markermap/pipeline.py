"""Command orchestration: select, evaluate, benchmark, noise, reconstruct,
synth. Each run_* function returns a report dict (and writes its files);
the CLI is a thin argparse wrapper around these.

Preprocessing is keyed to the command's goal: classification-style per-gene
standardization for select/benchmark/noise/evaluate, whole-matrix
standardization for reconstruct. CSV input gets the log2(1+x) transform;
synthetic data is already continuous and skips it.
"""

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from markermap import metrics
from markermap._core import backend_name
from markermap.data import (
    SyntheticSpec,
    gather_markers,
    gather_rows,
    inject_label_noise,
    load_csv,
    preprocess,
    save_csv,
    split,
    synthesize,
)
from markermap.errors import MarkerMapError
from markermap.model import (
    MarkerMapModel,
    TrainConfig,
    fit,
    random_markers,
    save_model,
)
from markermap.rng import Rng

REPORT_VERSION = 1

METHODS = (
    "markermap-supervised",
    "markermap-unsupervised",
    "markermap-joint",
    "concrete-vae",
    "global-gumbel",
    "random",
)

_METHOD_MODE = {
    "markermap-supervised": "supervised",
    "markermap-unsupervised": "unsupervised",
    "markermap-joint": "joint",
    "concrete-vae": "concrete_vae",
    "global-gumbel": "global_gumbel",
}

HIDDEN_PRESETS = {"zeisel": 256, "paul": 256, "citeseq": 64, "mouse-brain": 500}


@dataclass
class RunSettings:
    """Resolved invocation: data source, mode, budgets, output directory."""

    command: str = "select"
    data: str = None
    synth: SyntheticSpec = None
    label_column: str = None
    out: str = "."
    seed: int = 0
    seeds: list = field(default_factory=list)  # multi-seed commands
    knn_neighbors: int = 5
    methods: list = field(default_factory=lambda: ["markermap-supervised", "random"])
    k_grid: list = field(default_factory=lambda: [5])
    noise_grid: list = field(default_factory=lambda: [0.0, 0.1, 0.2])
    protocol: str = "both"  # or "selection-only"
    markers_file: str = None
    save_model_path: str = None
    jobs: int = 1
    log_transform: bool = True  # applies to CSV input; synthetic data never logs
    train: TrainConfig = field(default_factory=TrainConfig)

    def seed_list(self):
        return list(self.seeds) if self.seeds else [self.seed]


def _needs_labels(mode, alpha):
    return alpha < 1.0


def load_source(settings, seed=None):
    """Dataset plus whether the log2 transform applies (CSV counts only)."""
    if settings.data:
        ds = load_csv(settings.data, settings.label_column)
        return ds, settings.log_transform
    if settings.synth:
        spec = settings.synth
        if seed is not None and seed != spec.seed:
            spec = SyntheticSpec(spec.n, spec.d, spec.classes, spec.planted,
                                 spec.delta, spec.noise_scale, seed)
        return synthesize(spec), False
    raise MarkerMapError("no data source: pass a CSV path or a synthetic spec")


def _dataset_block(ds, settings):
    return {
        "source": settings.data or f"synthetic:{settings.synth.to_dict()}",
        "n_cells": ds.n_cells,
        "n_genes": ds.n_genes,
        "n_classes": ds.n_classes,
        "class_names": ds.class_names,
        "planted_markers": ds.planted_markers,
    }


def _marker_block(ds, markers, scores=None):
    out = []
    for rank, j in enumerate(markers, start=1):
        entry = {"rank": rank, "index": j, "name": ds.gene_names[j]}
        if scores is not None:
            entry["score"] = scores[j]
        out.append(entry)
    return out


def _knn_block(ds, split_idx, markers, k_neighbors):
    train = ds.subset(split_idx.train)
    test = ds.subset(split_idx.test)
    preds = metrics.knn_classify(train.x, train.labels, test.x, markers, k_neighbors)
    return metrics.classification_metrics(test.labels, preds, ds.n_classes), test.labels, preds


def write_report(doc, out_dir, name="report.json"):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def write_markers(ds, markers, out_dir, name="markers.txt"):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        for j in markers:
            fh.write(ds.gene_names[j] + "\n")
    return path


def write_confusion_csv(report, class_names, out_dir, name="confusion.csv"):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    names = class_names or [str(c) for c in range(report.n_classes)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("true\\predicted," + ",".join(names) + "\n")
        for c, row in enumerate(report.confusion):
            fh.write(names[c] + "," + ",".join(str(v) for v in row) + "\n")
    return path


def write_rows_csv(rows, header, out_dir, name):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
            fh.write("\n")
    return path


def _train_config(settings, mode, k, seed):
    base = settings.train.to_dict()
    base.update({"mode": mode, "k": k, "seed": seed})
    if mode not in ("supervised", "unsupervised", "joint"):
        base["alpha"] = None
    return TrainConfig.from_dict(base)


def _fit_once(ds, split_idx, cfg):
    n_classes = ds.n_classes if cfg.resolved_alpha < 1.0 else max(ds.n_classes, 0)
    model = MarkerMapModel.build(ds.n_genes, n_classes, cfg)
    report = fit(model, ds, split_idx, cfg)
    return model, report


# -- select -----------------------------------------------------------------


def run_select(settings):
    started = time.perf_counter()
    mode = settings.train.mode
    raw, log_tf = load_source(settings, settings.seed)
    cfg = _train_config(settings, mode, settings.train.k, settings.seed)
    needs_labels = _needs_labels(mode, cfg.resolved_alpha)
    if needs_labels and raw.labels is None:
        raise MarkerMapError(
            f"mode {mode!r} needs labeled data; pass --label-column or use"
            " --mode unsupervised"
        )
    ds = preprocess(raw, "classification", log_transform=log_tf)
    stratified = ds.labels is not None and needs_labels
    split_idx = split(ds, settings.seed, stratified=stratified)
    model, train_report = _fit_once(ds, split_idx, cfg)
    markers = train_report.markers
    doc = {
        "report_version": REPORT_VERSION,
        "command": "select",
        "backend": backend_name(),
        "config": _settings_block(settings, cfg),
        "dataset": _dataset_block(ds, settings),
        "markers": _marker_block(ds, markers, model.logit_scores()),
        "training": {
            "learning_rate": train_report.learning_rate,
            "stop_epoch": train_report.stop_epoch,
            "train_losses": train_report.train_losses,
            "val_losses": train_report.val_losses,
        },
        "metrics": {},
        "timing": {"fit_seconds": train_report.wall_time_s},
    }
    if ds.labels is not None:
        knn_report, _, _ = _knn_block(ds, split_idx, markers, settings.knn_neighbors)
        doc["metrics"]["knn"] = knn_report.to_dict()
        write_confusion_csv(knn_report, ds.class_names, settings.out)
    write_markers(ds, markers, settings.out)
    if settings.save_model_path:
        save_model(model, settings.save_model_path)
    doc["timing"]["total_seconds"] = time.perf_counter() - started
    write_report(doc, settings.out)
    return doc


# -- evaluate ------------------------------------------------------------------


def parse_marker_file(path, gene_names):
    index = {name: j for j, name in enumerate(gene_names)}
    markers = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            token = line.strip()
            if not token:
                continue
            if token in index:
                markers.append(index[token])
            elif token.isdigit():
                markers.append(int(token))
            else:
                raise MarkerMapError(
                    f"{path}:{lineno}: {token!r} is neither a gene name nor an index"
                )
    if not markers:
        raise MarkerMapError(f"{path}: no markers found")
    return markers


def run_evaluate(settings):
    started = time.perf_counter()
    raw, log_tf = load_source(settings, settings.seed)
    if raw.labels is None:
        raise MarkerMapError("evaluate needs labeled data")
    if not settings.markers_file:
        raise MarkerMapError("evaluate needs --markers <file>")
    markers = parse_marker_file(settings.markers_file, raw.gene_names)
    ds = preprocess(raw, "classification", log_transform=log_tf)
    split_idx = split(ds, settings.seed, stratified=True)
    knn_report, _, _ = _knn_block(ds, split_idx, markers, settings.knn_neighbors)
    doc = {
        "report_version": REPORT_VERSION,
        "command": "evaluate",
        "backend": backend_name(),
        "config": _settings_block(settings, settings.train),
        "dataset": _dataset_block(ds, settings),
        "markers": _marker_block(ds, markers),
        "metrics": {"knn": knn_report.to_dict()},
        "timing": {"total_seconds": time.perf_counter() - started},
    }
    write_confusion_csv(knn_report, ds.class_names, settings.out)
    write_report(doc, settings.out)
    return doc


# -- benchmark ------------------------------------------------------------------


def _benchmark_cell(settings, method, k, seed):
    raw, log_tf = load_source(settings, seed)
    if raw.labels is None:
        raise MarkerMapError("benchmark needs labeled data for k-NN scoring")
    ds = preprocess(raw, "classification", log_transform=log_tf)
    split_idx = split(ds, seed, stratified=True)
    if method == "random":
        markers = random_markers(ds.n_genes, k, seed)
    else:
        cfg = _train_config(settings, _METHOD_MODE[method], k, seed)
        _, train_report = _fit_once(ds, split_idx, cfg)
        markers = train_report.markers
    knn_report, _, _ = _knn_block(ds, split_idx, markers, settings.knn_neighbors)
    return {
        "method": method,
        "k": k,
        "seed": seed,
        "accuracy": knn_report.accuracy,
        "weighted_f1": knn_report.weighted_f1,
        "markers": markers,
    }


def _run_cells(settings, tasks, worker):
    if settings.jobs > 1:
        with ProcessPoolExecutor(max_workers=settings.jobs) as pool:
            return list(pool.map(worker, tasks))
    return [worker(task) for task in tasks]


def _benchmark_worker(task):
    settings, method, k, seed = task
    return _benchmark_cell(settings, method, k, seed)


def run_benchmark(settings):
    started = time.perf_counter()
    for method in settings.methods:
        if method not in METHODS:
            raise MarkerMapError(
                f"unknown method {method!r}; choose from {', '.join(METHODS)}"
            )
    if not settings.methods or not settings.k_grid:
        raise MarkerMapError("benchmark needs at least one method and one k")
    tasks = [
        (settings, method, k, seed)
        for method in settings.methods
        for k in settings.k_grid
        for seed in settings.seed_list()
    ]
    cells = _run_cells(settings, tasks, _benchmark_worker)
    rows = [
        (c["method"], c["k"], c["seed"], c["accuracy"], c["weighted_f1"])
        for c in cells
    ]
    summary = []
    for method in settings.methods:
        for k in settings.k_grid:
            accs = [c["accuracy"] for c in cells if c["method"] == method and c["k"] == k]
            f1s = [c["weighted_f1"] for c in cells if c["method"] == method and c["k"] == k]
            summary.append(
                (method, k, _mean(accs), _variance(accs), math.sqrt(_variance(accs)),
                 _mean(f1s), _variance(f1s))
            )
    write_rows_csv(rows, ["method", "k", "seed", "accuracy", "weighted_f1"],
                   settings.out, "benchmark_runs.csv")
    write_rows_csv(
        summary,
        ["method", "k", "mean_accuracy", "var_accuracy", "std_accuracy",
         "mean_weighted_f1", "var_weighted_f1"],
        settings.out, "benchmark_summary.csv",
    )
    doc = {
        "report_version": REPORT_VERSION,
        "command": "benchmark",
        "backend": backend_name(),
        "config": _settings_block(settings, settings.train),
        "rows": [list(r) for r in rows],
        "summary": [list(r) for r in summary],
        "timing": {"total_seconds": time.perf_counter() - started},
    }
    write_report(doc, settings.out)
    return doc


# -- label-noise experiment -------------------------------------------------------


def _noise_cell(settings, p, seed):
    mode = settings.train.mode
    raw, log_tf = load_source(settings, seed)
    if raw.labels is None:
        raise MarkerMapError("the label-noise experiment needs labeled data")
    ds = preprocess(raw, "classification", log_transform=log_tf)
    split_idx = split(ds, seed, stratified=True)
    noise_rng = Rng(seed).derive(f"label-noise-{p!r}")
    noisy = inject_label_noise(ds.labels, split_idx.train, p, noise_rng,
                               n_classes=ds.n_classes)
    cfg = _train_config(settings, mode, settings.train.k, seed)
    uses_labels = cfg.resolved_alpha < 1.0
    fit_ds = ds.with_labels(noisy) if uses_labels else ds
    _, train_report = _fit_once(fit_ds, split_idx, cfg)
    markers = train_report.markers
    # classifier labels: noisy only under protocol "both" and only when the
    # selection itself consumed labels (unsupervised stays exactly flat)
    if settings.protocol == "both" and uses_labels:
        knn_labels = noisy
    else:
        knn_labels = ds.labels
    train = ds.subset(split_idx.train)
    test = ds.subset(split_idx.test)
    train_y = [knn_labels[i] for i in split_idx.train]
    preds = metrics.knn_classify(train.x, train_y, test.x, markers,
                                 settings.knn_neighbors)
    report = metrics.classification_metrics(test.labels, preds, ds.n_classes)
    return {
        "mode": mode, "protocol": settings.protocol, "noise": p, "seed": seed,
        "accuracy": report.accuracy, "weighted_f1": report.weighted_f1,
        "markers": markers,
    }


def _noise_worker(task):
    settings, p, seed = task
    return _noise_cell(settings, p, seed)


def run_noise(settings):
    started = time.perf_counter()
    if settings.protocol not in ("both", "selection-only"):
        raise MarkerMapError(
            f"unknown protocol {settings.protocol!r}; use 'both' or 'selection-only'"
        )
    for p in settings.noise_grid:
        if not 0.0 <= p <= 1.0:
            raise MarkerMapError(f"noise fraction {p} outside [0, 1]")
    tasks = [
        (settings, p, seed)
        for p in settings.noise_grid
        for seed in settings.seed_list()
    ]
    cells = _run_cells(settings, tasks, _noise_worker)
    rows = [
        (c["mode"], c["protocol"], c["noise"], c["seed"], c["accuracy"], c["weighted_f1"])
        for c in cells
    ]
    summary = []
    for p in settings.noise_grid:
        accs = [c["accuracy"] for c in cells if c["noise"] == p]
        summary.append((settings.train.mode, settings.protocol, p,
                        _mean(accs), _variance(accs), math.sqrt(_variance(accs))))
    write_rows_csv(rows, ["mode", "protocol", "noise", "seed", "accuracy", "weighted_f1"],
                   settings.out, "noise_runs.csv")
    write_rows_csv(summary, ["mode", "protocol", "noise", "mean_accuracy",
                             "var_accuracy", "std_accuracy"],
                   settings.out, "noise_summary.csv")
    doc = {
        "report_version": REPORT_VERSION,
        "command": "noise",
        "backend": backend_name(),
        "config": _settings_block(settings, settings.train),
        "rows": [list(r) for r in rows],
        "summary": [list(r) for r in summary],
        "timing": {"total_seconds": time.perf_counter() - started},
    }
    write_report(doc, settings.out)
    return doc


# -- reconstruction analysis ---------------------------------------------------------


def run_reconstruct(settings):
    started = time.perf_counter()
    mode = settings.train.mode
    cfg = _train_config(settings, mode, settings.train.k, settings.seed)
    if cfg.resolved_alpha == 0.0:
        raise MarkerMapError(
            "reconstruct needs a generative model; use --mode unsupervised or joint"
        )
    raw, log_tf = load_source(settings, settings.seed)
    needs_labels = _needs_labels(mode, cfg.resolved_alpha)
    if needs_labels and raw.labels is None:
        raise MarkerMapError(f"mode {mode!r} needs labeled data")
    ds = preprocess(raw, "generative", log_transform=log_tf)
    split_idx = split(ds, settings.seed,
                      stratified=ds.labels is not None and needs_labels)
    model, train_report = _fit_once(ds, split_idx, cfg)
    markers = train_report.markers
    test = ds.subset(split_idx.test)
    recon = model.reconstruct(gather_markers(test.x, markers))

    def metric_row(name, x, xr):
        return {
            "group": name,
            "cells": x.rows,
            "jaccard": metrics.jaccard_top_variance(x, xr),
            "spearman_rho": metrics.spearman_rho_variances(x, xr),
            "mean_l2": metrics.mean_l2(x, xr),
        }

    table = []
    if test.labels is not None:
        class_names = test.class_names or [str(c) for c in range(ds.n_classes)]
        for c in range(ds.n_classes):
            rows_c = [i for i, y in enumerate(test.labels) if y == c]
            if len(rows_c) < 2:
                continue
            table.append(metric_row(class_names[c], gather_rows(test.x, rows_c),
                                    gather_rows(recon, rows_c)))
    table.append(metric_row("All", test.x, recon))

    var_orig = metrics.column_variances(test.x)
    var_recon = metrics.column_variances(recon)
    write_rows_csv(
        list(zip(ds.gene_names, var_orig, var_recon)),
        ["gene", "variance_original", "variance_reconstructed"],
        settings.out, "variances.csv",
    )
    coords, eigenvalues = metrics.pca_project(test.x, recon)
    pca_rows = []
    for tag, m in zip(("original", "reconstructed"), coords):
        for i in range(m.rows):
            pca_rows.append((tag, test.cell_ids[i], m.get(i, 0), m.get(i, 1)))
    write_rows_csv(pca_rows, ["matrix", "cell", "pc1", "pc2"],
                   settings.out, "pca.csv")
    doc = {
        "report_version": REPORT_VERSION,
        "command": "reconstruct",
        "backend": backend_name(),
        "config": _settings_block(settings, cfg),
        "dataset": _dataset_block(ds, settings),
        "markers": _marker_block(ds, markers, model.logit_scores()),
        "training": {
            "learning_rate": train_report.learning_rate,
            "stop_epoch": train_report.stop_epoch,
            "train_losses": train_report.train_losses,
            "val_losses": train_report.val_losses,
        },
        "reconstruction": {
            "table": table,
            "pca_eigenvalues": eigenvalues,
            "mean_variance_original": _mean(var_orig),
            "mean_variance_reconstructed": _mean(var_recon),
        },
        "metrics": {},
        "timing": {
            "fit_seconds": train_report.wall_time_s,
            "total_seconds": time.perf_counter() - started,
        },
    }
    write_markers(ds, markers, settings.out)
    if settings.save_model_path:
        save_model(model, settings.save_model_path)
    write_report(doc, settings.out)
    return doc


# -- synthetic data ------------------------------------------------------------------


def run_synth(settings):
    started = time.perf_counter()
    if settings.synth is None:
        raise MarkerMapError("synth needs a synthetic spec (--synth n=...,d=...)")
    ds = synthesize(settings.synth)
    os.makedirs(settings.out, exist_ok=True)
    data_path = os.path.join(settings.out, "synthetic.csv")
    save_csv(ds, data_path, label_column="label")
    planted_path = os.path.join(settings.out, "planted_markers.txt")
    with open(planted_path, "w", encoding="utf-8") as fh:
        for j in ds.planted_markers:
            fh.write(ds.gene_names[j] + "\n")
    doc = {
        "report_version": REPORT_VERSION,
        "command": "synth",
        "backend": backend_name(),
        "config": {"synth": settings.synth.to_dict(), "out": settings.out},
        "dataset": _dataset_block(ds, settings),
        "files": {"data": data_path, "planted_markers": planted_path},
        "timing": {"total_seconds": time.perf_counter() - started},
    }
    write_report(doc, settings.out)
    return doc


# -- shared helpers -----------------------------------------------------------------


def _mean(values):
    return sum(values) / len(values)


def _variance(values):
    m = _mean(values)
    return sum((v - m) ** 2 for v in values) / len(values)


def _settings_block(settings, cfg):
    block = {
        "command": settings.command,
        "data": settings.data,
        "synth": settings.synth.to_dict() if settings.synth else None,
        "label_column": settings.label_column,
        "out": settings.out,
        "seed": settings.seed,
        "seeds": list(settings.seeds),
        "knn_neighbors": settings.knn_neighbors,
        "methods": list(settings.methods),
        "k_grid": list(settings.k_grid),
        "noise_grid": list(settings.noise_grid),
        "protocol": settings.protocol,
        "jobs": settings.jobs,
        "train": cfg.to_dict() if isinstance(cfg, TrainConfig) else dict(cfg),
    }
    return block


COMMANDS = {
    "select": run_select,
    "evaluate": run_evaluate,
    "benchmark": run_benchmark,
    "noise": run_noise,
    "reconstruct": run_reconstruct,
    "synth": run_synth,
}


# -- report schema -------------------------------------------------------------------

REPORT_SCHEMA = {
    "required": ["report_version", "command", "backend", "config", "timing"],
    "types": {
        "report_version": int,
        "command": str,
        "backend": str,
        "config": dict,
        "timing": dict,
        "dataset": dict,
        "markers": list,
        "metrics": dict,
        "training": dict,
        "reconstruction": dict,
        "rows": list,
        "summary": list,
        "files": dict,
    },
    "marker_entry": ["rank", "index", "name"],
}


def validate_report(doc):
    """Raise MarkerMapError if a report does not match REPORT_SCHEMA."""
    for key in REPORT_SCHEMA["required"]:
        if key not in doc:
            raise MarkerMapError(f"report is missing required key {key!r}")
    for key, value in doc.items():
        expected = REPORT_SCHEMA["types"].get(key)
        if expected is not None and not isinstance(value, expected):
            raise MarkerMapError(
                f"report key {key!r} has type {type(value).__name__},"
                f" expected {expected.__name__}"
            )
    if doc["report_version"] != REPORT_VERSION:
        raise MarkerMapError(f"unsupported report version {doc['report_version']}")
    if doc["command"] not in COMMANDS:
        raise MarkerMapError(f"unknown command {doc['command']!r} in report")
    for entry in doc.get("markers", []):
        for key in REPORT_SCHEMA["marker_entry"]:
            if key not in entry:
                raise MarkerMapError(f"marker entry is missing {key!r}")
    return True
