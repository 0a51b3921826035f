import json
import os

import pytest

from markermap import pipeline as P
from markermap.data import SyntheticSpec, load_csv, save_csv, synthesize
from markermap.errors import MarkerMapError
from markermap.model import TrainConfig


def settings(command, out, **kw):
    train_kw = kw.pop("train", {})
    base = dict(mode="supervised", k=3, hidden=16, latent=4, seed=0,
                learning_rate=1e-3, min_epochs=6, max_epochs=10, batch_size=32)
    base.update(train_kw)
    s = P.RunSettings(command=command, out=str(out), train=TrainConfig(**base))
    s.seed = s.train.seed
    for key, value in kw.items():
        setattr(s, key, value)
    return s


def synth_spec(seed=0, n=200, d=20, classes=3, planted=4):
    return SyntheticSpec(n=n, d=d, classes=classes, planted=planted,
                         delta=4.0, seed=seed)


def stripped(doc):
    out = dict(doc)
    out.pop("timing", None)
    return out


# -- select ------------------------------------------------------------------


def test_select_writes_distinct_markers_and_valid_report(tmp_path):
    s = settings("select", tmp_path, synth=synth_spec(), train={"k": 5})
    doc = P.run_select(s)
    P.validate_report(doc)
    lines = (tmp_path / "markers.txt").read_text().splitlines()
    assert len(lines) == 5
    assert len(set(lines)) == 5
    assert (tmp_path / "report.json").exists()
    assert (tmp_path / "confusion.csv").exists()
    assert doc["metrics"]["knn"]["accuracy"] >= 0.0


def test_select_unsupervised_on_unlabeled_csv(tmp_path):
    ds = synthesize(synth_spec())
    unlabeled = type(ds)(ds.x, None, ds.gene_names)
    path = str(tmp_path / "plain.csv")
    save_csv(unlabeled, path)
    s = settings("select", tmp_path / "out", data=path, log_transform=False,
                 train={"mode": "unsupervised"})
    doc = P.run_select(s)
    P.validate_report(doc)
    assert doc["metrics"] == {}  # no labels: no k-NN block


def test_select_supervised_needs_labels(tmp_path):
    ds = synthesize(synth_spec())
    unlabeled = type(ds)(ds.x, None, ds.gene_names)
    path = str(tmp_path / "plain.csv")
    save_csv(unlabeled, path)
    s = settings("select", tmp_path / "out", data=path, log_transform=False)
    with pytest.raises(MarkerMapError, match="label"):
        P.run_select(s)


def test_select_report_deterministic_modulo_timing(tmp_path):
    a = P.run_select(settings("select", tmp_path / "a", synth=synth_spec()))
    b = P.run_select(settings("select", tmp_path / "b", synth=synth_spec()))
    sa, sb = stripped(a), stripped(b)
    sa["config"]["out"] = sb["config"]["out"] = ""
    assert json.dumps(sa, sort_keys=True) == json.dumps(sb, sort_keys=True)


# -- evaluate ------------------------------------------------------------------


def test_evaluate_scores_marker_file(tmp_path):
    ds = synthesize(synth_spec())
    path = str(tmp_path / "labeled.csv")
    save_csv(ds, path)
    markers_path = tmp_path / "markers.txt"
    markers_path.write_text(
        "".join(f"gene{j}\n" for j in ds.planted_markers), encoding="utf-8"
    )
    s = settings("evaluate", tmp_path / "out", data=path, label_column="label",
                 log_transform=False, markers_file=str(markers_path))
    doc = P.run_evaluate(s)
    P.validate_report(doc)
    assert doc["metrics"]["knn"]["accuracy"] > 0.9
    assert [m["index"] for m in doc["markers"]] == ds.planted_markers


def test_marker_file_parsing_rejects_unknown(tmp_path):
    bad = tmp_path / "markers.txt"
    bad.write_text("not_a_gene\n", encoding="utf-8")
    with pytest.raises(MarkerMapError, match="not_a_gene"):
        P.parse_marker_file(str(bad), ["ga", "gb"])


# -- benchmark ------------------------------------------------------------------


def test_benchmark_row_counts_and_ordering(tmp_path):
    s = settings("benchmark", tmp_path, synth=synth_spec(n=300),
                 methods=["markermap-supervised", "random"],
                 k_grid=[3, 5], seeds=[0, 1])
    doc = P.run_benchmark(s)
    P.validate_report(doc)
    assert len(doc["rows"]) == 2 * 2 * 2
    assert len(doc["summary"]) == 4
    runs = (tmp_path / "benchmark_runs.csv").read_text().splitlines()
    assert len(runs) == 1 + 8
    summary = (tmp_path / "benchmark_summary.csv").read_text().splitlines()
    assert summary[0].split(",")[:5] == [
        "method", "k", "mean_accuracy", "var_accuracy", "std_accuracy"
    ]
    # method ordering at full training scale is covered by the acceptance suite


def test_benchmark_rejects_unknown_method(tmp_path):
    s = settings("benchmark", tmp_path, synth=synth_spec(), methods=["lasso"])
    with pytest.raises(MarkerMapError, match="unknown method"):
        P.run_benchmark(s)


# -- noise ------------------------------------------------------------------------


def test_noise_zero_matches_select_exactly(tmp_path):
    spec = synth_spec(n=300)
    select_doc = P.run_select(settings("select", tmp_path / "sel", synth=spec))
    noise_doc = P.run_noise(settings("noise", tmp_path / "noise", synth=spec,
                                     noise_grid=[0.0], seeds=[0]))
    noise_acc = noise_doc["rows"][0][4]
    assert noise_acc == select_doc["metrics"]["knn"]["accuracy"]


def test_noise_unsupervised_curve_is_flat(tmp_path):
    s = settings("noise", tmp_path, synth=synth_spec(n=300),
                 noise_grid=[0.0, 0.3, 0.6], seeds=[1],
                 train={"mode": "unsupervised", "min_epochs": 6, "max_epochs": 10})
    doc = P.run_noise(s)
    accs = {row[4] for row in doc["rows"]}
    assert len(accs) == 1


def test_noise_validates_protocol_and_grid(tmp_path):
    s = settings("noise", tmp_path, synth=synth_spec(), protocol="bogus")
    with pytest.raises(MarkerMapError, match="protocol"):
        P.run_noise(s)
    s2 = settings("noise", tmp_path, synth=synth_spec(), noise_grid=[1.5])
    with pytest.raises(MarkerMapError, match="fraction"):
        P.run_noise(s2)


# -- reconstruct -------------------------------------------------------------------


def test_reconstruct_report_structure(tmp_path):
    s = settings("reconstruct", tmp_path, synth=synth_spec(n=300),
                 train={"mode": "unsupervised", "min_epochs": 8, "max_epochs": 12})
    doc = P.run_reconstruct(s)
    P.validate_report(doc)
    table = doc["reconstruction"]["table"]
    groups = [row["group"] for row in table]
    assert groups[-1] == "All"
    assert len(groups) == 3 + 1  # one per class plus overall
    for row in table:
        assert row["mean_l2"] >= 0.0
        assert 0.0 <= row["jaccard"] <= 1.0
    assert (tmp_path / "variances.csv").exists()
    assert (tmp_path / "pca.csv").exists()


def test_reconstruct_rejects_supervised(tmp_path):
    s = settings("reconstruct", tmp_path, synth=synth_spec())
    with pytest.raises(MarkerMapError, match="generative"):
        P.run_reconstruct(s)


# -- synth -----------------------------------------------------------------------------


def test_synth_round_trips_through_csv(tmp_path):
    s = settings("synth", tmp_path, synth=synth_spec(seed=3))
    doc = P.run_synth(s)
    P.validate_report(doc)
    back = load_csv(str(tmp_path / "synthetic.csv"), "label")
    original = synthesize(synth_spec(seed=3))
    assert back.x == original.x
    planted = (tmp_path / "planted_markers.txt").read_text().splitlines()
    assert planted == [f"gene{j}" for j in original.planted_markers]


def test_synth_requires_spec(tmp_path):
    with pytest.raises(MarkerMapError, match="spec"):
        P.run_synth(settings("synth", tmp_path))


# -- report schema ------------------------------------------------------------------------


def test_validate_report_catches_missing_key():
    with pytest.raises(MarkerMapError, match="missing"):
        P.validate_report({"command": "select"})


def test_validate_report_catches_bad_type(tmp_path):
    doc = P.run_synth(settings("synth", tmp_path, synth=synth_spec()))
    doc["markers"] = "oops"
    with pytest.raises(MarkerMapError, match="type"):
        P.validate_report(doc)


# -- slower contract checks --------------------------------------------------------


def _rank_correlation(xs, ys):
    def ranks(vals):
        order = sorted(range(len(vals)), key=lambda i: vals[i])
        out = [0.0] * len(vals)
        for r, i in enumerate(order):
            out[i] = float(r)
        return out

    rx, ry = ranks(xs), ranks(ys)
    mx = sum(rx) / len(rx)
    my = sum(ry) / len(ry)
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    sx = sum((a - mx) ** 2 for a in rx) ** 0.5
    sy = sum((b - my) ** 2 for b in ry) ** 0.5
    return cov / (sx * sy)


def test_benchmark_accuracy_improves_with_budget(tmp_path):
    s = settings("benchmark", tmp_path,
                 synth=SyntheticSpec(n=600, d=40, classes=3, planted=6,
                                     delta=4.0, seed=0),
                 methods=["markermap-supervised", "random"],
                 k_grid=[2, 4, 8], seeds=[0, 1, 2],
                 train={"mode": "supervised", "hidden": 32,
                        "learning_rate": 1e-3})
    doc = P.run_benchmark(s)
    mean_acc = {(r[0], r[1]): r[2] for r in doc["summary"]}
    ks = [2, 4, 8]
    sup = [mean_acc[("markermap-supervised", k)] for k in ks]
    assert _rank_correlation(ks, sup) > 0
    for k in ks:
        assert mean_acc[("markermap-supervised", k)] > mean_acc[("random", k)]


def test_benchmark_covers_sampling_variants(tmp_path):
    s = settings("benchmark", tmp_path,
                 synth=SyntheticSpec(n=200, d=15, classes=2, planted=3,
                                     delta=4.0, seed=1),
                 methods=["concrete-vae", "global-gumbel"],
                 k_grid=[3], seeds=[0],
                 train={"min_epochs": 6, "max_epochs": 8, "hidden": 12,
                        "learning_rate": 1e-3})
    doc = P.run_benchmark(s)
    assert len(doc["rows"]) == 2
    for row in doc["rows"]:
        assert 0.0 <= row[3] <= 1.0


def test_select_saves_model_when_asked(tmp_path):
    from markermap.model import load_model

    s = settings("select", tmp_path, synth=synth_spec(),
                 save_model_path=str(tmp_path / "model.json"))
    doc = P.run_select(s)
    loaded = load_model(str(tmp_path / "model.json"))
    assert loaded.fitted
    assert loaded.extract_markers() == [m["index"] for m in doc["markers"]]
