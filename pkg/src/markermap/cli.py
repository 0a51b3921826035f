"""argparse front end.

Commands: select, evaluate, benchmark, noise, reconstruct, synth.
Precedence for every option: built-in default < --config file < explicit
flag. The config file is JSON with the same keys as the long flags
(underscores for dashes); `train` and `synth` may be nested objects.
"""

import argparse
import json
import sys

from markermap._core import backend_name
from markermap.data import SyntheticSpec
from markermap.errors import MarkerMapError
from markermap.model import TrainConfig
from markermap.pipeline import COMMANDS, HIDDEN_PRESETS, METHODS, RunSettings

_SETTINGS_KEYS = (
    "data", "label_column", "out", "seed", "seeds", "knn_neighbors",
    "methods", "k_grid", "noise_grid", "protocol", "markers_file",
    "save_model_path", "jobs", "log_transform",
)
_TRAIN_KEYS = tuple(TrainConfig.__dataclass_fields__)
_SYNTH_KEYS = ("n", "d", "classes", "planted", "delta", "noise_scale", "seed")


def _add_shared(parser):
    parser.add_argument("--data", help="expression CSV (header = gene names)")
    parser.add_argument("--synth", metavar="SPEC",
                        help="synthetic data spec, e.g. n=1000,d=100,classes=4,planted=5,delta=4")
    parser.add_argument("--label-column", dest="label_column",
                        help="header name of the label column")
    parser.add_argument("--mode", choices=("supervised", "unsupervised", "joint",
                                           "concrete_vae", "global_gumbel"))
    parser.add_argument("--k", type=int, help="marker budget")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--seeds", help="comma-separated seed list")
    parser.add_argument("--alpha", type=float,
                        help="reconstruction weight override in [0,1]")
    parser.add_argument("--beta", type=float, help="logit EMA coefficient")
    parser.add_argument("--tau-initial", dest="tau_initial", type=float)
    parser.add_argument("--tau-final", dest="tau_final", type=float)
    parser.add_argument("--hidden",
                        help=f"hidden width or preset ({', '.join(HIDDEN_PRESETS)})")
    parser.add_argument("--latent", type=int, help="latent dimension")
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float,
                        help="skip the finder and use this rate")
    parser.add_argument("--kl-weight", dest="kl_weight", type=float)
    parser.add_argument("--classification-loss", dest="classification_loss",
                        choices=("cross_entropy", "mse_one_hot"))
    parser.add_argument("--prior-markers", dest="prior_markers",
                        help="file with one known-marker name/index per line")
    parser.add_argument("--knn", dest="knn_neighbors", type=int,
                        help="neighbors for the downstream k-NN")
    parser.add_argument("--no-log-transform", dest="log_transform",
                        action="store_false", default=None,
                        help="skip log2(1+x) for already-continuous CSV data")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--save-model", dest="save_model_path",
                        help="write the fitted model to this path")
    parser.add_argument("--jobs", type=int, help="parallel workers for grids")
    parser.add_argument("--config", help="JSON config file")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="markermap",
        description="Differentiable global marker selection and evaluation",
    )
    parser.add_argument("--version", action="store_true", help="print version and exit")
    sub = parser.add_subparsers(dest="command")
    select = sub.add_parser("select", help="train and write a marker panel")
    evaluate = sub.add_parser("evaluate", help="score an existing marker file")
    evaluate.add_argument("--markers", dest="markers_file",
                          help="marker file (one gene per line)")
    benchmark = sub.add_parser("benchmark", help="methods x k-grid x seeds sweep")
    benchmark.add_argument("--methods",
                           help=f"comma list from: {', '.join(METHODS)}")
    benchmark.add_argument("--k-grid", dest="k_grid", help="comma list of budgets")
    noise = sub.add_parser("noise", help="label-noise robustness curves")
    noise.add_argument("--noise-grid", dest="noise_grid",
                       help="comma list of corruption fractions")
    noise.add_argument("--protocol", choices=("both", "selection-only"))
    reconstruct = sub.add_parser("reconstruct", help="reconstruction quality analysis")
    synth = sub.add_parser("synth", help="generate a planted-marker dataset")
    for p in (select, evaluate, benchmark, noise, reconstruct, synth):
        _add_shared(p)
    return parser


def _parse_synth(text, seed):
    spec = {}
    aliases = {"c": "classes", "m": "planted", "noise": "noise_scale"}
    for part in text.split(","):
        if not part.strip():
            continue
        if "=" not in part:
            raise MarkerMapError(f"bad synthetic spec fragment {part!r} (need key=value)")
        key, value = part.split("=", 1)
        key = aliases.get(key.strip(), key.strip())
        if key not in _SYNTH_KEYS:
            raise MarkerMapError(
                f"unknown synthetic spec key {key!r}; valid: {', '.join(_SYNTH_KEYS)}"
            )
        spec[key] = float(value) if key in ("delta", "noise_scale") else int(value)
    spec.setdefault("seed", seed)
    return SyntheticSpec(**spec)


def _parse_list(text, cast):
    return [cast(tok) for tok in str(text).split(",") if str(tok).strip()]


def _load_config_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise MarkerMapError(f"cannot read config file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise MarkerMapError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise MarkerMapError(f"{path}: config must be a JSON object")
    flat = {}
    for key, value in doc.items():
        if key in ("train", "synth") and isinstance(value, dict):
            flat[key] = value
        else:
            flat[key] = value
    return flat


def _resolve_hidden(value):
    if value is None:
        return None
    text = str(value).strip().lower()
    if text in HIDDEN_PRESETS:
        return HIDDEN_PRESETS[text]
    try:
        return int(text)
    except ValueError:
        raise MarkerMapError(
            f"--hidden must be an integer or one of {', '.join(HIDDEN_PRESETS)}"
        ) from None


def resolve_settings(args):
    """Merge defaults, config file, and explicit flags into RunSettings."""
    file_conf = _load_config_file(args.config) if args.config else {}
    train_values = dict(file_conf.get("train") or {})
    settings_values = {k: v for k, v in file_conf.items() if k in _SETTINGS_KEYS}
    for key in _TRAIN_KEYS:
        if key in file_conf and key not in ("train",):
            train_values.setdefault(key, file_conf[key])

    arg_map = vars(args)
    for key in _SETTINGS_KEYS:
        if arg_map.get(key) is not None:
            settings_values[key] = arg_map[key]
    for key in _TRAIN_KEYS:
        if arg_map.get(key) is not None:
            train_values[key] = arg_map[key]
    if arg_map.get("mode") is not None:
        train_values["mode"] = arg_map["mode"]
    if arg_map.get("k") is not None:
        train_values["k"] = arg_map["k"]
    if arg_map.get("seed") is not None:
        train_values["seed"] = arg_map["seed"]

    if "hidden" in train_values:
        train_values["hidden"] = _resolve_hidden(train_values["hidden"])
    if isinstance(train_values.get("prior_markers"), str):
        with open(train_values["prior_markers"], encoding="utf-8") as fh:
            train_values["prior_markers"] = [
                int(line.strip()) for line in fh if line.strip()
            ]
    train = TrainConfig.from_dict(train_values)

    synth = None
    synth_conf = file_conf.get("synth")
    if isinstance(synth_conf, dict):
        synth = SyntheticSpec(**{k: v for k, v in synth_conf.items() if k in _SYNTH_KEYS})
    if arg_map.get("synth"):
        synth = _parse_synth(arg_map["synth"], train.seed)

    settings = RunSettings(command=args.command, train=train, synth=synth)
    for key in _SETTINGS_KEYS:
        if key in settings_values and settings_values[key] is not None:
            setattr(settings, key, settings_values[key])
    settings.seed = train.seed
    if isinstance(settings.seeds, str):
        settings.seeds = _parse_list(settings.seeds, int)
    if isinstance(settings.methods, str):
        settings.methods = _parse_list(settings.methods, str)
    if isinstance(settings.k_grid, str):
        settings.k_grid = _parse_list(settings.k_grid, int)
    if isinstance(settings.noise_grid, str):
        settings.noise_grid = _parse_list(settings.noise_grid, float)
    return settings


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.version:
        from markermap import __version__

        print(f"markermap {__version__} (kernel backend: {backend_name()})")
        return 0
    if not args.command:
        parser.print_help()
        return 2
    try:
        settings = resolve_settings(args)
        COMMANDS[args.command](settings)
    except MarkerMapError as exc:
        print(f"markermap: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"markermap: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
