"""Command line interface: generate data, train, run inference, evaluate.

Settings resolve in fixed precedence, lowest to highest: built-in
defaults, the ``--profile`` preset, the ``--config`` JSON document, the
``STREAKFIX_SEED`` environment variable (seed only), then explicit
command line flags.  Config files use the flag names with underscores
(``{"sparse_views": 25}``); unknown keys are rejected.  Every
subcommand finishes validating before it writes anything, so a failed
invocation leaves no partial outputs.

Exit codes: 0 success, 1 I/O error, 2 configuration error, 3 numerical
failure during training (the diagnostics path is printed alongside).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import container, evaluation, tomo_sim, training
from .errors import ConfigError, InputError, NumericsError, StartupError
from .losses import LossWeights

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_NUMERICS = 3

SEED_ENV_VAR = "STREAKFIX_SEED"

# The identity row of evaluation reports: the uncorrected sparse-view input.
IDENTITY_MODEL = "input"


@dataclasses.dataclass(frozen=True)
class Option:
    """One resolvable setting: a CLI flag that a config file may also set."""

    name: str
    kind: str  # int | float | str | path | bool | choice | widths | specs
    default: object
    help: str
    choices: tuple = ()

    @property
    def flag(self):
        return "--" + self.name.replace("_", "-")


GEN_DATA_OPTIONS = (
    Option("out", "path", None, "output dataset directory"),
    Option("phantoms", "int", 27, "number of synthetic phantoms"),
    Option("slices", "int", 8, "slices generated per phantom"),
    Option("size", "int", 384, "slice resolution in pixels per side"),
    Option("ellipses", "int", 12, "ellipse count per phantom"),
    Option("sparse_views", "int", 67, "projection views for the artifact-laden input"),
    Option("dense_views", "int", 200, "projection views for the reference reconstruction"),
    Option(
        "filter", "choice", "ram-lak", "reconstruction filter", choices=tomo_sim.FILTER_KINDS
    ),
    Option("patch_size", "int", 256, "training patch side in pixels; 0 stores whole slices"),
    Option(
        "patches_per_slice",
        "int",
        4,
        "random patches cropped per slice; 0 together with --patch-size 0",
    ),
    Option("seed", "int", 0, "master seed for phantom shapes and patch cropping"),
)

TRAIN_OPTIONS = (
    Option("dataset", "path", None, "paired dataset directory written by gen-data"),
    Option("out", "path", None, "output directory for checkpoints and logs"),
    Option("variant", "choice", None, "model variant to train", choices=training.VARIANTS),
    Option("fold", "int", -1, "cross-validation fold to train; -1 trains every fold"),
    Option("epochs", "int", 50, "training epochs"),
    Option("batch_size", "int", 4, "samples per optimization step"),
    Option("lr", "float", 1e-4, "Adam learning rate"),
    Option("beta1", "float", 0.5, "Adam first-moment decay"),
    Option("folds", "int", 5, "number of cross-validation folds"),
    Option("seed", "int", 0, "seed for weight init, shuffling and fold assignment"),
    Option("lambda_adv", "float", 1.0, "adversarial loss weight"),
    Option("lambda_mse", "float", 100.0, "MSE regularizer weight (baseline-mse only)"),
    Option("lambda_perceptual", "float", 10.0, "perceptual regularizer weight"),
    Option("gen_widths", "widths", (64, 128, 256, 512), "generator encoder widths"),
    Option("disc_widths", "widths", (64, 128, 256), "discriminator encoder widths"),
    Option("pyramid_width", "int", 128, "pyramid channel width (pyramid variants only)"),
    Option(
        "extractor_weights",
        "path",
        None,
        "feature extractor weights file (default: the shared cache)",
    ),
    Option("deterministic", "bool", False, "fixed seeds plus deterministic kernels"),
)

INFER_OPTIONS = (
    Option("checkpoint", "path", None, "generator checkpoint (.svcp)"),
    Option(
        "dataset",
        "path",
        None,
        "input dataset directory; every sample's sparse-view image is corrected",
    ),
    Option("out", "path", None, "output directory for corrected slices"),
    Option("batch_size", "int", 8, "slices per forward pass"),
)

EVAL_OPTIONS = (
    Option("dataset", "path", None, "paired dataset directory with reference images"),
    Option("out", "path", None, "report directory"),
    Option("fold", "int", 0, "held-out fold to evaluate; -1 evaluates every sample"),
    Option("folds", "int", 5, "fold count used at training time"),
    Option("seed", "int", 0, "seed used at training time (fixes the fold split)"),
    Option("checkpoints", "specs", {}, "generator checkpoints to run inline"),
    Option("outputs", "specs", {}, "precomputed output-set directories"),
    Option("batch_size", "int", 8, "slices per forward pass for inline inference"),
    Option(
        "roi",
        "str",
        None,
        "region of interest as row,col,height,width (default: brightest region)",
    ),
    Option("roi_size", "int", 16, "side of the automatically placed ROI"),
)

# The desk profile is a small fixed benchmark (10 phantoms x 4 slices x 5
# patches = 200 pairs of 64x64) sized so that training all five variants
# takes minutes on a CPU.  Slices are 128 pixels wide, so 25 views leaves
# roughly the same angular undersampling factor relative to the Nyquist
# view count as 67 views does for full-resolution scans; at 67 views a
# 128-pixel slice is barely undersampled and there is no artifact left
# worth removing.  The generation seed is part of the benchmark.
PROFILE_VALUES = {
    "desk": {
        "gen-data": {
            "phantoms": 10,
            "slices": 4,
            "size": 128,
            "sparse_views": 25,
            "patch_size": 64,
            "patches_per_slice": 5,
            "seed": 7,
        },
        "train": {"epochs": 5, "deterministic": True},
    },
}
PROFILES = tuple(PROFILE_VALUES)


def _widths_from_text(text, name):
    parts = [p.strip() for p in str(text).split(",")]
    try:
        widths = tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{name} must be a comma-separated list of integers, got {text!r}")
    return widths


def _specs_from_args(pairs, flag):
    specs = {}
    for pair in pairs:
        name, sep, path = str(pair).partition("=")
        if not sep or not name or not path:
            raise ConfigError(f"{flag} expects NAME=PATH, got {pair!r}")
        if name in specs:
            raise ConfigError(f"{flag}: duplicate model name {name!r}")
        specs[name] = path
    return specs


def _coerce(option, value, source):
    """Validate one config-file value against the option's declared kind."""
    kind = option.kind

    def fail(expected):
        return ConfigError(f"{source}: key {option.name!r} must be {expected}, got {value!r}")
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise fail("an integer")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise fail("a number")
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise fail("true or false")
        return value
    if kind in ("str", "path", "choice"):
        if not isinstance(value, str):
            raise fail("a string")
        if option.choices and value not in option.choices:
            raise fail(f"one of {', '.join(option.choices)}")
        return value
    if kind == "widths":
        if isinstance(value, str):
            return _widths_from_text(value, option.name)
        if isinstance(value, list) and all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            return tuple(value)
        raise fail("a list of integers")
    if kind == "specs":
        if not isinstance(value, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in value.items()
        ):
            raise fail("an object mapping model names to paths")
        return dict(value)
    raise AssertionError(f"unhandled option kind {kind!r}")


def _read_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return doc


def _resolve(options, args):
    """Merge defaults, profile, config file, env seed and CLI flags."""
    values = {o.name: o.default for o in options}
    byname = {o.name: o for o in options}

    profile = getattr(args, "profile", None)
    if profile:
        for key, value in PROFILE_VALUES[profile].get(args.command, {}).items():
            values[key] = value

    config_path = getattr(args, "config", None)
    if config_path:
        doc = _read_config(config_path)
        unknown = sorted(set(doc) - set(values))
        if unknown:
            raise ConfigError(
                f"{config_path}: unknown config keys: {', '.join(unknown)}; "
                f"known keys: {', '.join(sorted(values))}"
            )
        for key, value in doc.items():
            values[key] = _coerce(byname[key], value, str(config_path))

    if "seed" in values and SEED_ENV_VAR in os.environ:
        raw = os.environ[SEED_ENV_VAR]
        try:
            values["seed"] = int(raw)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}")

    for name, option in byname.items():
        given = getattr(args, name, None)
        if given is None:
            continue
        if option.kind == "widths":
            values[name] = _widths_from_text(given, option.flag)
        elif option.kind == "specs":
            values[name] = _specs_from_args(given, option.flag)
        else:
            values[name] = given
    return values


def _require(values, *names):
    missing = [n for n in names if values[n] in (None, "")]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise ConfigError(f"missing required setting(s): {flags}")


def _add_options(parser, options):
    for option in options:
        default = option.default
        if option.kind == "widths" and default:
            default = ",".join(str(w) for w in default)
        note = "" if default in (None, (), {}) else f" (default: {default})"
        help_text = option.help + note
        if option.kind == "bool":
            parser.add_argument(
                option.flag, dest=option.name, action="store_true", default=None, help=help_text
            )
        elif option.kind == "specs":
            parser.add_argument(
                option.flag,
                dest=option.name,
                action="append",
                default=None,
                metavar="NAME=PATH",
                help=help_text + " (repeatable)",
            )
        elif option.kind == "choice":
            parser.add_argument(
                option.flag, dest=option.name, choices=option.choices, default=None, help=help_text
            )
        else:
            metavar = {"int": "N", "float": "X", "path": "PATH", "widths": "W,W,..."}.get(
                option.kind
            )
            typ = {"int": int, "float": float}.get(option.kind, str)
            parser.add_argument(
                option.flag,
                dest=option.name,
                type=typ,
                default=None,
                metavar=metavar,
                help=help_text,
            )


def _add_common(parser, profile=False):
    parser.add_argument(
        "--config", metavar="PATH", default=None, help="JSON config file (flags override it)"
    )
    if profile:
        parser.add_argument(
            "--profile",
            choices=PROFILES,
            default=None,
            help="apply a named preset before config/flags (desk: small CPU benchmark)",
        )


def cmd_gen_data(args):
    v = _resolve(GEN_DATA_OPTIONS, args)
    _require(v, "out")
    config = tomo_sim.DatasetConfig(
        size=v["size"],
        num_ellipses=v["ellipses"],
        sparse_views=v["sparse_views"],
        dense_views=v["dense_views"],
        filter_kind=v["filter"],
        seed=v["seed"],
    )
    config.validate()
    if v["patch_size"] < 0 or v["patches_per_slice"] < 0:
        raise ConfigError("--patch-size and --patches-per-slice must be >= 0")
    patch_size = v["patch_size"] or None
    if patch_size is not None and patch_size > v["size"]:
        raise ConfigError(
            f"patch size {patch_size} exceeds the slice size {v['size']}"
        )
    dataset = tomo_sim.build_dataset(
        v["phantoms"],
        v["slices"],
        config,
        v["out"],
        patch_size=patch_size,
        patches_per_slice=v["patches_per_slice"],
    )
    print(f"wrote {len(dataset)} paired samples to {dataset.root}")
    print(
        f"views: sparse {config.sparse_views} / dense {config.dense_views}, "
        f"slice size {config.size}, seed {config.seed}"
    )


def cmd_train(args):
    v = _resolve(TRAIN_OPTIONS, args)
    _require(v, "dataset", "out", "variant")
    weights = LossWeights(
        lambda_a=v["lambda_adv"], lambda_m=v["lambda_mse"], lambda_p=v["lambda_perceptual"]
    )
    config = training.TrainConfig(
        variant=v["variant"],
        dataset_dir=v["dataset"],
        out_dir=v["out"],
        lr=v["lr"],
        beta1=v["beta1"],
        epochs=v["epochs"],
        batch_size=v["batch_size"],
        folds=v["folds"],
        seed=v["seed"],
        weights=weights,
        generator_widths=v["gen_widths"],
        discriminator_widths=v["disc_widths"],
        pyramid_width=v["pyramid_width"],
        extractor_weights=v["extractor_weights"],
        deterministic=v["deterministic"],
    )
    config.validate()
    if v["fold"] >= config.folds:
        raise ConfigError(f"fold {v['fold']} outside [0, {config.folds - 1}]")
    fold_ids = range(config.folds) if v["fold"] < 0 else [v["fold"]]
    for fold_id in fold_ids:
        result = training.train_fold(config, fold_id)
        print(f"fold {fold_id}: held out {', '.join(result.held_out)}")
        print(f"  generator checkpoint: {result.checkpoint_path}")
        print(f"  training log:         {result.log_path}")


def cmd_infer(args):
    v = _resolve(INFER_OPTIONS, args)
    _require(v, "checkpoint", "dataset", "out")
    if v["batch_size"] < 1:
        raise ConfigError(f"batch size must be positive, got {v['batch_size']}")
    generator = training.load_generator(v["checkpoint"])
    dataset = container.Dataset.load(v["dataset"])
    keys, images = [], []
    for record in dataset.samples:
        keys.append((record.phantom_id, record.slice_id))
        images.append(container.read_image(dataset.root / record.sparse_path))
    corrected = training.infer(generator, images, batch_size=v["batch_size"])
    meta = {"checkpoint": str(v["checkpoint"]), "source": str(dataset.root)}
    container.write_output_set(v["out"], list(zip(keys, corrected)), meta=meta)
    print(f"wrote {len(corrected)} corrected slices to {v['out']}")


def _parse_roi(text):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 4:
        raise ConfigError(f"--roi expects row,col,height,width, got {text!r}")
    try:
        row, col, height, width = (int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"--roi expects four integers, got {text!r}")
    return evaluation.RoiWindow(row=row, col=col, height=height, width=width)


def cmd_eval(args):
    v = _resolve(EVAL_OPTIONS, args)
    _require(v, "dataset", "out")
    if v["batch_size"] < 1:
        raise ConfigError(f"batch size must be positive, got {v['batch_size']}")

    sources = {}
    for name, path in v["checkpoints"].items():
        sources[name] = ("checkpoint", path)
    for name, path in v["outputs"].items():
        if name in sources:
            raise ConfigError(f"model {name!r} given both as checkpoint and output set")
        sources[name] = ("outputs", path)
    if IDENTITY_MODEL in sources:
        raise ConfigError(f"model name {IDENTITY_MODEL!r} is reserved for the identity row")

    dataset = container.Dataset.load(v["dataset"])
    if v["fold"] < 0:
        samples = dataset.samples
    else:
        groups = training.build_folds(dataset, v["folds"], v["seed"])
        _, samples = training.split_samples(dataset, groups, v["fold"])
    if not samples:
        raise ConfigError(f"fold {v['fold']} holds no samples")
    keys = [(s.phantom_id, s.slice_id) for s in samples]
    references, sparse = [], []
    for sample in samples:
        sp, de = dataset.load_pair(sample)
        sparse.append(sp)
        references.append(de)

    if v["roi"] is not None:
        window = _parse_roi(v["roi"])
    else:
        window = evaluation.default_roi(references[0], size=v["roi_size"])
    try:
        window.check_within(references[0].shape)
    except InputError as exc:
        raise ConfigError(str(exc)) from exc

    candidates = {IDENTITY_MODEL: sparse}
    absent = []
    for name, (kind, path) in sources.items():
        if kind == "checkpoint":
            if not Path(path).is_file():
                absent.append((name, path))
                candidates[name] = None
                continue
            generator = training.load_generator(path)
            candidates[name] = training.infer(generator, sparse, batch_size=v["batch_size"])
        else:
            if not (Path(path) / container.MANIFEST_NAME).is_file():
                absent.append((name, path))
                candidates[name] = None
                continue
            images, _ = container.load_output_set(path)
            missing = [k for k in keys if k not in images]
            if missing:
                raise InputError(
                    f"output set {path} lacks {len(missing)} evaluated slices "
                    f"(first missing: {missing[0][0]}/{missing[0][1]})"
                )
            candidates[name] = [images[k] for k in keys]

    rows = evaluation.evaluate_outputs(references, candidates)
    table = evaluation.format_metrics_table(rows)
    first_images = {
        name: images[0] for name, images in candidates.items() if images is not None
    }
    report = evaluation.roi_report(references[0], first_images, window)

    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(table + "\n")
    evaluation.write_metrics_csv(rows, out / "metrics.csv")
    roi_doc = {
        "slice": f"{keys[0][0]}/{keys[0][1]}",
        "window": dataclasses.asdict(window),
        "means": report.means,
        "stds": report.stds,
    }
    (out / "roi.json").write_text(json.dumps(roi_doc, indent=2, sort_keys=True) + "\n")
    evaluation.save_comparison_plot(out / "comparison.png", references[0], first_images, window)
    evaluation.save_roi_bar_chart(out / "roi_bars.png", report)

    for name, path in absent:
        print(f"note: model {name!r}: {path} not found, listed as absent")
    print(table)
    print(f"report written to {out}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="streakfix",
        description=(
            "Sparse-view CT streak artifact reduction: simulate paired data, "
            "train adversarial correction models, run inference, evaluate."
        ),
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    gen = sub.add_parser(
        "gen-data",
        help="generate a paired sparse/dense dataset of synthetic phantoms",
        description="Generate paired sparse-view / dense-view reconstructions.",
    )
    _add_options(gen, GEN_DATA_OPTIONS)
    _add_common(gen, profile=True)
    gen.set_defaults(handler=cmd_gen_data)

    train = sub.add_parser(
        "train",
        help="train one model variant with cross-validation folds",
        description="Train a correction model variant; writes checkpoints and JSONL logs.",
    )
    _add_options(train, TRAIN_OPTIONS)
    _add_common(train, profile=True)
    train.set_defaults(handler=cmd_train)

    infer = sub.add_parser(
        "infer",
        help="correct the sparse-view images of a dataset with a trained generator",
        description="Apply a generator checkpoint to every sparse-view image of a dataset.",
    )
    _add_options(infer, INFER_OPTIONS)
    _add_common(infer)
    infer.set_defaults(handler=cmd_infer)

    ev = sub.add_parser(
        "eval",
        help="score models on held-out samples and write a report",
        description=(
            "Evaluate models against reference reconstructions; writes a metrics "
            "table (text + CSV), an ROI report and comparison plots.  The table "
            "always includes the uncorrected input as row 'input'."
        ),
    )
    _add_options(ev, EVAL_OPTIONS)
    _add_common(ev)
    ev.set_defaults(handler=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = getattr(args, "handler", None)
    if handler is None:
        parser.print_help()
        return EXIT_CONFIG
    try:
        handler(args)
    except NumericsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.diagnostics_path is not None:
            print(f"diagnostics written to {exc.diagnostics_path}", file=sys.stderr)
        return EXIT_NUMERICS
    except (ConfigError, StartupError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
