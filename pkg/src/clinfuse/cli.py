"""Command-line entry point.

Subcommands: synth, train, eval, cv, ablate, gradcheck. All settings live in
a flat ``key = value`` config file; a handful of flags override it (flags
win). Every run validates the full configuration before touching the output
directory, and all randomness flows from one seed.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

import numpy as np

from .data import (
    DatasetError,
    SynthSpec,
    kfold_split,
    load_dataset,
    save_dataset,
    slice_arrays,
    synth_generate,
    compute_normalization_stats,
    preprocess,
)
from .evaluation import (
    METRIC_NAMES,
    ablation_run,
    cross_validate,
    evaluate_model,
    format_metric,
    render_ablation,
    render_report,
    render_table,
    report_csv_rows,
    VARIANT_ORDER,
)
from .model import ModelConfig, Variant, tiny_config, model_forward, map_parameters
from .seeding import derive_seed
from .tensor import Tensor, cross_entropy_loss, finite_difference_check
from .training import (
    CheckpointError,
    ConfigError,
    TrainConfig,
    TrainingAborted,
    init_model_params,
    load_params_for_eval,
    train,
)
from .model import named_parameters

GRADCHECK_TOLERANCE = 1e-5


class UsageError(Exception):
    """Bad flags or config keys; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_usage()}")


# ---------------------------------------------------------------------------
# flat key = value config files
# ---------------------------------------------------------------------------

def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_tuple(s: str) -> tuple:
    return tuple(int(v) for v in s.split(",") if v != "")


# key -> (section, field, caster)
CONFIG_SCHEMA = {
    "variant": ("model", "variant", Variant),
    "image_size": ("model", "image_size", int),
    "in_channels": ("model", "in_channels", int),
    "stem_channels": ("model", "stem_channels", int),
    "stage_channels": ("model", "stage_channels", _int_tuple),
    "stage_blocks": ("model", "stage_blocks", _int_tuple),
    "attention_stages": ("model", "attention_stages", _int_tuple),
    "d_clin": ("model", "d_clin", int),
    "clin_hidden": ("model", "clin_hidden", int),
    "d_emb": ("model", "d_emb", int),
    "num_classes": ("model", "num_classes", int),
    "attention_squash": ("model", "attention_squash", _bool),
    "bn_momentum": ("model", "bn_momentum", float),
    "bn_epsilon": ("model", "bn_epsilon", float),
    "learning_rate": ("train", "learning_rate", float),
    "epochs": ("train", "epochs", int),
    "batch_size": ("train", "batch_size", int),
    "seed": ("train", "seed", int),
    "beta1": ("train", "beta1", float),
    "beta2": ("train", "beta2", float),
    "adam_eps": ("train", "adam_eps", float),
    "optimizer": ("train", "optimizer", str),
    "checkpoint_every": ("train", "checkpoint_every", int),
    "synth_patients": ("synth", "n_patients", int),
    "synth_slices": ("synth", "slices_per_patient", int),
    "image_signal": ("synth", "image_signal", float),
    "clinical_signal": ("synth", "clinical_signal", float),
    "shared_signal": ("synth", "shared_signal", float),
    "noise_sigma": ("synth", "noise_sigma", float),
    "data_dir": ("paths", "data_dir", str),
    "checkpoint": ("paths", "checkpoint", str),
    "folds": ("run", "folds", int),
    "jobs": ("run", "jobs", int),
    "aggregation": ("run", "aggregation", str),
}


def parse_config_file(path) -> dict:
    """Flat key = value lines, '#' comments; every key must be known."""
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as err:
        raise UsageError(f"cannot read config {path}: {err}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in CONFIG_SCHEMA:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        _section, _field, caster = CONFIG_SCHEMA[key]
        try:
            values[key] = caster(value)
        except ValueError as err:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {err}") from None
    return values


class Settings:
    """Everything a subcommand needs, resolved from config file + flags."""

    def __init__(self, args):
        values = parse_config_file(args.config) if args.config else {}
        # flags win over config-file values
        if args.seed is not None:
            values["seed"] = args.seed
        if getattr(args, "variant", None) is not None:
            values["variant"] = Variant(args.variant)
        if getattr(args, "folds", None) is not None:
            values["folds"] = args.folds
        if getattr(args, "jobs", None) is not None:
            values["jobs"] = args.jobs
        if getattr(args, "aggregation", None) is not None:
            values["aggregation"] = args.aggregation

        model_kwargs, train_kwargs, synth_kwargs = {}, {}, {}
        self.paths = {}
        self.run = {"folds": 5, "jobs": 1, "aggregation": "slice"}
        for key, value in values.items():
            section, field_name, _ = CONFIG_SCHEMA[key]
            if section == "model":
                model_kwargs[field_name] = value
            elif section == "train":
                train_kwargs[field_name] = value
            elif section == "synth":
                synth_kwargs[field_name] = value
            elif section == "paths":
                self.paths[field_name] = value
            else:
                self.run[field_name] = value

        seed = train_kwargs.get("seed", 0)
        self.model = ModelConfig(**model_kwargs)
        self.train = TrainConfig(**train_kwargs)
        self.synth = SynthSpec(
            d_clin=self.model.d_clin,
            image_size=self.model.image_size,
            seed=derive_seed(seed, "synth"),
            **synth_kwargs,
        )
        self.out = args.out
        self.seed = seed

    def validate(self, need_synth=False, need_data=False, need_checkpoint=False):
        self.model.validate()
        self.train.validate()
        if self.run["aggregation"] not in ("slice", "patient"):
            raise UsageError(f"aggregation must be slice or patient, "
                             f"got {self.run['aggregation']!r}")
        if self.run["folds"] < 2:
            raise UsageError("folds must be >= 2")
        if self.run["jobs"] < 1:
            raise UsageError("jobs must be >= 1")
        if need_synth:
            self.synth.validate()
        if need_data and "data_dir" not in self.paths:
            raise UsageError("this command needs 'data_dir' in the config")
        if need_checkpoint and "checkpoint" not in self.paths:
            raise UsageError("this command needs 'checkpoint' in the config")

    def load_data(self):
        data_dir = self.paths["data_dir"]
        csv_path = os.path.join(data_dir, "clinical.csv")
        img_dir = os.path.join(data_dir, "images")
        return load_dataset(csv_path, img_dir)


def _ensure_out(settings) -> str:
    if settings.out is None:
        raise UsageError("this command needs --out DIR")
    os.makedirs(settings.out, exist_ok=True)
    return settings.out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(settings: Settings) -> int:
    settings.validate(need_synth=True)
    out = _ensure_out(settings)
    dataset = synth_generate(settings.synth)
    target = os.path.join(out, "dataset")
    save_dataset(dataset, target)
    n_slices = sum(len(r.images) for r in dataset.records)
    print(f"wrote {len(dataset.records)} patients ({n_slices} slices) to {target}")
    return 0


def _prepared_training_arrays(settings: Settings, dataset):
    ids = [r.patient_id for r in dataset.records]
    stats = compute_normalization_stats(dataset, ids)
    prepped = preprocess(dataset, stats, settings.model.image_size)
    return prepped, slice_arrays(prepped)


def cmd_train(settings: Settings) -> int:
    settings.validate(need_data=True)
    dataset = settings.load_data()
    out = _ensure_out(settings)
    _, arrays = _prepared_training_arrays(settings, dataset)
    params = init_model_params(settings.model, derive_seed(settings.seed, "init"))
    cfg = replace(settings.train, seed=derive_seed(settings.seed, "shuffle"))
    ckpt = os.path.join(out, "model.ckpt")
    log = os.path.join(out, "train.log")
    if os.path.exists(log):
        os.remove(log)
    clinical = None if settings.model.variant == Variant.IMAGE_ONLY else arrays.clinical
    result = train(settings.model, params, arrays.images, clinical,
                   arrays.labels, cfg, checkpoint_path=ckpt, log_path=log)
    last = result.history[-1]
    print(f"trained {cfg.epochs} epochs: loss={last.loss:.4f} "
          f"acc={last.accuracy:.4f}; checkpoint at {ckpt}")
    return 0


def cmd_eval(settings: Settings) -> int:
    settings.validate(need_data=True, need_checkpoint=True)
    dataset = settings.load_data()
    params = load_params_for_eval(settings.paths["checkpoint"], settings.model)
    ids = [r.patient_id for r in dataset.records]
    stats = compute_normalization_stats(dataset, ids)
    prepped = preprocess(dataset, stats, settings.model.image_size)
    report = evaluate_model(settings.model, params, prepped, ids,
                            settings.run["aggregation"])
    print(render_report(report))
    if settings.out is not None:
        out = _ensure_out(settings)
        path = os.path.join(out, "report.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "fold"] + list(METRIC_NAMES))
            writer.writerow([settings.model.variant.value, "all"]
                            + [format_metric(v) for v in report.values()])
        print(f"wrote {path}")
    return 0


def cmd_cv(settings: Settings) -> int:
    settings.validate(need_data=True)
    dataset = settings.load_data()
    folds = kfold_split(dataset, settings.run["folds"],
                        derive_seed(settings.seed, "folds"))
    result = cross_validate(dataset, folds, settings.model, settings.train,
                            settings.run["aggregation"], settings.run["jobs"])
    header = ["fold"] + list(METRIC_NAMES)
    rows = [[str(fr.fold)] + [format_metric(v) for v in fr.report.values()]
            for fr in result.fold_results]
    rows.append(["mean"] + [format_metric(v) for v in result.mean.values()])
    rows.append(["std"] + [format_metric(v) for v in result.std.values()])
    print(render_table(rows, header))
    if settings.out is not None:
        out = _ensure_out(settings)
        path = os.path.join(out, "report.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "fold"] + list(METRIC_NAMES))
            for row in report_csv_rows(settings.model.variant.value, result):
                writer.writerow(row)
        print(f"wrote {path}")
    return 0


def _dataset_for_ablation(settings: Settings):
    if "data_dir" in settings.paths:
        return settings.load_data()
    settings.synth.validate()
    return synth_generate(settings.synth)


def cmd_ablate(settings: Settings) -> int:
    settings.validate()
    dataset = _dataset_for_ablation(settings)
    folds = kfold_split(dataset, settings.run["folds"],
                        derive_seed(settings.seed, "folds"))
    out = _ensure_out(settings)
    result = ablation_run(dataset, folds, settings.model, settings.train,
                          settings.run["aggregation"], settings.run["jobs"])
    print(render_ablation(result))
    path = os.path.join(out, "ablation.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "fold"] + list(METRIC_NAMES))
        for variant in VARIANT_ORDER:
            for row in report_csv_rows(variant.value, result.results[variant]):
                writer.writerow(row)
    print(f"wrote {path}")
    return 0


def cmd_gradcheck(settings: Settings) -> int:
    """Finite-difference check of the loss against every parameter group of
    the tiny configuration, at a fixed smooth evaluation point."""
    config = tiny_config()
    params = init_model_params(config, seed=33)
    rng = np.random.default_rng(202)
    image = rng.normal(size=(2, 1, config.image_size, config.image_size))
    clinical = rng.normal(size=(2, config.d_clin))
    labels = [0, 1]

    worst = 0.0
    worst_name = None
    for name, tensor in named_parameters(params):
        def f(t, _name=name):
            swapped = map_parameters(
                params, lambda n, old: t if n == _name else Tensor(old.data))
            probs = model_forward(config, swapped, Tensor(image),
                                  Tensor(clinical), train=True,
                                  update_stats=False)
            return cross_entropy_loss(probs, labels)

        err = finite_difference_check(f, tensor, 1e-5)
        if err > worst:
            worst, worst_name = err, name
    print(f"max relative error {worst:.3e} (parameter group {worst_name}, "
          f"{len(named_parameters(params))} groups checked)")
    if worst >= GRADCHECK_TOLERANCE:
        print(f"FAIL: exceeds tolerance {GRADCHECK_TOLERANCE:.0e}")
        return 2
    print(f"OK: below tolerance {GRADCHECK_TOLERANCE:.0e}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic dataset under --out/dataset"),
    "train": (cmd_train, "train one model; writes model.ckpt and train.log"),
    "eval": (cmd_eval, "evaluate a checkpoint on a dataset"),
    "cv": (cmd_cv, "k-fold cross-validation of one variant"),
    "ablate": (cmd_ablate, "cross-validate all three variants; writes ablation.csv"),
    "gradcheck": (cmd_gradcheck, "finite-difference check on the tiny config"),
}


def build_parser() -> _Parser:
    parser = _Parser(prog="clinfuse",
                     description="clinical-attention fusion classifier")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, (_fn, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", help="flat key=value config file")
        p.add_argument("--seed", type=int, metavar="U64", help="master seed")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--variant",
                       choices=[v.value for v in Variant],
                       help="model variant override")
        p.add_argument("--folds", type=int, metavar="K")
        p.add_argument("--jobs", type=int, metavar="N",
                       help="parallel fold trainings")
        p.add_argument("--aggregation", choices=["slice", "patient"])
    return parser


def run(argv) -> int:
    parser = build_parser()
    try:
        if not argv:
            raise UsageError(parser.format_usage())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        settings = Settings(args)
        fn = COMMANDS[args.command][0]
        return fn(settings)
    except UsageError as err:
        print(str(err).rstrip(), file=sys.stderr)
        return 1
    except (ConfigError, DatasetError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (TrainingAborted, CheckpointError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
