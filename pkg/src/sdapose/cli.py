"""Command-line interface: generate / train / eval / report / plot.

Every subcommand accepts ``--config FILE`` (a JSON file, schema version 1,
unknown keys rejected); explicitly passed flags override config values.
On failure the process exits nonzero after printing a single line of the
form ``sdapose: error: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import metrics as met
from . import networks as nets
from . import report as rep
from . import synthdata as sd
from . import trainer as tr

ERROR_PREFIX = "sdapose: error:"
CONFIG_VERSION = 1


class CLIError(ValueError):
    """User-facing failure; its message becomes the one-line error output."""


# keys each subcommand accepts in a config file (besides "version")
CONFIG_KEYS = {
    "generate": {"out", "n_source", "n_target_labeled", "n_target_test",
                 "target_preset", "seed", "crop_size", "scene"},
    "train": {"source", "target", "scenario", "out", "lr", "epochs",
              "finetune_epochs", "batch_source", "batch_target", "seed",
              "loss_kind", "lambda_risk", "lambda_rep", "grl_lambda"},
    "eval": {"checkpoint", "dataset", "split", "pck_threshold", "gt_bypass",
             "bound", "source_dataset", "no_refine"},
    "report": {"csv", "format"},
    "plot": {"checkpoint", "dataset", "out", "n_images", "seed", "gt_bypass"},
}


def load_config(path, command):
    with open(path) as f:
        try:
            cfg = json.load(f)
        except json.JSONDecodeError as e:
            raise CLIError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}")
    if not isinstance(cfg, dict):
        raise CLIError(f"{path}: config must be a JSON object")
    version = cfg.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise CLIError(f"{path}: unsupported config version {version!r} "
                       f"(expected {CONFIG_VERSION})")
    unknown = sorted(set(cfg) - CONFIG_KEYS[command])
    if unknown:
        raise CLIError(f"{path}: unknown config keys for {command!r}: {unknown}")
    return cfg


def resolve(args, command, defaults):
    """Merge precedence: defaults < config file < explicit flags.

    argparse stores None for flags the user did not pass, so a non-None
    attribute always wins over the config file.
    """
    merged = dict(defaults)
    if args.config:
        merged.update(load_config(args.config, command))
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


# -- generate -----------------------------------------------------------------------


GENERATE_DEFAULTS = {
    "out": None,
    "n_source": 2000,
    "n_target_labeled": 200,
    "n_target_test": 500,
    "target_preset": "sunlamp",
    "seed": 0,
    "crop_size": 64,
    "scene": None,
}


def cmd_generate(args):
    cfg = resolve(args, "generate", GENERATE_DEFAULTS)
    if not cfg["out"]:
        raise CLIError("generate: --out (or config key 'out') is required")
    if cfg["target_preset"] not in sd.SHIFT_PRESETS:
        raise CLIError(f"generate: unknown preset {cfg['target_preset']!r}; "
                       f"choose from {sorted(sd.SHIFT_PRESETS)}")
    scene = (sd.SceneConfig.from_dict(cfg["scene"]) if cfg["scene"]
             else sd.SceneConfig())
    crop = cfg["crop_size"]
    seed = cfg["seed"]

    src, s_train, s_test = sd.generate_dataset(
        scene, sd.SHIFT_PRESETS["clean"], cfg["n_source"],
        nets.DomainLabel.SOURCE, seed, crop_size=crop)
    sd.save_dataset(os.path.join(cfg["out"], "source"), src, s_train, s_test,
                    scene, sd.SHIFT_PRESETS["clean"], seed)

    n_tgt = cfg["n_target_labeled"] + cfg["n_target_test"]
    shift = sd.SHIFT_PRESETS[cfg["target_preset"]]
    tgt, t_train, t_test = sd.generate_dataset(
        scene, shift, n_tgt, nets.DomainLabel.TARGET, seed + 7919,
        crop_size=crop, n_test=cfg["n_target_test"])
    sd.save_dataset(os.path.join(cfg["out"], "target"), tgt, t_train, t_test,
                    scene, shift, seed + 7919)

    print(f"wrote {len(src)} source samples to {cfg['out']}/source "
          f"(manifest {sd.manifest_hash(os.path.join(cfg['out'], 'source'))[:12]})")
    print(f"wrote {len(t_train)} labeled + {len(t_test)} test target samples "
          f"to {cfg['out']}/target "
          f"(manifest {sd.manifest_hash(os.path.join(cfg['out'], 'target'))[:12]})")
    return 0


# -- train --------------------------------------------------------------------------


TRAIN_DEFAULTS = {
    "source": None,
    "target": None,
    "scenario": "lirr_sda",
    "out": None,
    "lr": 1e-3,
    "epochs": 3,
    "finetune_epochs": 2,
    "batch_source": 8,
    "batch_target": 8,
    "seed": 0,
    "loss_kind": "mse",
    "lambda_risk": 1.0,
    "lambda_rep": 0.1,
    "grl_lambda": 1.0,
}


def _load_split(dirpath, which):
    samples, train_idx, test_idx, scene, _ = sd.load_dataset(dirpath)
    idx = train_idx if which == "train" else test_idx
    return [samples[i] for i in idx], scene


def cmd_train(args):
    cfg = resolve(args, "train", TRAIN_DEFAULTS)
    if not cfg["out"]:
        raise CLIError("train: --out (or config key 'out') is required")
    try:
        scenario = tr.Scenario(cfg["scenario"])
    except ValueError:
        raise CLIError(f"train: unknown scenario {cfg['scenario']!r}; choose "
                       f"from {[s.value for s in tr.Scenario]}")
    source = target = None
    if cfg["source"]:
        source, _ = _load_split(cfg["source"], "train")
    if cfg["target"]:
        target, _ = _load_split(cfg["target"], "train")

    from .losses import LossWeights
    weights = LossWeights(lambda_risk=cfg["lambda_risk"],
                          lambda_rep=cfg["lambda_rep"],
                          grl_lambda=cfg["grl_lambda"])
    train_cfg = tr.TrainConfig(
        lr=cfg["lr"], batch_source=cfg["batch_source"],
        batch_target=cfg["batch_target"], epochs=cfg["epochs"],
        finetune_epochs=cfg["finetune_epochs"], weights=weights,
        seed=cfg["seed"], loss_kind=cfg["loss_kind"])
    bundle, history = tr.train(scenario, source, target, train_cfg)

    os.makedirs(cfg["out"], exist_ok=True)
    ckpt = os.path.join(cfg["out"], "checkpoint.bin")
    nets.save_checkpoint(bundle, ckpt)
    hist_path = os.path.join(cfg["out"], "history.csv")
    with open(hist_path, "w") as f:
        f.write("\n".join(tr.history_csv_lines(history)) + "\n")
    print(f"trained {scenario.value} for {len(history)} steps; "
          f"wrote {ckpt} and {hist_path}")
    return 0


# -- eval ---------------------------------------------------------------------------


EVAL_DEFAULTS = {
    "checkpoint": None,
    "dataset": None,
    "split": "test",
    "pck_threshold": met.PCK_THRESHOLD_PX,
    "gt_bypass": False,
    "bound": False,
    "source_dataset": None,
    "no_refine": False,
}


def _gt_bypass_override(sample):
    import numpy as np
    return sample.crop_transform.to_full(
        np.array([[p.u, p.v] for p in sample.keypoints2d]))


def cmd_eval(args):
    cfg = resolve(args, "eval", EVAL_DEFAULTS)
    if not cfg["dataset"]:
        raise CLIError("eval: --dataset is required")
    if not cfg["checkpoint"] and not cfg["gt_bypass"]:
        raise CLIError("eval: --checkpoint is required unless --gt-bypass")
    if cfg["split"] not in ("train", "test"):
        raise CLIError(f"eval: split must be 'train' or 'test', got {cfg['split']!r}")

    testset, scene = _load_split(cfg["dataset"], cfg["split"])
    if not testset:
        raise CLIError(f"eval: dataset {cfg['dataset']} has an empty "
                       f"{cfg['split']} split")
    bundle = nets.load_checkpoint(cfg["checkpoint"]) if cfg["checkpoint"] else None
    override = _gt_bypass_override if cfg["gt_bypass"] else None
    pnp = met.PnPConfig(refine=not cfg["no_refine"])
    result = met.evaluate_pipeline(bundle, testset, scene, pnp_config=pnp,
                                   pck_threshold=cfg["pck_threshold"],
                                   keypoint_override=override)
    print(",".join(met.MetricsReport.CSV_COLUMNS))
    print(result.csv_row())

    if cfg["bound"]:
        if not cfg["source_dataset"]:
            raise CLIError("eval: --bound requires --source-dataset")
        if bundle is None:
            raise CLIError("eval: --bound requires a checkpoint")
        source, _ = _load_split(cfg["source_dataset"], "train")
        bound = tr.empirical_bound_terms(bundle, source, testset)
        print(bound.prose())
    return 0


# -- report -------------------------------------------------------------------------


def cmd_report(args):
    cfg = resolve(args, "report", {"csv": None, "format": "text"})
    if not cfg["csv"]:
        raise CLIError("report: a suite CSV path is required")
    if cfg["format"] not in ("text", "markdown"):
        raise CLIError(f"report: format must be 'text' or 'markdown', "
                       f"got {cfg['format']!r}")
    with open(cfg["csv"]) as f:
        text = f.read()
    try:
        rows = rep.read_suite_csv(text)
    except rep.ReportFormatError as e:
        raise CLIError(str(e))
    sys.stdout.write(rep.render_table(rows, fmt=cfg["format"]))
    return 0


# -- plot ---------------------------------------------------------------------------


PLOT_DEFAULTS = {
    "checkpoint": None,
    "dataset": None,
    "out": None,
    "n_images": 4,
    "seed": 0,
    "gt_bypass": False,
}


def cmd_plot(args):
    cfg = resolve(args, "plot", PLOT_DEFAULTS)
    if not cfg["dataset"] or not cfg["out"]:
        raise CLIError("plot: --dataset and --out are required")
    if not cfg["checkpoint"] and not cfg["gt_bypass"]:
        raise CLIError("plot: --checkpoint is required unless --gt-bypass")
    testset, _ = _load_split(cfg["dataset"], "test")
    if cfg["n_images"] > len(testset):
        raise CLIError(f"plot: n_images ({cfg['n_images']}) exceeds test split "
                       f"size ({len(testset)})")
    bundle = nets.load_checkpoint(cfg["checkpoint"]) if cfg["checkpoint"] else None
    override = _gt_bypass_override if cfg["gt_bypass"] else None
    os.makedirs(cfg["out"], exist_ok=True)
    paths = rep.plot_predictions(bundle, testset, cfg["out"], cfg["n_images"],
                                 seed=cfg["seed"], keypoint_override=override)
    for p in paths:
        print(p)
    return 0


# -- entry point --------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sdapose",
        description="Synthetic-to-target 6-DoF pose estimation experiments: "
                    "dataset generation, adaptation training, evaluation, "
                    "tables, and overlay plots.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="JSON config file; flags override it")

    p = sub.add_parser("generate", help="write source and target dataset dirs")
    add_config(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--n-source", dest="n_source", type=int)
    p.add_argument("--n-target-labeled", dest="n_target_labeled", type=int)
    p.add_argument("--n-target-test", dest="n_target_test", type=int)
    p.add_argument("--target-preset", dest="target_preset",
                   choices=sorted(sd.SHIFT_PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--crop-size", dest="crop_size", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one scenario; write checkpoint + history")
    add_config(p)
    p.add_argument("--source", help="source dataset directory")
    p.add_argument("--target", help="target dataset directory")
    p.add_argument("--scenario", choices=[s.value for s in tr.Scenario])
    p.add_argument("--out", help="output directory")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--finetune-epochs", dest="finetune_epochs", type=int)
    p.add_argument("--batch-source", dest="batch_source", type=int)
    p.add_argument("--batch-target", dest="batch_target", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--loss-kind", dest="loss_kind", choices=["mse", "xent"])
    p.add_argument("--lambda-risk", dest="lambda_risk", type=float)
    p.add_argument("--lambda-rep", dest="lambda_rep", type=float)
    p.add_argument("--grl-lambda", dest="grl_lambda", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; print a metrics CSV row")
    add_config(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--split", choices=["train", "test"])
    p.add_argument("--pck-threshold", dest="pck_threshold", type=float)
    p.add_argument("--gt-bypass", dest="gt_bypass", action="store_const",
                   const=True, help="replace the regressor with GT keypoints")
    p.add_argument("--bound", action="store_const", const=True,
                   help="also print the generalization-bound diagnostic")
    p.add_argument("--source-dataset", dest="source_dataset",
                   help="source dataset for --bound")
    p.add_argument("--no-refine", dest="no_refine", action="store_const",
                   const=True, help="skip iterative pose refinement after PnP")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render a suite CSV as a table")
    add_config(p)
    p.add_argument("csv", nargs="?", help="suite CSV path")
    p.add_argument("--format", choices=["text", "markdown"])
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plot", help="write keypoint overlay images")
    add_config(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--n-images", dest="n_images", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--gt-bypass", dest="gt_bypass", action="store_const",
                   const=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CLIError as e:
        print(f"{ERROR_PREFIX} {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"{ERROR_PREFIX} {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
