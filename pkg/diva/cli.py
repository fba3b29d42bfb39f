"""Command-line experiment runner: fit-dpmm, train-diva, eval and export-latent."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from diva.config import ExperimentConfig, load_config
from diva.datasets import Dataset, load_dataset, load_labels, read_latent_dump, select_classes, write_latent_dump
from diva.dpmm import load_model, predict, save_model
from diva.errors import ConfigError, ContractError, DivaError
from diva.memoized import fit_dpmm
from diva.metrics import LabeledAssignment, clustering_accuracy, knn_error
from diva.training import RunWriter, embed, train
from diva.vae import load_params

logger = logging.getLogger("diva")


# -----------------------------
#  Helpers
# -----------------------------
def setup_logging(quiet: bool = False) -> None:
    logging.basicConfig(
        level=logging.WARNING if quiet else logging.INFO,
        format="[%(levelname)s] %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _config(args) -> ExperimentConfig:
    return load_config(args.config, seed=args.seed, output_dir=args.output_dir, max_epochs=args.max_epochs)


def _training_data(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset is None:
        raise ConfigError("config has no 'dataset' section")
    return select_classes(load_dataset(cfg.dataset, cfg.max_rows), cfg.classes)


# -----------------------------
#  Subcommands
# -----------------------------
def cmd_fit_dpmm(args) -> int:
    """DPMM-only fit on the configured feature file."""
    cfg = _config(args)
    data = _training_data(cfg)
    writer = RunWriter(cfg.output_dir)
    logger.info("Fitting DPMM on %d rows x %d features", len(data), data.input_dim)

    result = fit_dpmm(
        data.features,
        cfg.prior.to_prior(data.input_dim),
        cfg.moves,
        epochs=cfg.max_epochs,
        steps=cfg.dpmm_steps,
        rng=np.random.default_rng(cfg.seed),
        n_batches=cfg.memo_batches,
        labels=data.labels,
        log_wall_clock=cfg.log_wall_clock,
        on_epoch=writer.write_epoch,
    )

    save_model(result.model, writer.output_dir / "dpmm.json")
    writer.write_report({
        "epochs": len(result.history),
        "final_K": result.model.K,
        "component_ids": list(result.model.component_ids),
        "acc": result.history[-1]["acc"] if result.history else None,
        "accepted_births": len(result.move_log.accepted("birth")),
        "accepted_merges": len(result.move_log.accepted("merge")),
    })
    logger.info("Final K=%d", result.model.K)
    return 0


def cmd_train_diva(args) -> int:
    """Full alternating VAE / DPMM training."""
    cfg = _config(args)
    if cfg.quiet:
        setup_logging(quiet=True)
    if cfg.dataset is None:
        raise ConfigError("config has no 'dataset' section")
    data = load_dataset(cfg.dataset, cfg.max_rows)
    test = load_dataset(cfg.test_dataset) if cfg.test_dataset else None

    writer = RunWriter(cfg.output_dir)
    writer.output_dir.joinpath("config.json").write_text(cfg.model_dump_json(indent=2), encoding="utf-8")
    state, history = train(data, cfg, test_dataset=test, writer=writer)
    logger.info("Trained %d epochs, final K=%d", len(history), state.model.K)
    return 0


def cmd_eval(args) -> int:
    """ACC and kNN errors from latent dumps."""
    z, labels, clusters = read_latent_dump(args.latents)
    if args.labels:
        labels = load_labels(args.labels)
    if labels is None:
        raise ContractError("evaluation needs labels (in the dump or via --labels)")

    report = {"rows": int(z.shape[0])}
    if clusters is not None:
        report["acc"] = clustering_accuracy(LabeledAssignment(clusters, labels))

    if args.train_latents:
        train_z, train_labels, _ = read_latent_dump(args.train_latents)
        if train_labels is None:
            raise ContractError(f"{args.train_latents} carries no labels")
        report["knn_error"] = {
            str(k): knn_error(train_z, train_labels, z, labels, k) for k in args.k
        }

    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
        logger.info("Wrote %s", args.out)
    print(text)
    return 0


def cmd_export_latent(args) -> int:
    """Encode a dataset with a checkpoint and write z rows with labels and clusters."""
    cfg = _config(args)
    checkpoint = Path(args.checkpoint)
    params = load_params(checkpoint / "vae.json")
    model = load_model(checkpoint / "dpmm.json")

    source = cfg.test_dataset if args.split == "test" else cfg.dataset
    if source is None:
        raise ConfigError(f"config has no dataset for split '{args.split}'")
    data = select_classes(load_dataset(source, cfg.max_rows), cfg.classes)

    z = embed(params, data.features)
    write_latent_dump(args.out, z, data.labels, predict(z, model))
    logger.info("Wrote %d latent rows to %s", len(data), args.out)
    return 0


# -----------------------------
#  Parser
# -----------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diva", description="DPMM-coupled VAE experiments")
    parser.add_argument("--quiet", action="store_true", help="only warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--output-dir", default=None)
        p.add_argument("--max-epochs", type=int, default=None)
        return p

    p = with_config(sub.add_parser("fit-dpmm", help="fit a DP mixture to a feature file"))
    p.set_defaults(func=cmd_fit_dpmm)

    p = with_config(sub.add_parser("train-diva", help="alternating VAE / DPMM training"))
    p.set_defaults(func=cmd_train_diva)

    p = sub.add_parser("eval", help="ACC and kNN errors from latent dumps")
    p.add_argument("--latents", required=True, help="latent dump CSV to evaluate")
    p.add_argument("--train-latents", default=None, help="labelled dump used as kNN reference")
    p.add_argument("--labels", default=None, help="CSV with a label column overriding dump labels")
    p.add_argument("--k", type=int, nargs="+", default=[1, 3, 5])
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("export-latent", help="encode a dataset with a checkpoint"))
    p.add_argument("--checkpoint", required=True, help="directory holding vae.json and dpmm.json")
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.add_argument("--out", required=True, help="latent dump CSV")
    p.set_defaults(func=cmd_export_latent)
    return parser


def run_cli(argv: Optional[List[str]] = None) -> int:
    """Parse `argv`, run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(args.quiet)
    try:
        return args.func(args)
    except (DivaError, FileNotFoundError) as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())
