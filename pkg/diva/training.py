"""Alternating optimisation: VAE epochs fill a latent buffer, the DPMM is refit at epoch end."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from diva.config import ExperimentConfig
from diva.datasets import Dataset, apply_schedule, select_classes
from diva.dpmm import DpmmModel, init_model, predict, save_model
from diva.errors import ConfigError, ContractError
from diva.memoized import run_update
from diva.metrics import LabeledAssignment, cluster_label_map, clustering_accuracy, knn_error
from diva.moves import MoveLog, MoveRecord
from diva.vae import VaeParams, encode, init_params, save_params, train_step

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "K", "elbo", "recon_loss", "kl_loss", "acc", "seconds"]


# -----------------------------
#  Run state
# -----------------------------
class LatentBuffer:
    """Latent draws collected since the last DPMM update."""

    def __init__(self, latent_dim: int):
        self.latent_dim = latent_dim
        self._rows: List[np.ndarray] = []
        self._indices: List[np.ndarray] = []

    def append(self, z, source_indices) -> None:
        z = np.asarray(z, dtype=float).reshape(-1, self.latent_dim)
        self._rows.append(z)
        self._indices.append(np.asarray(source_indices, dtype=int).ravel())

    @property
    def rows(self) -> np.ndarray:
        if not self._rows:
            return np.zeros((0, self.latent_dim))
        return np.vstack(self._rows)

    @property
    def source_indices(self) -> np.ndarray:
        if not self._indices:
            return np.zeros(0, dtype=int)
        return np.concatenate(self._indices)

    def clear(self) -> None:
        self._rows.clear()
        self._indices.clear()

    def __len__(self) -> int:
        return sum(r.shape[0] for r in self._rows)


@dataclass
class TrainState:
    epoch: int
    params: VaeParams
    model: DpmmModel
    buffer: LatentBuffer
    rng: np.random.Generator
    move_log: MoveLog = field(default_factory=MoveLog)
    birth_attempts: int = 0
    last_order: Optional[np.ndarray] = None
    last_losses: Dict[str, float] = field(default_factory=dict)
    last_elbo: float = float("nan")
    label_maps: List[Dict[int, int]] = field(default_factory=list)


def init_state(input_dim: int, cfg: ExperimentConfig) -> TrainState:
    """Fresh network and a single-cluster prior model, all drawn from cfg.seed."""
    vae_cfg = cfg.vae
    if vae_cfg.input_dim is None:
        vae_cfg = vae_cfg.model_copy(update={"input_dim": input_dim})
    elif vae_cfg.input_dim != input_dim:
        raise ConfigError(f"vae.input_dim={vae_cfg.input_dim} but the dataset has {input_dim} columns")

    prior = cfg.prior.to_prior(vae_cfg.latent_dim)
    if prior.a0 <= 1.0:
        # soft KL needs finite cluster variances: Gamma shape nu / 2 > 1
        raise ConfigError(f"prior.nu={prior.nu} must be > 2 when training the VAE")

    rng = np.random.default_rng(cfg.seed)
    params = init_params(vae_cfg, rng)
    model = init_model(prior)
    return TrainState(epoch=0, params=params, model=model, buffer=LatentBuffer(vae_cfg.latent_dim), rng=rng)


# -----------------------------
#  VAE epoch
# -----------------------------
def run_epoch(state: TrainState, dataset: Dataset, cfg: ExperimentConfig) -> TrainState:
    """
    One pass over shuffled mini-batches; every latent draw goes to the buffer.

    The permutation used is kept in state.last_order.
    """
    if len(dataset) == 0:
        raise ContractError("run_epoch needs a non-empty dataset")
    vae_cfg = state.params.config
    B = vae_cfg.batch_size
    order = state.rng.permutation(len(dataset))
    state.last_order = order

    totals = {"total": 0.0, "recon": 0.0, "kl": 0.0}
    for start in range(0, len(order), B):
        rows = order[start:start + B]
        step = train_step(dataset.features[rows], state.model, state.params, vae_cfg, state.rng)
        state.params = step.params
        state.buffer.append(step.z, dataset.indices[rows])
        for key in totals:
            totals[key] += getattr(step.loss, key) * rows.size

    state.last_losses = {key: value / len(order) for key, value in totals.items()}
    state.epoch += 1
    return state


# -----------------------------
#  DPMM update
# -----------------------------
def update_dpmm(state: TrainState, T: int, cfg: ExperimentConfig) -> Tuple[TrainState, List[MoveRecord]]:
    """
    Warm-started DPMM refit on the buffered latents, then clear the buffer.

    Returns:
        (TrainState, list): the updated state and the move records of this update.
    """
    z = state.buffer.rows
    records: List[MoveRecord] = []
    if z.shape[0] == 0:
        logger.warning("Latent buffer is empty; DPMM left unchanged")
    else:
        result = run_update(state.model, z, T, cfg.moves, state.rng, n_batches=cfg.memo_batches,
                            birth_attempts=state.birth_attempts, epoch=state.epoch)
        state.model = result.model
        state.birth_attempts = result.birth_attempts
        if result.elbo_trace:
            state.last_elbo = result.elbo_trace[-1]
        records = result.records
        state.move_log.extend(records)
        born = sum(1 for r in records if r.accepted and r.kind == "birth")
        merged = sum(1 for r in records if r.accepted and r.kind == "merge")
        if born or merged:
            logger.info("DPMM update: %d birth(s), %d merge(s) accepted, K=%d", born, merged, state.model.K)
    state.buffer.clear()
    return state, records


# -----------------------------
#  Evaluation
# -----------------------------
def embed(params: VaeParams, features) -> np.ndarray:
    """Encoder means for every row (no sampling)."""
    mu, _ = encode(np.asarray(features, dtype=float), params)
    return mu


def evaluate(state: TrainState, dataset: Dataset) -> Tuple[Optional[float], Dict[int, int]]:
    """ACC of the DPMM hard assignments of encoder means, plus the cluster-to-label map."""
    if dataset.labels is None or len(dataset) == 0:
        return None, {}
    assignments = predict(embed(state.params, dataset.features), state.model)
    la = LabeledAssignment(assignments, dataset.labels)
    return clustering_accuracy(la), cluster_label_map(la)


# -----------------------------
#  Run artefacts
# -----------------------------
class RunWriter:
    """Metrics CSV, move log, checkpoints and the final report of one run directory."""

    def __init__(self, output_dir):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.metrics_path = self.output_dir / "metrics.csv"
        self.moves_path = self.output_dir / "moves.jsonl"
        pd.DataFrame(columns=METRIC_COLUMNS).to_csv(self.metrics_path, index=False)
        self.moves_path.write_text("", encoding="utf-8")

    def write_epoch(self, record: dict, moves: List[MoveRecord]) -> None:
        row = {k: record.get(k) for k in METRIC_COLUMNS}
        if row["elbo"] is not None and math.isnan(row["elbo"]):
            row["elbo"] = None
        pd.DataFrame([row], columns=METRIC_COLUMNS).to_csv(self.metrics_path, mode="a", header=False, index=False)
        MoveLog(moves).write_jsonl(self.moves_path)

    def checkpoint(self, state: TrainState, tag: Optional[str] = None) -> Path:
        target = self.output_dir if tag is None else self.output_dir / "checkpoints" / tag
        save_model(state.model, target / "dpmm.json")
        save_params(state.params, target / "vae.json")
        return target

    def write_report(self, report: dict) -> Path:
        path = self.output_dir / "report.json"
        path.write_text(json.dumps(report, indent=2), encoding="utf-8")
        logger.info("Wrote report to %s", path)
        return path


# -----------------------------
#  Full loop
# -----------------------------
def train(dataset: Dataset, cfg: ExperimentConfig, test_dataset: Optional[Dataset] = None,
          writer: Optional[RunWriter] = None) -> Tuple[TrainState, List[dict]]:
    """
    Alternate VAE epochs and DPMM updates for cfg.max_epochs epochs.

    Args:
        dataset (Dataset): training rows (labels optional unless a schedule is set).
        cfg (ExperimentConfig): validated run configuration.
        test_dataset (Dataset | None): held-out rows used for ACC and kNN.
        writer (RunWriter | None): where metrics, moves and checkpoints go.

    Returns:
        (TrainState, list): final state and one metrics record per epoch.
    """
    base = select_classes(dataset, cfg.classes)
    test_base = select_classes(test_dataset, cfg.classes) if test_dataset is not None else None
    if cfg.schedule is not None and base.labels is None:
        raise ContractError("an incremental schedule needs labelled data")
    if len(base) == 0:
        raise ContractError("no training rows left after class filtering")

    state = init_state(base.input_dim, cfg)
    history: List[dict] = []
    active = None

    epochs = tqdm(range(cfg.max_epochs), desc="DIVA", unit="epoch", disable=cfg.quiet)
    for epoch in epochs:
        started = time.perf_counter()
        view = apply_schedule(base, cfg.schedule, epoch)
        if view.class_ids != active:
            active = view.class_ids
            if cfg.schedule is not None:
                logger.info("Epoch %d: training on classes %s (%d rows)", epoch, active, len(view))

        state = run_epoch(state, view, cfg)
        state, moves = update_dpmm(state, cfg.dpmm_steps, cfg)

        eval_view = view if test_base is None else apply_schedule(test_base, cfg.schedule, epoch)
        acc, label_map = evaluate(state, eval_view)
        state.label_maps.append(label_map)

        record = {
            "epoch": epoch,
            "K": state.model.K,
            "elbo": state.last_elbo,
            "recon_loss": state.last_losses["recon"],
            "kl_loss": state.last_losses["kl"],
            "acc": acc,
            "seconds": time.perf_counter() - started if cfg.log_wall_clock else 0.0,
        }
        history.append(record)
        epochs.set_postfix(K=state.model.K, acc="-" if acc is None else f"{acc:.3f}")
        logger.debug("Epoch %d: %s", epoch, record)

        if writer is not None:
            writer.write_epoch(record, moves)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                writer.checkpoint(state, tag=f"epoch_{epoch + 1:04d}")

    if writer is not None:
        writer.checkpoint(state)
        writer.write_report(build_report(state, history, base, test_base, cfg))
    return state, history


def build_report(state: TrainState, history: List[dict], train_set: Dataset, test_set: Optional[Dataset],
                 cfg: ExperimentConfig) -> dict:
    """Final K, ACC and (with labelled train and test splits) kNN errors on encoder means."""
    report = {
        "epochs": len(history),
        "final_K": state.model.K,
        "component_ids": list(state.model.component_ids),
        "acc": history[-1]["acc"] if history else None,
        "accepted_births": len(state.move_log.accepted("birth")),
        "accepted_merges": len(state.move_log.accepted("merge")),
        "knn_error": {},
    }
    if history and test_set is not None and train_set.labels is not None and test_set.labels is not None:
        train_view = apply_schedule(train_set, cfg.schedule, history[-1]["epoch"])
        test_view = apply_schedule(test_set, cfg.schedule, history[-1]["epoch"])
        train_z = embed(state.params, train_view.features)
        test_z = embed(state.params, test_view.features)
        for k in cfg.knn_k:
            if k <= len(train_view):
                report["knn_error"][str(k)] = knn_error(train_z, train_view.labels, test_z, test_view.labels, k)
    return report
