"""Memoized online variational Bayes over a fixed set of data batches.

Each batch keeps the statistics of its last local step; the global step
always sees the sum over all batches, so one lap over the batches gives
exactly the full-data update.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from diva.config import MoveConfig
from diva.dpmm import (
    DpmmModel,
    DpmmPrior,
    SufficientStats,
    elbo,
    global_step,
    init_model,
    local_step,
    predict,
    summarize,
)
from diva.metrics import LabeledAssignment, clustering_accuracy
from diva.moves import (
    MoveLog,
    MoveRecord,
    birth_move,
    collect_poor_fits,
    merge_move,
    select_birth_target,
    shuffle_move,
)

logger = logging.getLogger(__name__)


# -----------------------------
#  Batch bookkeeping
# -----------------------------
@dataclass
class MemoState:
    """Per-batch statistics plus their running total."""
    batches: List[np.ndarray]
    memo: List[SufficientStats]
    total: SufficientStats
    resps: List[np.ndarray]


def split_batches(data: np.ndarray, n_batches: int) -> List[np.ndarray]:
    """Contiguous, nearly equal batches (never more batches than rows)."""
    n = max(1, min(int(n_batches), data.shape[0]))
    return [b for b in np.array_split(data, n) if b.shape[0] > 0]


def _total(memo: List[SufficientStats]) -> SufficientStats:
    total = memo[0]
    for s in memo[1:]:
        total = total + s
    return total


def refresh(model: DpmmModel, batches: List[np.ndarray]):
    """
    Full-batch lap: local step on every batch with one fixed model, then a
    single global step on the summed statistics.
    """
    resps = [local_step(b, model).r for b in batches]
    memo = [summarize(b, r) for b, r in zip(batches, resps)]
    total = _total(memo)
    model = global_step(model, total)
    return model, MemoState(batches, memo, total, resps)


def sweep(model: DpmmModel, state: MemoState):
    """Memoized lap: replace one batch summary at a time, global step after each."""
    for i, b in enumerate(state.batches):
        r = local_step(b, model).r
        state.resps[i] = r
        state.memo[i] = summarize(b, r)
        state.total = _total(state.memo)
        model = global_step(model, state.total)
    return model, state


# -----------------------------
#  One DPMM update block
# -----------------------------
@dataclass
class UpdateResult:
    model: DpmmModel
    records: List[MoveRecord] = field(default_factory=list)
    elbo_trace: List[float] = field(default_factory=list)
    birth_attempts: int = 0
    stats: Optional[SufficientStats] = None


def run_update(model: DpmmModel, data, steps: int, moves: MoveConfig, rng: np.random.Generator,
               n_batches: int = 1, birth_attempts: int = 0, epoch: Optional[int] = None) -> UpdateResult:
    """
    Run `steps` coordinate-ascent steps with moves on `data`, warm-started from `model`.

    Every step is one lap over the memoized batches (the first lap is a
    full-batch refresh). The first step also tries one birth; every step
    runs merge passes, then an optional shuffle that orders the clusters by
    descending mass.

    Returns:
        UpdateResult: final model, move records and the ELBO after each step.
    """
    data = np.asarray(data, dtype=float)
    result = UpdateResult(model=model, birth_attempts=birth_attempts)
    if data.shape[0] == 0:
        logger.warning("DPMM update skipped: empty buffer")
        return result
    if steps <= 0:
        return result

    batches = split_batches(data, n_batches)
    state = None

    for step in range(steps):
        if step == 0:
            model, state = refresh(model, batches)
        else:
            model, state = sweep(model, state)

        # Birth: poor fits first, otherwise split a large target cluster
        if step == 0 and moves.birth_enabled:
            resp = np.vstack(state.resps)
            subsample = collect_poor_fits(data, resp, moves)
            target = None
            if subsample.shape[0] == 0:
                subsample, target = select_birth_target(data, resp, model, moves, result.birth_attempts, rng)
            result.birth_attempts += 1
            if subsample.shape[0] >= moves.min_atoms_new_comp:
                model, record = birth_move(model, subsample, state.total, moves, rng)
                if target is not None:
                    record.clusters_involved = [target] + record.clusters_involved
                _stamp(record, epoch, step)
                result.records.append(record)
                if record.accepted:
                    model, state = refresh(model, batches)

        if moves.merge_enabled and model.K >= 2:
            model, merge_records = merge_move(model, state.total)
            for record in merge_records:
                _stamp(record, epoch, step)
            result.records.extend(merge_records)
            if any(r.accepted for r in merge_records):
                model, state = refresh(model, batches)

        if moves.shuffle_enabled and model.K >= 2:
            before = elbo(model, state.total)
            model = shuffle_move(model, state.total)
            model, state = refresh(model, batches)
            after = elbo(model, state.total)
            ids = list(model.component_ids)
            result.records.append(_stamp(MoveRecord("shuffle", before, after, True, ids), epoch, step))

        result.elbo_trace.append(elbo(model, state.total))

    result.model = model
    result.stats = state.total
    return result


def _stamp(record: MoveRecord, epoch, step) -> MoveRecord:
    record.epoch = epoch
    record.step = step
    return record


# -----------------------------
#  DPMM-only fitting
# -----------------------------
@dataclass
class FitResult:
    model: DpmmModel
    history: List[dict]
    move_log: MoveLog


def fit_dpmm(data, prior: DpmmPrior, moves: MoveConfig, epochs: int, steps: int, rng: np.random.Generator,
             n_batches: int = 1, labels=None, model: Optional[DpmmModel] = None,
             log_wall_clock: bool = True,
             on_epoch: Optional[Callable[[dict, List[MoveRecord]], None]] = None) -> FitResult:
    """
    Fit a DP mixture directly to feature vectors.

    Args:
        data (np.ndarray): N x D features.
        prior (DpmmPrior): prior hyperparameters.
        moves (MoveConfig): move settings.
        epochs (int): number of update blocks.
        steps (int): coordinate-ascent steps per block.
        rng (np.random.Generator): the run's random stream.
        n_batches (int): memoized batches per lap.
        labels (np.ndarray | None): ground truth, for the ACC column.
        model (DpmmModel | None): warm start; a fresh K=1 model otherwise.
        on_epoch (callable | None): receives each metrics record and its move records.

    Returns:
        FitResult: final model, per-epoch metrics and the move log.
    """
    data = np.asarray(data, dtype=float)
    model = model if model is not None else init_model(prior)
    history: List[dict] = []
    move_log = MoveLog()
    attempts = 0

    for epoch in range(epochs):
        started = time.perf_counter()
        result = run_update(model, data, steps, moves, rng, n_batches=n_batches,
                            birth_attempts=attempts, epoch=epoch)
        model, attempts = result.model, result.birth_attempts
        move_log.extend(result.records)

        acc = None
        if labels is not None:
            acc = clustering_accuracy(LabeledAssignment(predict(data, model), labels))
        record = {
            "epoch": epoch,
            "K": model.K,
            "elbo": result.elbo_trace[-1] if result.elbo_trace else float("nan"),
            "recon_loss": None,
            "kl_loss": None,
            "acc": acc,
            "seconds": time.perf_counter() - started if log_wall_clock else 0.0,
        }
        history.append(record)
        logger.info("Epoch %d: K=%d ELBO=%.4f%s", epoch, model.K, record["elbo"],
                    "" if acc is None else f" ACC={acc:.4f}")
        if on_epoch is not None:
            on_epoch(record, result.records)

    return FitResult(model=model, history=history, move_log=move_log)
