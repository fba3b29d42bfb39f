"""Birth, merge and shuffle moves that change the number and order of clusters."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from diva.config import MoveConfig
from diva.dpmm import (
    DpmmModel,
    NormalWishartPosterior,
    StickPosterior,
    SufficientStats,
    _prior_model,
    elbo,
    global_step,
    local_step,
    summarize,
)
from diva.errors import ContractError
from diva.numerics import kmeanspp_centers

logger = logging.getLogger(__name__)


# -----------------------------
#  Move log
# -----------------------------
@dataclass
class MoveRecord:
    """One proposed move and its outcome."""
    kind: str
    elbo_before: float
    elbo_after: float
    accepted: bool
    clusters_involved: List[int] = field(default_factory=list)
    epoch: Optional[int] = None
    step: Optional[int] = None

    def to_dict(self) -> dict:
        return asdict(self)


class MoveLog:
    """Append-only history of move records, written as JSON lines."""

    def __init__(self, records: Optional[Sequence[MoveRecord]] = None):
        self.records: List[MoveRecord] = list(records or [])

    def append(self, record: MoveRecord) -> None:
        self.records.append(record)

    def extend(self, records: Sequence[MoveRecord]) -> None:
        self.records.extend(records)

    def accepted(self, kind: Optional[str] = None) -> List[MoveRecord]:
        return [r for r in self.records if r.accepted and (kind is None or r.kind == kind)]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def write_jsonl(self, path, start: int = 0) -> None:
        """Append records[start:] to a JSON-lines file."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a", encoding="utf-8") as f:
            for record in self.records[start:]:
                f.write(json.dumps(record.to_dict()) + "\n")


# -----------------------------
#  Birth proposals
# -----------------------------
def collect_poor_fits(batch, resp, cfg: MoveConfig) -> np.ndarray:
    """
    Rows that no single cluster explains well.

    Returns:
        np.ndarray: rows whose largest responsibility is below
        cfg.poor_fit_threshold, capped at cfg.max_birth_subsample rows.
        Empty when fewer than cfg.min_atoms_new_comp rows qualify.
    """
    x = np.asarray(batch, dtype=float)
    r = np.asarray(getattr(resp, "r", resp), dtype=float)
    if x.shape[0] == 0:
        return x.reshape(0, x.shape[-1] if x.ndim == 2 else 0)

    poor = x[r.max(axis=1) < cfg.poor_fit_threshold]
    if poor.shape[0] < cfg.min_atoms_new_comp:
        return x[:0]
    return poor[: cfg.max_birth_subsample]


def select_birth_target(batch, resp, model: DpmmModel, cfg: MoveConfig, attempt: int,
                        rng: np.random.Generator) -> Tuple[np.ndarray, Optional[int]]:
    """
    Rows of one sufficiently large cluster, used when no poor fits exist.

    Eligible clusters hold at least cfg.min_atoms_target_comp expected atoms;
    successive attempts cycle through them in identifier order.

    Returns:
        (np.ndarray, int | None): the subsample and the targeted component id.
    """
    x = np.asarray(batch, dtype=float)
    r = np.asarray(getattr(resp, "r", resp), dtype=float)
    if x.shape[0] == 0:
        return x[:0], None

    mass = r.sum(axis=0)
    eligible = sorted(
        (model.component_ids[k], k) for k in range(model.K) if mass[k] >= cfg.min_atoms_target_comp
    )
    if not eligible:
        return x[:0], None

    target_id, k = eligible[attempt % len(eligible)]
    rows = np.flatnonzero(np.argmax(r, axis=1) == k)
    if rows.size > cfg.max_birth_subsample:
        rows = np.sort(rng.choice(rows, size=cfg.max_birth_subsample, replace=False))
    return x[rows], target_id


def fit_fresh_model(subsample, prior, cfg: MoveConfig, rng: np.random.Generator) -> DpmmModel:
    """
    Separate DP mixture fit to the subsample only.

    Starts from fresh_k k-means++ seeded clusters, runs cfg.birth_sweeps
    coordinate-ascent sweeps and then merges redundant clusters.
    """
    x = np.asarray(subsample, dtype=float)
    k = max(1, min(cfg.fresh_k, x.shape[0]))
    centers = kmeanspp_centers(x, k, rng)
    nearest = np.argmin(((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2), axis=1)
    resp = np.eye(k)[nearest]

    model = _prior_model(prior, K=k, component_ids=tuple(range(k)), next_id=k)
    stats = summarize(x, resp)
    model = global_step(model, stats)
    for _ in range(cfg.birth_sweeps):
        stats = summarize(x, local_step(x, model))
        model = global_step(model, stats)

    if model.K > 1:
        model, _ = merge_move(model, stats)
    return model


def _append_clusters(base: DpmmModel, extra: DpmmModel, ids: Sequence[int], next_id: int) -> DpmmModel:
    return DpmmModel(
        prior=base.prior,
        stick=StickPosterior(
            np.concatenate([base.stick.alpha1, extra.stick.alpha1]),
            np.concatenate([base.stick.alpha0, extra.stick.alpha0]),
        ),
        nw=NormalWishartPosterior(
            mu_hat=np.vstack([base.nw.mu_hat, extra.nw.mu_hat]),
            lambda_hat=np.concatenate([base.nw.lambda_hat, extra.nw.lambda_hat]),
            a_hat=np.vstack([base.nw.a_hat, extra.nw.a_hat]),
            b_hat=np.vstack([base.nw.b_hat, extra.nw.b_hat]),
        ),
        component_ids=tuple(base.component_ids) + tuple(ids),
        next_id=next_id,
    )


def _with_ids(model: DpmmModel, ids, next_id) -> DpmmModel:
    return DpmmModel(model.prior, model.stick, model.nw, tuple(ids), next_id)


def birth_move(model: DpmmModel, subsample, full_stats: Optional[SufficientStats], cfg: MoveConfig,
               rng: Optional[np.random.Generator] = None,
               subsample_in_stats: bool = True) -> Tuple[DpmmModel, MoveRecord]:
    """
    Propose new clusters for a subsample and keep them if its ELBO improves.

    Statistics of all data outside the subsample stay fixed at their
    memoized values while the posterior is refitted. The acceptance test
    compares the ELBO of the subsample alone: its assignment to the K
    existing clusters against its assignment to K + K' clusters.

    Args:
        model (DpmmModel): current posterior, fitted to full_stats.
        subsample (np.ndarray): candidate rows.
        full_stats (SufficientStats | None): memoized statistics of all data.
        cfg (MoveConfig): move thresholds.
        rng (np.random.Generator): randomness for seeding the fresh model.
        subsample_in_stats (bool): whether full_stats already includes the subsample.

    Returns:
        (DpmmModel, MoveRecord): the accepted expanded model or the input model.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(subsample, dtype=float).reshape(-1, model.D)
    stats = full_stats if full_stats is not None else SufficientStats.zeros(model.K, model.D)

    if x.shape[0] == 0 or x.shape[0] < cfg.min_atoms_new_comp:
        current = elbo(model, stats)
        logger.debug("Birth skipped: subsample of %d rows is too small", x.shape[0])
        return model, MoveRecord("birth", current, current, False, [])

    # 1/3: score the subsample under the existing clusters
    sub_old = summarize(x, local_step(x, model))
    rest = stats.subtract(sub_old) if subsample_in_stats else stats
    base_model = global_step(model, rest + sub_old)
    before = elbo(base_model, sub_old)

    # 2/3: fit a fresh mixture to the subsample and hand it the subsample's mass
    fresh = fit_fresh_model(x, model.prior, cfg, rng)
    K, K_new = model.K, fresh.K
    provisional = [-(i + 1) for i in range(K_new)]
    expanded = _append_clusters(base_model, fresh, provisional, model.next_id)
    rest_padded = rest.pad(K_new)

    seed_resp = np.hstack([np.zeros((x.shape[0], K)), local_step(x, fresh).r])
    sub_new = summarize(x, seed_resp)
    expanded = global_step(expanded, rest_padded + sub_new)
    for _ in range(max(1, cfg.birth_refine_sweeps)):
        sub_new = summarize(x, local_step(x, expanded))
        expanded = global_step(expanded, rest_padded + sub_new)

    # Drop proposals that do not retain enough mass
    keep_new = [K + i for i in range(K_new) if sub_new.n_hat[K + i] >= cfg.min_atoms_retain_comp]
    if not keep_new:
        logger.debug("Birth rejected: no proposal kept %d atoms", cfg.min_atoms_retain_comp)
        return model, MoveRecord("birth", before, before, False, [])

    if len(keep_new) < K_new:
        expanded = expanded.select(list(range(K)) + keep_new)
        rest_padded = rest.pad(len(keep_new))
        sub_new = summarize(x, local_step(x, expanded))
        expanded = global_step(expanded, rest_padded + sub_new)

    # 3/3: accept on subsample ELBO improvement, minting identifiers for the survivors
    after = elbo(expanded, sub_new)
    new_ids = list(range(model.next_id, model.next_id + len(keep_new)))
    if after > before:
        accepted = _with_ids(expanded, list(model.component_ids) + new_ids, model.next_id + len(new_ids))
        logger.info("Birth accepted: +%d clusters (ELBO %.4f -> %.4f)", len(new_ids), before, after)
        return accepted, MoveRecord("birth", before, after, True, new_ids)

    logger.debug("Birth rejected (ELBO %.4f -> %.4f)", before, after)
    return model, MoveRecord("birth", before, after, False, [])


# -----------------------------
#  Merge proposals
# -----------------------------
def merge_candidates(model: DpmmModel, stats: SufficientStats) -> List[Tuple[int, int]]:
    """
    All cluster pairs (j < k), most promising first.

    Pairs are ranked by the cosine similarity of their posterior means
    (relative to the prior mean) weighted by how similar their masses are.
    Pairs whose merged entropy is unknown are left out.
    """
    centered = model.nw.mu_hat - model.prior.mu0[None, :]
    norms = np.linalg.norm(centered, axis=1)
    mass = np.maximum(stats.n_hat, 0.0)

    scored = []
    for j in range(model.K - 1):
        for k in range(j + 1, model.K):
            if np.isnan(stats.merge_entropy[j, k]):
                continue
            denom = norms[j] * norms[k]
            cosine = float(centered[j] @ centered[k] / denom) if denom > 0 else 0.0
            top = max(mass[j], mass[k])
            overlap = min(mass[j], mass[k]) / top if top > 0 else 1.0
            scored.append((-(cosine * overlap), j, k))
    scored.sort()
    return [(j, k) for _, j, k in scored]


def merge_move(model: DpmmModel, full_stats: SufficientStats) -> Tuple[DpmmModel, List[MoveRecord]]:
    """
    Repeatedly merge the first candidate pair whose merge does not lower the ELBO.

    The surviving cluster keeps the lower position and its identifier; the
    other identifier is retired.

    Returns:
        (DpmmModel, list[MoveRecord]): merged model and the logged decisions.
    """
    records: List[MoveRecord] = []
    if model.K < 2:
        return model, records

    current, stats = model, full_stats
    current_elbo = elbo(current, stats)

    while current.K >= 2:
        merged_any = False
        best_rejected = None
        for j, k in merge_candidates(current, stats):
            merged_stats = stats.merge_pair(j, k)
            keep = [i for i in range(current.K) if i != k]
            candidate = global_step(current.select(keep), merged_stats)
            candidate_elbo = elbo(candidate, merged_stats)
            pair_ids = [current.component_ids[j], current.component_ids[k]]

            if candidate_elbo >= current_elbo:
                records.append(MoveRecord("merge", current_elbo, candidate_elbo, True, pair_ids))
                logger.info("Merge accepted: clusters %s (ELBO %.4f -> %.4f)",
                            pair_ids, current_elbo, candidate_elbo)
                current, stats, current_elbo = candidate, merged_stats, candidate_elbo
                merged_any = True
                break
            if best_rejected is None:
                best_rejected = MoveRecord("merge", current_elbo, candidate_elbo, False, pair_ids)

        if not merged_any:
            if best_rejected is not None:
                records.append(best_rejected)
            break

    return current, records


# -----------------------------
#  Shuffle
# -----------------------------
def permute_model(model: DpmmModel, order: Sequence[int]) -> DpmmModel:
    """Reorder every per-cluster array (and the identifiers) by `order`."""
    order = list(order)
    if sorted(order) != list(range(model.K)):
        raise ContractError(f"{order} is not a permutation of range({model.K})")
    return model.select(order)


def shuffle_order(stats: SufficientStats) -> np.ndarray:
    """Cluster positions sorted by descending expected mass (stable)."""
    return np.argsort(-stats.n_hat, kind="stable")


def shuffle_move(model: DpmmModel, full_stats: SufficientStats) -> DpmmModel:
    """Order clusters by descending mass and refresh the global parameters."""
    order = shuffle_order(full_stats)
    permuted = permute_model(model, order)
    return global_step(permuted, full_stats.permute(order))
