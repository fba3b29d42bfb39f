import json

import numpy as np
import pytest

from diva.config import MoveConfig
from diva.dpmm import (
    DpmmPrior,
    _prior_model,
    elbo,
    expected_log_lik,
    global_step,
    init_model,
    local_step,
    predict,
    summarize,
)
from diva.errors import ContractError
from diva.moves import (
    MoveLog,
    MoveRecord,
    birth_move,
    collect_poor_fits,
    merge_candidates,
    merge_move,
    permute_model,
    select_birth_target,
    shuffle_move,
    shuffle_order,
)
from tests.conftest import fitted, unequal_blobs


# -----------------------------
#  Poor fits and targets
# -----------------------------
def test_confident_rows_are_not_poor_fits():
    x = np.zeros((200, 2))
    resp = np.tile([0.99, 0.01], (200, 1))
    assert collect_poor_fits(x, resp, MoveConfig()).shape[0] == 0


def test_all_rows_poorly_fit():
    x = np.arange(400, dtype=float).reshape(200, 2)
    resp = np.tile([0.3, 0.3, 0.2, 0.2], (200, 1))
    out = collect_poor_fits(x, resp, MoveConfig(min_atoms_new_comp=80, poor_fit_threshold=0.5))
    assert np.array_equal(out, x)


def test_poor_fits_match_direct_filter(rng):
    x = rng.normal(size=(500, 3))
    resp = rng.dirichlet(np.ones(3) * 0.7, size=500)
    out = collect_poor_fits(x, resp, MoveConfig(min_atoms_new_comp=10, max_birth_subsample=10_000))
    assert np.array_equal(out, x[resp.max(axis=1) < 0.5])


def test_too_few_poor_fits_returns_empty():
    x = np.zeros((50, 2))
    resp = np.tile([0.4, 0.3, 0.3], (50, 1))
    assert collect_poor_fits(x, resp, MoveConfig(min_atoms_new_comp=80)).shape == (0, 2)


def test_birth_target_cycles_through_large_clusters(blobs3):
    x, labels = blobs3
    model, _ = fitted(x, 3, hard=labels)
    resp = local_step(x, model).r
    cfg = MoveConfig(max_birth_subsample=50)
    targets = [select_birth_target(x, resp, model, cfg, attempt, np.random.default_rng(0))[1]
               for attempt in range(4)]
    assert targets == [0, 1, 2, 0]
    rows, target = select_birth_target(x, resp, model, cfg, 1, np.random.default_rng(0))
    assert rows.shape == (50, 2)
    assert set(predict(rows, model)) == {target}


def test_birth_target_needs_enough_mass(blobs3):
    x, labels = blobs3
    model, _ = fitted(x, 3, hard=labels)
    rows, target = select_birth_target(x, local_step(x, model).r, model,
                                       MoveConfig(min_atoms_target_comp=10_000), 0, np.random.default_rng(0))
    assert rows.shape[0] == 0 and target is None


# -----------------------------
#  Birth
# -----------------------------
def test_birth_from_well_fit_cluster_is_rejected():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(600, 2))
    model, stats = fitted(x, 1)
    new_model, record = birth_move(model, x[:300], stats, MoveConfig(), np.random.default_rng(2))
    assert record.kind == "birth"
    assert not record.accepted
    assert new_model is model


def test_birth_for_far_away_blob_is_accepted():
    rng = np.random.default_rng(3)
    home = rng.normal(size=(500, 2))
    far = rng.normal(size=(200, 2)) + np.array([20.0, 0.0])
    model, _ = fitted(home, 1)
    data = np.vstack([home, far])
    full = summarize(data, local_step(data, model))

    new_model, record = birth_move(model, far, full, MoveConfig(), np.random.default_rng(4))
    assert record.accepted
    assert record.elbo_after >= record.elbo_before
    assert new_model.K >= model.K + 1
    assert new_model.component_ids[:model.K] == model.component_ids
    assert list(new_model.component_ids[model.K:]) == record.clusters_involved
    assert new_model.next_id == model.next_id + len(record.clusters_involved)
    assert (predict(far, new_model) >= model.next_id).all()


def test_birth_is_scored_on_the_subsample_only():
    rng = np.random.default_rng(3)
    home = rng.normal(size=(500, 2))
    far = rng.normal(size=(200, 2)) + np.array([20.0, 0.0])
    model, _ = fitted(home, 1)
    data = np.vstack([home, far])
    full = summarize(data, local_step(data, model))

    _, record = birth_move(model, far, full, MoveConfig(), np.random.default_rng(4))
    refit = global_step(model, full)
    sub = summarize(far, local_step(far, model))
    assert record.elbo_before == pytest.approx(elbo(refit, sub), rel=1e-9)
    assert record.elbo_before != pytest.approx(elbo(refit, full), rel=1e-3)


def test_birth_seeds_every_proposal_with_subsample_mass():
    rng = np.random.default_rng(6)
    home = rng.normal(size=(400, 2))
    far = np.vstack([rng.normal(size=(150, 2)) + np.array([20.0, 0.0]),
                     rng.normal(size=(150, 2)) + np.array([0.0, 20.0])])
    data = np.vstack([home, far])
    model, full = fitted(data, 1)

    new_model, record = birth_move(model, far, full, MoveConfig(), np.random.default_rng(0))
    assert record.accepted
    assert new_model.K >= 3
    first, second = set(predict(far[:150], new_model)), set(predict(far[150:], new_model))
    assert len(first) == len(second) == 1 and first != second
    assert first | second <= set(record.clusters_involved)
    assert set(predict(home, new_model)) == {0}


def test_birth_with_empty_subsample_is_a_rejected_no_op():
    model = init_model(DpmmPrior.create(2))
    new_model, record = birth_move(model, np.zeros((0, 2)), None, MoveConfig())
    assert new_model is model
    assert not record.accepted
    assert record.clusters_involved == []


# -----------------------------
#  Merge
# -----------------------------
def test_duplicate_clusters_are_merged():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(400, 2))
    model = _prior_model(DpmmPrior.create(2), K=2, component_ids=(4, 9), next_id=10)
    stats = summarize(x, np.full((400, 2), 0.5))
    model = global_step(model, stats)

    merged, records = merge_move(model, stats)
    assert merged.K == 1
    assert merged.component_ids == (4,)
    accepted = [r for r in records if r.accepted]
    assert len(accepted) == 1 and accepted[0].clusters_involved == [4, 9]
    assert accepted[0].elbo_after >= accepted[0].elbo_before
    assert merged.nw.lambda_hat[0] == pytest.approx(model.prior.lambda_scale + 400.0, abs=1e-9)


def test_separated_clusters_are_not_merged():
    rng = np.random.default_rng(6)
    x = np.vstack([rng.normal(size=(200, 2)) - 10.0, rng.normal(size=(200, 2)) + 10.0])
    model, stats = fitted(x, 2, hard=np.repeat([0, 1], 200))
    merged, records = merge_move(model, stats)
    assert merged is model
    assert records and not any(r.accepted for r in records)


def test_merge_with_one_cluster_is_a_no_op():
    model = init_model(DpmmPrior.create(2))
    merged, records = merge_move(model, summarize(np.zeros((3, 2)), np.ones((3, 1))))
    assert merged is model and records == []


def test_merge_candidates_rank_similar_clusters_first():
    rng = np.random.default_rng(7)
    x = np.vstack([rng.normal(size=(150, 2)) + [10, 0], rng.normal(size=(150, 2)) + [10.5, 0],
                   rng.normal(size=(150, 2)) + [-10, 0]])
    model, stats = fitted(x, 3, hard=np.repeat([0, 1, 2], 150), sweeps=0)
    assert merge_candidates(model, stats)[0] == (0, 1)


# -----------------------------
#  Shuffle
# -----------------------------
def test_shuffle_order_sorts_by_descending_mass():
    stats = summarize(np.zeros((9, 1)), np.eye(3)[[0] + [1] * 5 + [2] * 3])
    assert shuffle_order(stats).tolist() == [1, 2, 0]


def test_shuffle_of_sorted_model_is_identity(blobs3):
    x, labels = blobs3
    order = np.argsort(-np.bincount(labels), kind="stable")
    relabel = np.empty(3, dtype=int)
    relabel[order] = np.arange(3)
    model, stats = fitted(x, 3, hard=relabel[labels], sweeps=0)
    assert shuffle_order(stats).tolist() == [0, 1, 2]
    assert shuffle_move(model, stats).component_ids == model.component_ids


def test_shuffle_is_a_pure_permutation_of_clusters():
    x, labels = unequal_blobs()
    model, stats = fitted(x, 3, hard=labels, sweeps=3)
    shuffled = shuffle_move(model, stats)

    assert shuffled.component_ids == (1, 2, 0)
    for cid in model.component_ids:
        i, j = model.index_of(cid), shuffled.index_of(cid)
        assert shuffled.nw.mu_hat[j] == pytest.approx(model.nw.mu_hat[i], abs=1e-10)
        assert shuffled.nw.a_hat[j] == pytest.approx(model.nw.a_hat[i], abs=1e-10)
        assert shuffled.nw.b_hat[j] == pytest.approx(model.nw.b_hat[i], abs=1e-10)
    assert sorted(zip(model.component_ids, stats.n_hat)) == sorted(
        zip(shuffled.component_ids, stats.permute(shuffle_order(stats)).n_hat))


def test_shuffle_keeps_hard_assignments_by_id():
    x, labels = unequal_blobs()
    model, stats = fitted(x, 3, hard=labels, sweeps=3)
    assert np.array_equal(predict(x, shuffle_move(model, stats)), predict(x, model))


def test_permute_model_rejects_non_permutations():
    model, _ = fitted(np.random.default_rng(0).normal(size=(30, 2)), 3)
    with pytest.raises(ContractError):
        permute_model(model, [0, 1, 1])


# -----------------------------
#  Move log
# -----------------------------
def test_move_log_writes_json_lines(tmp_path):
    log = MoveLog([MoveRecord("merge", -10.0, -9.5, True, [1, 2], epoch=0, step=1)])
    log.append(MoveRecord("birth", -9.5, -9.8, False, []))
    path = tmp_path / "moves.jsonl"
    log.write_jsonl(path)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["kind"] for r in lines] == ["merge", "birth"]
    assert lines[0]["clusters_involved"] == [1, 2]
    assert len(log.accepted()) == 1 and len(log.accepted("birth")) == 0


def test_shuffle_keeps_per_cluster_likelihoods_by_id():
    x, labels = unequal_blobs()
    model, stats = fitted(x, 3, hard=labels, sweeps=3)
    shuffled = shuffle_move(model, stats)
    for row in x[::50]:
        for cid in model.component_ids:
            assert expected_log_lik(row, shuffled, shuffled.index_of(cid)) == pytest.approx(
                expected_log_lik(row, model, model.index_of(cid)), abs=1e-10)
