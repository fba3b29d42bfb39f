import numpy as np
import pandas as pd
import pytest

from diva.datasets import write_latent_dump
from diva.errors import ShapeError
from diva.moves import MoveLog, MoveRecord
from diva.reporting import (
    latent_figure,
    load_latent_frame,
    load_metrics,
    load_move_log,
    load_report,
    metrics_figures,
    summarize_moves,
)
from diva.training import RunWriter


@pytest.fixture
def run_dir(tmp_path):
    writer = RunWriter(tmp_path)
    writer.write_epoch(
        {"epoch": 0, "K": 1, "elbo": -50.0, "recon_loss": 0.4, "kl_loss": 2.0, "acc": 0.5, "seconds": 0.0},
        [MoveRecord("birth", -60.0, -50.0, True, [1], epoch=0, step=0),
         MoveRecord("merge", -50.0, -51.0, False, [0, 1], epoch=0, step=0)],
    )
    writer.write_epoch(
        {"epoch": 1, "K": 2, "elbo": float("nan"), "recon_loss": 0.3, "kl_loss": 1.5, "acc": 0.8, "seconds": 0.0},
        [MoveRecord("merge", -48.0, -47.0, True, [0, 1], epoch=1, step=0)],
    )
    writer.write_report({"final_K": 2})
    return tmp_path


def test_metrics_round_trip_through_the_writer(run_dir):
    metrics = load_metrics(run_dir)
    assert metrics["K"].tolist() == [1, 2]
    assert np.isnan(metrics["elbo"].iloc[1])


def test_move_summary_counts_by_kind(run_dir):
    summary = summarize_moves(load_move_log(run_dir)).set_index("kind")
    assert summary.loc["birth"].tolist() == [1, 0]
    assert summary.loc["merge"].tolist() == [1, 1]


def test_missing_artefacts_give_empty_tables(tmp_path):
    assert load_metrics(tmp_path).empty
    assert load_move_log(tmp_path).empty
    assert load_report(tmp_path) is None
    assert summarize_moves(load_move_log(tmp_path)).empty
    assert metrics_figures(load_metrics(tmp_path)) == {}


def test_figures_for_each_metric(run_dir):
    figures = metrics_figures(load_metrics(run_dir))
    assert set(figures) == {"K", "acc", "elbo", "losses"}
    assert load_report(run_dir) == {"final_K": 2}


def test_move_log_file_matches_records(tmp_path):
    MoveLog([MoveRecord("shuffle", -1.0, -1.0, True, [2, 0, 1])]).write_jsonl(tmp_path / "moves.jsonl")
    moves = load_move_log(tmp_path)
    assert moves["clusters_involved"].iloc[0] == [2, 0, 1]


def test_latent_figure_from_dump(tmp_path):
    path = write_latent_dump(tmp_path / "z.csv", np.random.default_rng(0).normal(size=(20, 3)),
                             clusters=np.arange(20) % 2)
    frame = load_latent_frame(path)
    assert (frame["label"] == -1).all()
    fig = latent_figure(frame)
    assert len(fig.data) == 2


def test_latent_figure_needs_two_dimensions():
    with pytest.raises(ShapeError):
        latent_figure(pd.DataFrame({"z0": [0.0], "cluster": [0]}))
