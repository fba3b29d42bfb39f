"""Tables and plotly figures built from a run directory."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Optional

import pandas as pd
import plotly.express as px

from diva.datasets import read_latent_dump
from diva.errors import ShapeError


# -----------------------------
#  Loading run artefacts
# -----------------------------
def load_metrics(run_dir) -> pd.DataFrame:
    path = Path(run_dir) / "metrics.csv"
    if not path.exists():
        return pd.DataFrame(columns=["epoch", "K", "elbo", "recon_loss", "kl_loss", "acc", "seconds"])
    return pd.read_csv(path)


def load_move_log(run_dir) -> pd.DataFrame:
    """One row per move record; clusters_involved kept as a list."""
    path = Path(run_dir) / "moves.jsonl"
    columns = ["kind", "elbo_before", "elbo_after", "accepted", "clusters_involved", "epoch", "step"]
    if not path.exists() or path.stat().st_size == 0:
        return pd.DataFrame(columns=columns)
    return pd.read_json(path, lines=True)


def load_report(run_dir) -> Optional[dict]:
    path = Path(run_dir) / "report.json"
    if not path.exists():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


# -----------------------------
#  Summaries
# -----------------------------
def summarize_moves(moves: pd.DataFrame) -> pd.DataFrame:
    """
    Count proposals per move kind.

    Returns:
        pd.DataFrame: columns kind, accepted, rejected (one row per kind).
    """
    if moves.empty:
        return pd.DataFrame(columns=["kind", "accepted", "rejected"])
    accepted = moves["accepted"].astype(bool)
    summary = (
        moves.assign(accepted=accepted, rejected=~accepted)
        .groupby("kind")[["accepted", "rejected"]]
        .sum()
        .astype(int)
        .reset_index()
    )
    return summary


def metrics_figures(metrics: pd.DataFrame) -> Dict[str, object]:
    """Line charts of K, ACC, ELBO and the two VAE losses per epoch."""
    figures = {}
    if metrics.empty:
        return figures
    figures["K"] = px.line(metrics, x="epoch", y="K", markers=True, title="Active clusters per epoch")
    if metrics["acc"].notna().any():
        figures["acc"] = px.line(metrics, x="epoch", y="acc", markers=True, title="Clustering accuracy")
    if metrics["elbo"].notna().any():
        figures["elbo"] = px.line(metrics, x="epoch", y="elbo", title="DPMM ELBO after each update")
    losses = metrics[["epoch", "recon_loss", "kl_loss"]].dropna(how="all", subset=["recon_loss", "kl_loss"])
    if not losses.empty:
        long = losses.melt(id_vars="epoch", var_name="loss", value_name="value")
        figures["losses"] = px.line(long, x="epoch", y="value", color="loss", title="VAE losses")
    return figures


def latent_figure(dump: pd.DataFrame):
    """Scatter of the first two latent dimensions coloured by cluster."""
    if "z1" not in dump.columns:
        raise ShapeError("latent dump needs at least two latent dimensions")
    frame = dump.assign(cluster=dump["cluster"].astype(str))
    hover = ["label"] if "label" in frame.columns else None
    return px.scatter(frame, x="z0", y="z1", color="cluster", hover_data=hover, opacity=0.6,
                      title="Latent space (first two dimensions)")


def load_latent_frame(path) -> pd.DataFrame:
    z, labels, clusters = read_latent_dump(path)
    frame = pd.DataFrame(z, columns=[f"z{d}" for d in range(z.shape[1])])
    frame["label"] = -1 if labels is None else labels
    frame["cluster"] = -1 if clusters is None else clusters
    return frame
