# dashboard.py  (streamlit run dashboard.py)

from pathlib import Path

import streamlit as st

from diva.reporting import (
    latent_figure,
    load_latent_frame,
    load_metrics,
    load_move_log,
    load_report,
    metrics_figures,
    summarize_moves,
)


# ---------- Streamlit Config ----------
st.set_page_config(page_title="DIVA runs", page_icon="📈", layout="wide")

st.title("📈 DIVA Run Dashboard")
st.caption("Metrics, move log and latent space of one training run")


# ---------- Run selection ----------
with st.sidebar:
    run_dir = Path(st.text_input("Run directory", value="runs/diva"))
    dump_path = st.text_input("Latent dump (optional)", value="")

if not run_dir.exists():
    st.error(f"Run directory not found: {run_dir}")
    st.stop()

metrics = load_metrics(run_dir)
moves = load_move_log(run_dir)
report = load_report(run_dir)
summary = summarize_moves(moves)


# ---------- KPIs ----------
def _accepted(kind):
    row = summary[summary["kind"] == kind]
    return int(row["accepted"].iloc[0]) if not row.empty else 0


k1, k2, k3, k4 = st.columns(4)
k1.metric("Epochs", len(metrics))
k2.metric("Final K", int(metrics["K"].iloc[-1]) if not metrics.empty else 0)
last_acc = metrics["acc"].dropna()
k3.metric("ACC", f"{last_acc.iloc[-1]:.3f}" if not last_acc.empty else "n/a")
k4.metric("Births / Merges", f"{_accepted('birth')} / {_accepted('merge')}")

st.divider()


# ---------- Metrics ----------
if metrics.empty:
    st.info("No metrics yet. Start a run with `python -m diva train-diva --config ...`.")
else:
    st.subheader("Per-epoch metrics")
    st.dataframe(metrics, use_container_width=True, hide_index=True)

    figures = metrics_figures(metrics)
    left, right = st.columns(2)
    for i, fig in enumerate(figures.values()):
        with (left if i % 2 == 0 else right):
            st.plotly_chart(fig, use_container_width=True)

st.divider()


# ---------- Moves ----------
st.subheader("Birth / merge / shuffle proposals")
if moves.empty:
    st.info("No moves logged.")
else:
    st.dataframe(summary, use_container_width=True, hide_index=True)
    with st.expander("Full move log", expanded=False):
        st.dataframe(moves, use_container_width=True, hide_index=True)


# ---------- Report ----------
if report is not None:
    st.subheader("Final report")
    st.json(report)


# ---------- Latent space ----------
if dump_path:
    st.divider()
    st.subheader("Latent space")
    try:
        st.plotly_chart(latent_figure(load_latent_frame(dump_path)), use_container_width=True)
    except Exception as e:
        st.error(f"Failed to load latent dump: {e}")
