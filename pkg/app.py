# app.py

import json
import logging
from pathlib import Path

import pandas as pd
import plotly.express as px
import streamlit as st

from utils.io_utils import read_jsonl

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

PAGES = ["Overview", "Statistics", "Trends", "Spectral", "Joining"]


@st.cache_data(ttl=60)
def list_runs(root: str) -> list:
    """Directories under root holding a record.json"""
    base = Path(root)
    if not base.exists():
        return []
    return sorted(str(p.parent) for p in base.rglob("record.json"))


@st.cache_data(ttl=60)
def load_record(run_dir: str) -> dict:
    return json.loads((Path(run_dir) / "record.json").read_text())


@st.cache_data(ttl=60)
def load_reports(run_dir: str) -> pd.DataFrame:
    path = Path(run_dir) / "results.jsonl"
    if not path.exists():
        return pd.DataFrame(columns=["stat", "value", "params"])
    rows = read_jsonl(path)
    return pd.DataFrame([{"stat": r["stat"], "value": r["value"], "params": json.dumps(r["params"], sort_keys=True)} for r in rows])


@st.cache_data(ttl=60)
def load_csv(path: str) -> pd.DataFrame:
    return pd.read_csv(path)


def show_overview_page(run_dir: str, record: dict):
    st.title("Run Overview")
    st.caption(run_dir)

    col1, col2, col3, col4 = st.columns(4)
    with col1:
        st.metric("Reports", len(record.get("reports", [])))
    with col2:
        st.metric("Failures", len(record.get("failures", [])))
    with col3:
        st.metric("Cache hits", record.get("cache_hits", 0))
    with col4:
        st.metric("Joining stages", len(record.get("stages", [])))

    st.write(f"**Config hash:** `{record.get('config_hash', '')}`")
    st.write(f"**Started:** {record.get('started_at', '')}  **Finished:** {record.get('finished_at', '')}")

    if record.get("failures"):
        st.subheader("Failures")
        st.dataframe(pd.DataFrame(record["failures"]), use_container_width=True)

    st.subheader("Artifacts")
    artifacts = record.get("artifacts", {})
    if artifacts:
        st.dataframe(pd.DataFrame(sorted(artifacts.items()), columns=["name", "path"]), use_container_width=True)
    else:
        st.info("This run wrote no artifacts.")


def show_statistics_page(run_dir: str):
    st.title("Statistics")
    reports = load_reports(run_dir)
    if reports.empty:
        st.info("No statistic reports in this run.")
        return
    st.dataframe(reports, use_container_width=True)
    fig = px.bar(reports, x="stat", y="value", title="Reported values")
    st.plotly_chart(fig, use_container_width=True)


def show_trends_page(run_dir: str):
    st.title("Trends")
    plot_files = sorted((Path(run_dir) / "plots").glob("*.csv"))
    if not plot_files:
        st.info("No trend data was emitted for this run.")
        return
    chosen = st.multiselect("Trend files", [p.name for p in plot_files], default=[p.name for p in plot_files[:3]])
    log_x = st.checkbox("Logarithmic x axis", value=True)
    for name in chosen:
        frame = load_csv(str(Path(run_dir) / "plots" / name))
        fig = px.line(frame, x="x", y="y", markers=True, title=name, log_x=log_x and bool((frame["x"] > 0).all()))
        st.plotly_chart(fig, use_container_width=True)


def show_spectral_page(run_dir: str):
    st.title("Spectral View")
    tables = Path(run_dir) / "tables"
    autocorr_files = sorted(tables.glob("autocorr_*.csv"))
    if autocorr_files:
        name = st.selectbox("Autocorrelation table", [p.name for p in autocorr_files])
        frame = load_csv(str(tables / name))
        frame["modulus"] = (frame["re"] ** 2 + frame["im"] ** 2) ** 0.5
        st.plotly_chart(px.line(frame, x="h", y="modulus", title="|gamma(h)|"), use_container_width=True)
    else:
        st.info("No autocorrelation tables in this run.")

    scan = tables / "atom_scan.csv"
    if scan.exists():
        frame = load_csv(str(scan))
        st.plotly_chart(px.line(frame, x="theta", y="mass", title="Atom mass scan"), use_container_width=True)


def show_joining_page(record: dict):
    st.title("Self-Joining Stages")
    stages = record.get("stages", [])
    if not stages:
        st.info("This run has no joining pipeline.")
        return
    frame = pd.DataFrame(stages)
    st.dataframe(frame, use_container_width=True)
    long = frame.melt(id_vars=["stage"], value_vars=["cell_error", "length2_error", "defect_fraction", "outside_fraction"])
    fig = px.line(long, x="stage", y="value", color="variable", markers=True, title="Errors per stage")
    st.plotly_chart(fig, use_container_width=True)
    if not frame["bounds_hold"].all():
        st.warning("At least one stage exceeds its cell or defect bound.")


def main():
    st.set_page_config(page_title="fslab - Furstenberg System Lab", layout="wide")

    if "page" not in st.session_state:
        st.session_state.page = "Overview"

    st.sidebar.title("fslab")
    root = st.sidebar.text_input("Results directory", value="results")
    runs = list_runs(root)
    if not runs:
        st.info(f"No runs found under '{root}'. Run `python main.py run --config experiments/liouville_smoke.toml` first.")
        return
    run_dir = st.sidebar.selectbox("Run", runs)
    st.session_state.page = st.sidebar.radio("Page", PAGES, index=PAGES.index(st.session_state.page))

    try:
        record = load_record(run_dir)
    except (OSError, ValueError) as e:
        logger.error(f"Could not read record for {run_dir}: {e}")
        st.error(f"Could not read the record of {run_dir}: {e}")
        return

    if st.session_state.page == "Overview":
        show_overview_page(run_dir, record)
    elif st.session_state.page == "Statistics":
        show_statistics_page(run_dir)
    elif st.session_state.page == "Trends":
        show_trends_page(run_dir)
    elif st.session_state.page == "Spectral":
        show_spectral_page(run_dir)
    elif st.session_state.page == "Joining":
        show_joining_page(record)
    else:
        show_overview_page(run_dir, record)


if __name__ == "__main__":
    main()
