"""
Report processing module for Sigma Mapper
Loads EvalReport CSVs and pivots them into sigma-by-method tables.
"""

import os
from typing import Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

from .metrics import EvalReport, check_threshold, pooled_map_error, relative_std_error

ESTIMATION_METHODS = ("cnn", "local_dct", "truth")
DENOISE_METHOD = "dct_denoiser"
NOISY_METHOD = "noisy"

EVAL_REPORT_FILE = "eval_report.csv"
DENOISE_REPORT_FILE = "denoise_report.csv"
LOSS_LOG_FILE = "loss_log.csv"
LOSS_WINDOWS = 10


def load_records(paths: Iterable[str]) -> pd.DataFrame:
    """Concatenate the per-item records of several report files"""
    frames = []
    for path in paths:
        if not os.path.isfile(path):
            raise FileNotFoundError(f"Report not found: {path}")
        frames.append(EvalReport.read_csv(path))
    if not frames:
        return pd.DataFrame()
    frame = pd.concat(frames, ignore_index=True)
    # empty strings come back as NaN
    for column in ("model", "map_source"):
        if column in frame:
            frame[column] = frame[column].fillna("").astype(str)
    return frame


def eps_m_table(frame: pd.DataFrame, aggregation: str = "per_image") -> pd.DataFrame:
    """eps_m per sigma_av (rows) and estimation method (columns), pooled per the aggregation"""
    rows = frame[(frame["sigma_kind"] == "sigma_av") & frame["method"].isin(ESTIMATION_METHODS)]
    if rows.empty:
        return pd.DataFrame()
    cells = [{"sigma": sigma, "method": method, "eps_m": pooled_map_error(group, aggregation)}
             for (sigma, method), group in rows.groupby(["sigma", "method"], sort=True)]
    table = pd.DataFrame(cells).pivot(index="sigma", columns="method", values="eps_m")
    table.index.name = "sigma_av"
    table.columns.name = None
    return table


def threshold_table(frame: pd.DataFrame, aggregation: str = "per_image") -> pd.DataFrame:
    """Whether each eps_m of eps_m_table passes the usability threshold"""
    table = eps_m_table(frame, aggregation)
    return table.apply(lambda column: column.map(lambda v: check_threshold(v) if pd.notna(v) else None))


def _column_label(method: str, clip: bool) -> str:
    return f"{method} (clipped)" if clip else method


def eps_table(frame: pd.DataFrame) -> pd.DataFrame:
    """Relative STD error per sigma_t (rows) and method / clip flag (columns)

    Each cell applies the relative STD error to all global estimates of its group.
    """
    rows = frame[(frame["sigma_kind"] == "sigma_t") & frame["sigma_est"].notna()]
    if rows.empty:
        return pd.DataFrame()
    cells = []
    for (sigma, method, clip), group in rows.groupby(["sigma", "method", "clip"], sort=True):
        cells.append({
            "sigma_t": sigma,
            "column": _column_label(method, bool(clip)),
            "eps": relative_std_error(group["sigma_est"].to_numpy(dtype=np.float64), float(sigma)),
        })
    table = pd.DataFrame(cells).pivot(index="sigma_t", columns="column", values="eps")
    table.columns.name = None
    return table


def denoise_table(frame: pd.DataFrame, metric: str = "psnr") -> pd.DataFrame:
    """Mean PSNR or SSIM per sigma_av for the noisy input and each map source"""
    rows = frame[frame["method"].isin((DENOISE_METHOD, NOISY_METHOD))].copy()
    if rows.empty:
        return pd.DataFrame()
    rows["source"] = np.where(rows["method"] == NOISY_METHOD, NOISY_METHOD, rows["map_source"])
    rows[metric] = rows[metric].replace(np.inf, np.nan)
    table = rows.pivot_table(index="sigma", columns="source", values=metric, aggfunc="mean")
    table.index.name = "sigma_av"
    table.columns.name = None
    return table


def load_loss_log(path: str) -> pd.DataFrame:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Loss log not found: {path}")
    return pd.read_csv(path)


def loss_table(loss_log: pd.DataFrame, windows: int = LOSS_WINDOWS) -> pd.DataFrame:
    """Mean training loss and last learning rate over equal iteration windows"""
    if loss_log.empty:
        return pd.DataFrame()
    windows = max(1, min(windows, len(loss_log)))
    window = np.arange(len(loss_log)) * windows // len(loss_log)
    table = loss_log.groupby(window).agg(first=("iteration", "min"), last=("iteration", "max"),
                                         lr=("lr", "last"), loss=("loss", "mean"))
    table.index.name = "window"
    return table


def build_tables(frame: pd.DataFrame, aggregation: str = "per_image",
                 loss_log: Optional[pd.DataFrame] = None) -> Dict[str, pd.DataFrame]:
    """Every non-empty pivot of a record frame (plus the loss curve when given), keyed by table name"""
    tables = {"loss": loss_table(loss_log)} if loss_log is not None else {}
    if frame.empty:
        return {name: table for name, table in tables.items() if not table.empty}
    tables.update({
        "eps_m": eps_m_table(frame, aggregation),
        "threshold": threshold_table(frame, aggregation),
        "eps": eps_table(frame),
        "psnr": denoise_table(frame, "psnr"),
        "ssim": denoise_table(frame, "ssim"),
    })
    return {name: table for name, table in tables.items() if not table.empty}


def default_report_paths(out_dir: str) -> List[str]:
    """Report files a run directory holds"""
    candidates = [os.path.join(out_dir, name) for name in (EVAL_REPORT_FILE, DENOISE_REPORT_FILE)]
    return [path for path in candidates if os.path.isfile(path)]
