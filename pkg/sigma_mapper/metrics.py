"""
Quality metrics for Sigma Mapper
Relative sigma-map error, relative STD error, PSNR, SSIM and the evaluation report container.
"""

import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.ndimage import gaussian_filter

from .config import EPS_M_AGGREGATIONS, EPS_M_THRESHOLD, PIXEL_PEAK, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW
from .core import Raster, SigmaMap
from .errors import DegenerateInputError, DimensionError, ParameterError

AGGREGATIONS = EPS_M_AGGREGATIONS


def map_error_norms(estimate: SigmaMap, truth: SigmaMap) -> Tuple[float, float]:
    """(||M_e - M_t||_F, ||M_t||_F) for one pair"""
    if estimate.shape != truth.shape:
        raise DimensionError(f"Shape mismatch: {estimate.shape} vs {truth.shape}")
    return float(np.linalg.norm(estimate.data - truth.data)), float(np.linalg.norm(truth.data))


def relative_map_error(estimates: Sequence[SigmaMap], truths: Sequence[SigmaMap],
                       aggregation: str = "per_image") -> float:
    """eps_m over n (estimate, truth) pairs

    per_image: mean over pairs of ||M_e - M_t||_F / ||M_t||_F.
    concatenated: ||all differences||_F / ||all truths||_F (sensitivity check).
    """
    if len(estimates) != len(truths) or not truths:
        raise DimensionError(f"Need equal, non-zero numbers of maps, got {len(estimates)} and {len(truths)}")
    if aggregation not in AGGREGATIONS:
        raise ParameterError(f"aggregation must be one of {AGGREGATIONS}")
    diff_sq, truth_sq, ratios = 0.0, 0.0, []
    for est, truth in zip(estimates, truths):
        d, t = map_error_norms(est, truth)
        if aggregation == "per_image" and t == 0:
            raise DegenerateInputError("Ground-truth map has zero norm")
        diff_sq += d * d
        truth_sq += t * t
        if aggregation == "per_image":
            ratios.append(d / t)
    if aggregation == "concatenated":
        if truth_sq == 0:
            raise DegenerateInputError("Ground-truth maps have zero norm")
        return math.sqrt(diff_sq) / math.sqrt(truth_sq)
    return float(np.mean(ratios))


def relative_std_error(estimates: Sequence[float], sigma_true: float) -> float:
    """eps = ||sigma_e - sigma_t||_2 / (n * sigma_t)"""
    if not sigma_true > 0:
        raise ParameterError(f"sigma_true must be positive, got {sigma_true}")
    values = np.asarray(estimates, dtype=np.float64)
    if values.size == 0:
        raise ParameterError("Need at least one estimate")
    return float(np.linalg.norm(values - sigma_true) / (values.size * sigma_true))


def _pair(reference: Raster, test: Raster):
    if reference.data.shape != test.data.shape:
        raise DimensionError(f"Shape mismatch: {reference.data.shape} vs {test.data.shape}")
    return reference.data, test.data


def psnr(reference: Raster, test: Raster) -> float:
    """10 log10(255^2 / MSE) in dB; identical images give math.inf"""
    a, b = _pair(reference, test)
    diff = a - b
    mse = float(np.mean(diff * diff))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(PIXEL_PEAK * PIXEL_PEAK / mse)


def _ssim_channel(x: np.ndarray, y: np.ndarray) -> float:
    radius = SSIM_WINDOW // 2
    truncate = radius / SSIM_SIGMA  # 11x11 support

    def blur(a):
        return gaussian_filter(a, SSIM_SIGMA, truncate=truncate, mode="reflect")

    c1 = (SSIM_K1 * PIXEL_PEAK) ** 2
    c2 = (SSIM_K2 * PIXEL_PEAK) ** 2
    mu_x, mu_y = blur(x), blur(y)
    sigma_xx = blur(x * x) - mu_x * mu_x
    sigma_yy = blur(y * y) - mu_y * mu_y
    sigma_xy = blur(x * y) - mu_x * mu_y
    numerator = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_xx + sigma_yy + c2)
    ssim_map = numerator / denominator
    # keep window positions that lie fully inside the image
    return float(ssim_map[radius:-radius, radius:-radius].mean())


def ssim(reference: Raster, test: Raster) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5, K1 0.01, K2 0.03, L 255); channels averaged"""
    a, b = _pair(reference, test)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise DimensionError(f"Images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    return float(np.mean([_ssim_channel(a[:, :, c], b[:, :, c]) for c in range(a.shape[2])]))


def check_threshold(eps_m: float, threshold: float = EPS_M_THRESHOLD) -> bool:
    """True when eps_m is strictly below the usability threshold"""
    return eps_m < threshold


@dataclass
class EvalRecord:
    image_id: str
    method: str
    sigma: float                 # sigma_av (maps) or sigma_t (AWGN)
    sigma_kind: str = "sigma_av"
    model: str = ""
    clip: bool = False
    map_source: str = ""
    eps_m: float = float("nan")
    map_err_norm: float = float("nan")     # ||M_e - M_t||_F, for the concatenated eps_m
    map_truth_norm: float = float("nan")
    sigma_est: float = float("nan")
    eps: float = float("nan")
    psnr: float = float("nan")
    ssim: float = float("nan")
    within_threshold: Optional[bool] = None


GROUP_KEYS = ["method", "map_source", "sigma_kind", "sigma", "clip"]
RECORD_COLUMNS = [f.name for f in fields(EvalRecord)]


def pooled_map_error(frame: pd.DataFrame, aggregation: str = "per_image") -> float:
    """eps_m of a group of records: mean of per-image eps_m, or the norm ratio of the stacked maps"""
    if aggregation not in AGGREGATIONS:
        raise ParameterError(f"aggregation must be one of {AGGREGATIONS}")
    if aggregation == "per_image":
        return float(frame["eps_m"].mean())
    rows = frame[frame["map_truth_norm"].notna()]
    truth_sq = float((rows["map_truth_norm"] ** 2).sum())
    if rows.empty or truth_sq == 0:
        return float("nan")
    return math.sqrt(float((rows["map_err_norm"] ** 2).sum()) / truth_sq)


@dataclass
class EvalReport:
    """Per-item records plus aggregates grouped by method / map source / sigma / clip"""

    records: List[EvalRecord]
    aggregation: str = "per_image"

    def to_frame(self) -> pd.DataFrame:
        if not self.records:
            return pd.DataFrame(columns=RECORD_COLUMNS)
        return pd.DataFrame([asdict(r) for r in self.records], columns=RECORD_COLUMNS)

    def aggregate(self) -> pd.DataFrame:
        """eps_m, mean PSNR and SSIM per group; eps recomputed on the group's estimates"""
        frame = self.to_frame()
        if frame.empty:
            return pd.DataFrame(columns=GROUP_KEYS + ["n", "eps_m", "eps", "psnr", "ssim", "within_threshold"])
        rows = []
        for key, group in frame.groupby(GROUP_KEYS, sort=True, dropna=False):
            row: Dict = dict(zip(GROUP_KEYS, key))
            row["n"] = len(group)
            row["eps_m"] = pooled_map_error(group, self.aggregation)
            estimates = group["sigma_est"].dropna()
            if row["sigma_kind"] == "sigma_t" and len(estimates):
                row["eps"] = relative_std_error(estimates.to_numpy(), float(row["sigma"]))
            else:
                row["eps"] = float("nan")
            row["psnr"] = group["psnr"].replace(math.inf, np.nan).mean()
            row["ssim"] = group["ssim"].mean()
            row["within_threshold"] = check_threshold(row["eps_m"]) if not math.isnan(row["eps_m"]) else None
            rows.append(row)
        return pd.DataFrame(rows)

    def to_csv(self, path: str):
        """Header row, one record per line, aggregates in a trailing '#' block"""
        frame = self.to_frame()
        aggregate = self.aggregate()
        with open(path, "w", encoding="utf-8", newline="") as f:
            frame.to_csv(f, index=False, float_format="%.10g", lineterminator="\n")
            f.write(f"# aggregates ({self.aggregation} eps_m)\n")
            for line in aggregate.to_csv(index=False, float_format="%.10g", lineterminator="\n").splitlines():
                f.write(f"# {line}\n")

    @staticmethod
    def read_csv(path: str) -> pd.DataFrame:
        """Per-item records of a report file (aggregate block skipped)"""
        return pd.read_csv(path, comment="#")
