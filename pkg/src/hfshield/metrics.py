"""Attack, purification and generation metrics, plus the comparison table."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .freq_mask import laplacian_edge
from .image import to_luminance

PSNR_INF = math.inf

REPORT_COLUMNS = (
    "method", "purifier", "n",
    "l1_mean", "l1_std", "linf_mean", "linf_std",
    "retention_mean", "retention_std",
    "psnr_mean", "psnr_std",
    "gen_mse_mean", "gen_mse_std",
    "gen_hf_mean", "gen_hf_std",
)


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    m = mse(a, b)
    return PSNR_INF if m == 0.0 else 10.0 * math.log10(1.0 / m)


def retention_ratio(x, delta, purifier: Callable[[np.ndarray], np.ndarray]) -> float:
    """||P(x + delta) - P(x)||_2 / ||delta||_2."""
    x, delta = _same_shape(x, delta)
    norm = float(np.linalg.norm(delta))
    if norm == 0.0:
        raise ValueError("retention ratio is undefined for a zero perturbation")
    return float(np.linalg.norm(purifier(x + delta) - purifier(x))) / norm


def hf_energy(img) -> float:
    """Mean |4-neighbour Laplacian| of the luminance."""
    img = np.asarray(img, dtype=np.float64)
    lum = to_luminance(img) if img.shape[-1] == 3 else img
    return float(laplacian_edge(lum).mean())


def nearest_mse(samples, references) -> float:
    """Mean over samples of the MSE to the closest reference image."""
    return float(np.mean([min(mse(s, r) for r in references) for s in samples]))


@dataclass
class ConditionResult:
    """Per-identity measurements for one (method, purifier) condition."""

    method: str
    purifier: str
    l1: float = math.nan
    linf: float = math.nan
    retention: float = math.nan
    psnr: float = math.nan
    gen_mse: float = math.nan
    gen_hf: float = math.nan


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: _fmt(row[k]) for k in REPORT_COLUMNS})
        return buf.getvalue()

    def to_table(self) -> str:
        shown = [("method", "method"), ("purifier", "purifier"), ("n", "n"),
                 ("L1", "l1"), ("Linf", "linf"), ("retention", "retention"),
                 ("PSNR", "psnr"), ("gen MSE", "gen_mse"), ("gen HF", "gen_hf")]
        cells = [[h for h, _ in shown]]
        for row in self.rows:
            line = []
            for _, key in shown:
                if key in ("method", "purifier", "n"):
                    line.append(str(row[key]))
                else:
                    line.append(_pm(row[f"{key}_mean"], row[f"{key}_std"]))
            cells.append(line)
        widths = [max(len(r[i]) for r in cells) for i in range(len(shown))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def row(self, method: str, purifier: str) -> dict:
        for r in self.rows:
            if r["method"] == method and r["purifier"] == purifier:
                return r
        raise KeyError((method, purifier))


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf"
    return repr(v)


def _pm(mean: float, std: float) -> str:
    if math.isnan(mean):
        return "-"
    if math.isinf(mean):
        return "inf"
    return f"{mean:.4g} ± {std:.2g}"


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    vals = [v for v in values if not math.isnan(v)]
    if not vals:
        return math.nan, math.nan
    if any(math.isinf(v) for v in vals):
        return math.inf, math.nan
    arr = np.asarray(vals, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def build_report(results: Sequence[ConditionResult]) -> MetricsReport:
    """Aggregate per-identity results into one row per (method, purifier).

    Rows keep first-seen order; stds are population stds over identities.
    """
    if not results:
        raise ValueError("build_report needs at least one result")
    groups: dict[tuple[str, str], list[ConditionResult]] = {}
    for r in results:
        groups.setdefault((r.method, r.purifier), []).append(r)
    rows = []
    for (method, purifier), rs in groups.items():
        row = {"method": method, "purifier": purifier, "n": len(rs)}
        for key in ("l1", "linf", "retention", "psnr", "gen_mse", "gen_hf"):
            row[f"{key}_mean"], row[f"{key}_std"] = _mean_std([getattr(r, key) for r in rs])
        rows.append(row)
    return MetricsReport(rows)
