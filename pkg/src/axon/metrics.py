"""Volume quality metrics (MAE, MSE, PSNR, SSIM) and batch reports.

All metrics operate on [0, 1]-normalized volumes; PSNR uses peak 1. Volumes
produced in [-1, 1] are converted with (v + 1) / 2 before evaluation — that
single convention is exposed as ``to_unit_range``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .voxcore import NORMALIZED_01, NORMALIZED_PM1, Volume, VoxError


def to_unit_range(v: Volume) -> Volume:
    """Map a [-1, 1] volume to [0, 1]; [0, 1] volumes pass through."""
    if v.domain_tag == NORMALIZED_01:
        return v
    if v.domain_tag == NORMALIZED_PM1:
        return Volume(v.dims, v.spacing, (v.data + 1.0) / 2.0, NORMALIZED_01)
    raise VoxError(f"cannot convert {v.domain_tag} volume to unit range")


def _check_pair(a: Volume, b: Volume):
    if a.dims != b.dims:
        raise VoxError(f"dims mismatch {a.dims} vs {b.dims}")
    if a.domain_tag != NORMALIZED_01 or b.domain_tag != NORMALIZED_01:
        raise VoxError("metrics require NORMALIZED_01 volumes")


def mae(a: Volume, b: Volume) -> float:
    _check_pair(a, b)
    return float(np.mean(np.abs(a.data - b.data)))


def mse(a: Volume, b: Volume) -> float:
    _check_pair(a, b)
    d = a.data - b.data
    return float(np.mean(d * d))


def psnr(a: Volume, b: Volume) -> float:
    """10*log10(1/mse) in dB; identical volumes report +inf."""
    m = mse(a, b)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / m)


def _box_sums(x: np.ndarray, window: int) -> np.ndarray:
    """Sums over all window^3 boxes via an integral volume; output covers
    every valid window position."""
    pad = np.zeros(tuple(n + 1 for n in x.shape), dtype=np.float64)
    pad[1:, 1:, 1:] = x
    c = pad.cumsum(axis=0).cumsum(axis=1).cumsum(axis=2)
    w = window
    return (
        c[w:, w:, w:]
        - c[:-w, w:, w:] - c[w:, :-w, w:] - c[w:, w:, :-w]
        + c[:-w, :-w, w:] + c[:-w, w:, :-w] + c[w:, :-w, :-w]
        - c[:-w, :-w, :-w]
    )


def ssim3d(a: Volume, b: Volume, window: int = 7, k1: float = 0.01,
           k2: float = 0.03, L: float = 1.0) -> float:
    """Mean SSIM over all valid window^3 boxes, uniform weights."""
    _check_pair(a, b)
    if any(n < window for n in a.dims):
        raise VoxError(f"volume dims {a.dims} smaller than window {window}")
    x = a.data
    y = b.data
    n = float(window**3)
    mu_x = _box_sums(x, window) / n
    mu_y = _box_sums(y, window) / n
    # population (biased) window statistics
    var_x = _box_sums(x * x, window) / n - mu_x * mu_x
    var_y = _box_sums(y * y, window) / n - mu_y * mu_y
    cov = _box_sums(x * y, window) / n - mu_x * mu_y
    c1 = (k1 * L) ** 2
    c2 = (k2 * L) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    ids: list[str]
    per_sample: list[tuple[float, float, float, float]]  # (mae, mse, psnr, ssim)

    def _column(self, i: int) -> np.ndarray:
        return np.array([row[i] for row in self.per_sample], dtype=np.float64)

    def mean_std(self, metric: str) -> tuple[float, float]:
        col = self._column(("mae", "mse", "psnr", "ssim").index(metric))
        return float(col.mean()), float(col.std())  # population std

    def to_json_lines(self) -> str:
        lines = []
        for sid, (a, m, p, s) in zip(self.ids, self.per_sample):
            lines.append(json.dumps(
                {"id": sid, "mae": a, "mse": m, "psnr": p, "ssim": s}))
        summary = {"summary": True}
        for name in ("mae", "mse", "psnr", "ssim"):
            mean, std = self.mean_std(name)
            summary[f"{name}_mean"] = mean
            summary[f"{name}_std"] = std
        lines.append(json.dumps(summary))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_json_lines(text: str) -> "MetricReport":
        ids = []
        rows = []
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj.get("summary"):
                continue
            ids.append(obj["id"])
            rows.append((obj["mae"], obj["mse"], obj["psnr"], obj["ssim"]))
        return MetricReport(ids, rows)


def evaluate_batch(pairs, ids=None) -> MetricReport:
    """pairs: iterable of (predicted, reference) NORMALIZED_01 volumes."""
    pairs = list(pairs)
    if not pairs:
        raise VoxError("empty evaluation batch")
    if ids is None:
        ids = [f"{i:04d}" for i in range(len(pairs))]
    rows = []
    for a, b in pairs:
        rows.append((mae(a, b), mse(a, b), psnr(a, b), ssim3d(a, b)))
    return MetricReport(list(ids), rows)
