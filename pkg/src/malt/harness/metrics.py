from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

PSNR_INF = float("inf")


def mse(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """10·log10(1/mse) for images in [0, 1]; identical inputs give +inf."""
    e = mse(a, b)
    return PSNR_INF if e == 0 else 10.0 * math.log10(1.0 / e)


def per_segment_metrics(pred: np.ndarray, truth: np.ndarray, L: int) -> list[dict]:
    """PSNR/MSE per segment for (B, S, H, W, C) videos; PSNR is averaged per frame."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    rows = []
    for s in range(pred.shape[1] // L):
        p, t = pred[:, s * L:(s + 1) * L], truth[:, s * L:(s + 1) * L]
        frame_mse = ((p - t) ** 2).mean(axis=(2, 3, 4)).reshape(-1)
        frame_psnr = [PSNR_INF if e == 0 else 10 * math.log10(1 / e) for e in frame_mse]
        rows.append({"segment": s + 1, "mse": float(frame_mse.mean()),
                     "psnr": float(np.mean(frame_psnr))})
    return rows


def error_propagation_curve(pred: np.ndarray, truth: np.ndarray, L: int) -> dict:
    """Per-segment series plus first-to-last PSNR gap (positive gap = degradation)."""
    rows = per_segment_metrics(pred, truth, L)
    first, last = rows[0]["psnr"], rows[-1]["psnr"]
    if math.isinf(first) and math.isinf(last):
        gap = 0.0
    else:
        gap = first - last
    return {"rows": rows, "gap": gap, "first_psnr": first, "last_psnr": last}


@dataclass
class MetricsRecord:
    run: str
    segment: int
    psnr: float = float("nan")
    mse: float = float("nan")
    recall: float = float("nan")
    n_params: int = 0
    memory_bytes: int = 0
    # kept out of the CSV so metric files are reproducible byte for byte; see timing.json
    wall_clock: float = float("nan")

    FIELDS = ("run", "segment", "psnr", "mse", "recall", "n_params", "memory_bytes")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path, records: list[MetricsRecord]):
    segs = [r.segment for r in records]
    if segs != sorted(segs):
        raise ValueError("metrics records must be ordered by segment index")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MetricsRecord.FIELDS)
        for r in records:
            w.writerow([_fmt(r.row()[k]) for k in MetricsRecord.FIELDS])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
