"""End-point-error metrics: EPE, strict/relaxed accuracy, outlier rate."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class MetricsReport:
    epe: float  # meters
    as_pct: float  # EPE < 0.05 m or relative error < 5%
    ar_pct: float  # EPE < 0.1 m or relative error < 10%
    out_pct: float  # EPE > 0.3 m or relative error > 10%

    def to_json(self) -> str:
        return json.dumps(
            {"epe": self.epe, "as": self.as_pct, "ar": self.ar_pct, "out": self.out_pct}
        )


def evaluate(flow, flow_gt) -> MetricsReport:
    """Per-point error statistics against ground truth (strict inequalities).

    Relative error is undefined where the ground-truth flow is zero; only the
    absolute thresholds apply to those points.
    """
    flow = np.asarray(flow, dtype=np.float64)
    flow_gt = np.asarray(flow_gt, dtype=np.float64)
    if flow.shape != flow_gt.shape:
        raise DataError(f"flow shapes differ: {flow.shape} vs {flow_gt.shape}")
    err = np.linalg.norm(flow - flow_gt, axis=1)
    gt_norm = np.linalg.norm(flow_gt, axis=1)
    has_rel = gt_norm > 0.0
    rel = np.zeros_like(err)
    rel[has_rel] = err[has_rel] / gt_norm[has_rel]

    acc_strict = (err < 0.05) | (has_rel & (rel < 0.05))
    acc_relax = (err < 0.1) | (has_rel & (rel < 0.1))
    outlier = (err > 0.3) | (has_rel & (rel > 0.1))
    n = err.shape[0]
    return MetricsReport(
        epe=float(err.mean()),
        as_pct=float(100.0 * acc_strict.sum() / n),
        ar_pct=float(100.0 * acc_relax.sum() / n),
        out_pct=float(100.0 * outlier.sum() / n),
    )
