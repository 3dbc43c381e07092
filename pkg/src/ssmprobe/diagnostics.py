"""Quantitative diagnostics for assignment plans and evidence scheduling.

Plan statistics summarize where each source row's argmax lands: how many
target positions are ever hit (rank coverage), how spread the hits are
(normalized entropy of the argmax histogram), how much mass sits at the
sequence edges, and how confident rows are (row-max stats).  Evidence curves
weight per-position classifier projections by an exponential decay factor to
show where along the sequence the discriminative mass sits.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .heads import Classifier

REPORT_VERSION = 1


@dataclass
class PlanDiagnostics:
    rank_coverage: float
    unique_positions: int
    norm_entropy: float
    edge_mass: float
    row_max_mean: float
    row_max_p95: float
    n: int


def plan_diagnostics(plan: np.ndarray, edge_band_frac: float = 0.10) -> PlanDiagnostics:
    """Argmax-based statistics of a row-stochastic-ish matrix.

    Ties resolve to the smallest column, which is what makes a perfectly
    uniform plan collapse to coverage 1/N and entropy 0.  The edge band is
    split half-and-half between the two ends (ceil(frac*N/2) positions each).
    The 95th percentile of row maxima uses the nearest-rank convention.
    """
    p = np.asarray(plan, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError("plan must be a square matrix")
    if np.any(p < 0):
        raise ValueError("plan entries must be nonnegative")
    n = p.shape[0]
    argmax = np.argmax(p, axis=1)  # first max wins ties
    unique = int(np.unique(argmax).size)
    counts = np.bincount(argmax, minlength=n)
    probs = counts[counts > 0] / n
    entropy = float(-(probs * np.log(probs)).sum())
    norm_entropy = 0.0 if n == 1 else entropy / math.log(n)
    band = math.ceil(edge_band_frac * n / 2)
    in_edge = (argmax < band) | (argmax >= n - band)
    row_max = p.max(axis=1)
    rank = max(1, math.ceil(0.95 * n))
    return PlanDiagnostics(
        rank_coverage=unique / n,
        unique_positions=unique,
        norm_entropy=norm_entropy,
        edge_mass=float(np.mean(in_edge)),
        row_max_mean=float(row_max.mean()),
        row_max_p95=float(np.sort(row_max)[rank - 1]),
        n=n,
    )


def stochasticity_report(plan: np.ndarray) -> tuple[float, float]:
    """Max-abs deviation of (row sums, column sums) from 1."""
    p = np.asarray(plan, dtype=np.float64)
    row_err = float(np.abs(p.sum(axis=1) - 1.0).max())
    col_err = float(np.abs(p.sum(axis=0) - 1.0).max())
    return row_err, col_err


@dataclass
class EvidenceCurve:
    contributions: list[float]  # C(k) for k = 1..N
    class_index: int
    ordering: str  # e.g. "raster" or "routed"
    gamma: float


def evidence_curve(classifier: Classifier, tokens_in_order: np.ndarray,
                   class_index: int, gamma: float,
                   ordering: str = "raster") -> EvidenceCurve:
    """Per-position proxy evidence C(k) = gamma^(N-k) * (W_c . t_k).

    gamma in (0, 1] stands in for the recurrence's matrix-power attenuation;
    callers typically pass the spectral radius of the trained system.
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must be in (0, 1]")
    tokens = np.asarray(tokens_in_order, dtype=np.float64)
    n = tokens.shape[0]
    proj = tokens @ classifier.W[class_index]
    decay = gamma ** (n - np.arange(1, n + 1, dtype=np.float64))
    return EvidenceCurve((decay * proj).tolist(), class_index, ordering, gamma)


def late_mass_statistic(curve: EvidenceCurve) -> float:
    """Fraction of absolute evidence in the second half (positions k > N/2);
    defined as 0.5 when the curve is identically zero."""
    contrib = np.abs(np.asarray(curve.contributions, dtype=np.float64))
    n = contrib.size
    if n < 2:
        raise ValueError("late mass needs N >= 2")
    total = contrib.sum()
    if total == 0.0:
        return 0.5
    return float(contrib[n // 2 :].sum() / total)


@dataclass
class DiagnosticsReport:
    plans: list[PlanDiagnostics]
    curves: list[EvidenceCurve]
    stochasticity: list[tuple[float, float]]


def emit_report(report: DiagnosticsReport, path_base: str | Path
                ) -> tuple[Path, Path]:
    """Write <base>.json (full numeric payload) and <base>_curves.csv
    (one row per curve position, plot-ready)."""
    base = Path(path_base)
    json_path = base.with_suffix(".json")
    csv_path = base.parent / (base.stem + "_curves.csv")
    payload = {
        "version": REPORT_VERSION,
        "plans": [asdict(p) for p in report.plans],
        "curves": [asdict(c) for c in report.curves],
        "stochasticity": [list(s) for s in report.stochasticity],
    }
    json_path.write_text(json.dumps(payload, indent=2))
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["curve_id", "ordering", "class_index", "gamma",
                         "position", "contribution"])
        for cid, curve in enumerate(report.curves):
            for k, value in enumerate(curve.contributions, start=1):
                writer.writerow([cid, curve.ordering, curve.class_index,
                                 curve.gamma, k, value])
    return json_path, csv_path


def parse_report(json_path: str | Path) -> DiagnosticsReport:
    payload = json.loads(Path(json_path).read_text())
    if payload.get("version") != REPORT_VERSION:
        raise ValueError(f"unsupported report version {payload.get('version')}")
    plans = [PlanDiagnostics(**p) for p in payload["plans"]]
    curves = [EvidenceCurve(**c) for c in payload["curves"]]
    stoch = [tuple(s) for s in payload["stochasticity"]]
    return DiagnosticsReport(plans, curves, stoch)
