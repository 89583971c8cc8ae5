"""Segmentation metrics and hierarchical result aggregation.

Scores are averaged case -> organ -> client -> global so every client
contributes equally regardless of its dataset size.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist


class EvaluationError(ValueError):
    """Evaluation inputs violate the metric contracts."""


def dsc(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Dice similarity coefficient 2|P∩G|/(|P|+|G|); 1.0 when both empty."""
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(gt_mask, dtype=bool)
    if p.shape != g.shape:
        raise EvaluationError(f"dsc: shape mismatch {p.shape} vs {g.shape}")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbor; the image
    border counts as background. Returns an (n, 2) array of (row, col)."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def asd(pred_mask: np.ndarray, gt_mask: np.ndarray, spacing: float = 1.0) -> float:
    """Average symmetric surface distance: mean of the two directed average
    nearest-boundary distances. One empty mask yields the image diagonal as a
    penalty; both empty yields 0."""
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(gt_mask, dtype=bool)
    if p.shape != g.shape:
        raise EvaluationError(f"asd: shape mismatch {p.shape} vs {g.shape}")
    p_empty, g_empty = not p.any(), not g.any()
    if p_empty and g_empty:
        return 0.0
    if p_empty or g_empty:
        h, w = p.shape
        return float(np.hypot(h, w)) * spacing
    bp = boundary_pixels(p).astype(np.float64)
    bg = boundary_pixels(g).astype(np.float64)
    d = cdist(bp, bg)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean()) * spacing


@dataclass(frozen=True)
class CaseRecord:
    client: int
    case: int
    organ: int
    dsc: float
    asd: float
    pred_empty: bool = False
    gt_empty: bool = False


@dataclass
class LevelStats:
    dsc_mean: float
    dsc_sd: float
    asd_mean: float
    asd_sd: float
    count: int


@dataclass
class EvalResult:
    per_case: list
    per_client_organ: dict = field(default_factory=dict)  # (client, organ) -> LevelStats
    per_client: dict = field(default_factory=dict)        # client -> LevelStats
    global_dsc: float = float("nan")
    global_asd: float = float("nan")
    global_dsc_sd: float = float("nan")
    global_asd_sd: float = float("nan")


def _stats(dscs, asds) -> LevelStats:
    dscs = np.asarray(dscs, dtype=np.float64)
    asds = np.asarray(asds, dtype=np.float64)
    return LevelStats(dsc_mean=float(dscs.mean()), dsc_sd=float(dscs.std()),
                      asd_mean=float(asds.mean()), asd_sd=float(asds.std()),
                      count=len(dscs))


def hierarchical_summary(records: list, labeled_sets: dict) -> EvalResult:
    """Aggregate per-case records: mean over cases per (client, organ), mean
    over the client's labeled organs, mean over clients.

    ``labeled_sets`` maps client id to the organ ids it should contribute;
    missing coverage is an error.
    """
    by_cell: dict = {}
    for r in records:
        by_cell.setdefault((r.client, r.organ), []).append(r)
    result = EvalResult(per_case=list(records))
    client_dsc, client_asd = [], []
    for client in sorted(labeled_sets):
        organ_dsc, organ_asd = [], []
        for organ in sorted(labeled_sets[client]):
            cell = by_cell.get((client, organ))
            if not cell:
                raise EvaluationError(
                    f"no cases for client {client}, organ {organ}")
            stats = _stats([r.dsc for r in cell], [r.asd for r in cell])
            result.per_client_organ[(client, organ)] = stats
            organ_dsc.append(stats.dsc_mean)
            organ_asd.append(stats.asd_mean)
        result.per_client[client] = _stats(organ_dsc, organ_asd)
        client_dsc.append(result.per_client[client].dsc_mean)
        client_asd.append(result.per_client[client].asd_mean)
    result.global_dsc = float(np.mean(client_dsc))
    result.global_asd = float(np.mean(client_asd))
    result.global_dsc_sd = float(np.std(client_dsc))
    result.global_asd_sd = float(np.std(client_asd))
    return result


# ---------------------------------------------------------------------------
# CSV emission

def write_case_csv(records: list, path, header_comment: str | None = None) -> None:
    path = Path(path)
    with open(path, "w", newline="") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        writer = csv.writer(f)
        writer.writerow(["client_id", "case_id", "organ_id", "dsc", "asd",
                         "pred_empty", "gt_empty"])
        for r in sorted(records, key=lambda r: (r.client, r.case, r.organ)):
            writer.writerow([r.client, r.case, r.organ,
                             f"{r.dsc:.6f}", f"{r.asd:.6f}",
                             int(r.pred_empty), int(r.gt_empty)])


def write_summary_csv(result: EvalResult, path,
                      header_comment: str | None = None) -> None:
    path = Path(path)
    with open(path, "w", newline="") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        writer = csv.writer(f)
        writer.writerow(["level", "id", "dsc_mean", "dsc_sd", "asd_mean", "asd_sd"])
        for (client, organ), s in sorted(result.per_client_organ.items()):
            writer.writerow(["organ", f"{client}/{organ}",
                             f"{s.dsc_mean:.6f}", f"{s.dsc_sd:.6f}",
                             f"{s.asd_mean:.6f}", f"{s.asd_sd:.6f}"])
        for client, s in sorted(result.per_client.items()):
            writer.writerow(["client", client,
                             f"{s.dsc_mean:.6f}", f"{s.dsc_sd:.6f}",
                             f"{s.asd_mean:.6f}", f"{s.asd_sd:.6f}"])
        writer.writerow(["global", "all",
                         f"{result.global_dsc:.6f}", f"{result.global_dsc_sd:.6f}",
                         f"{result.global_asd:.6f}", f"{result.global_asd_sd:.6f}"])
