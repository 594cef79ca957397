"""Prediction metrics and the cross-fold evaluation protocol.

Per-gene Pearson correlation is computed across the spots of one sample,
averaged over a fold's samples, then over folds.  Genes whose truth or
prediction has zero variance yield an undefined (NaN) correlation; they are
excluded from averages and counted rather than silently zeroed.  The
highly-predictive gene set is the top genes by average rank across folds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError


def pcc(y, y_hat) -> float:
    """Pearson correlation of two vectors; NaN when either has zero variance."""
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise ShapeError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    if y.size < 2:
        raise ContractError("pcc requires at least 2 observations")
    yc = y - y.mean()
    pc = y_hat - y_hat.mean()
    denom = math.sqrt(float((yc**2).sum())) * math.sqrt(float((pc**2).sum()))
    if denom == 0.0:
        return math.nan
    return float((yc * pc).sum() / denom)


def mse_metric(y, y_hat) -> float:
    """Per-element mean squared error over all N*M entries."""
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    return float(((y - y_hat) ** 2).mean())


def mae_metric(y, y_hat) -> float:
    """Per-element mean absolute error over all N*M entries."""
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    return float(np.abs(y - y_hat).mean())


def per_gene_pcc(truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Column-wise Pearson correlation; NaN columns where undefined."""
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape:
        raise ShapeError(f"shape mismatch: {truth.shape} vs {pred.shape}")
    return np.array([pcc(truth[:, g], pred[:, g]) for g in range(truth.shape[1])])


def rank_genes(gene_pcc: np.ndarray) -> np.ndarray:
    """Ranks 1..M by descending PCC; undefined genes last; ties by index."""
    m = gene_pcc.shape[0]
    order = sorted(
        range(m),
        key=lambda g: (1 if math.isnan(gene_pcc[g]) else 0, -(gene_pcc[g] if not math.isnan(gene_pcc[g]) else 0.0), g),
    )
    ranks = np.empty(m, dtype=np.int64)
    for position, g in enumerate(order):
        ranks[g] = position + 1
    return ranks


@dataclass
class FoldReport:
    fold_id: int
    per_gene_pcc: np.ndarray  # length M, NaN where undefined
    mse: float
    mae: float
    gene_rank: np.ndarray  # length M, 1 = best

    @property
    def n_genes(self) -> int:
        return self.per_gene_pcc.shape[0]

    @property
    def n_undefined(self) -> int:
        return int(np.isnan(self.per_gene_pcc).sum())

    @property
    def pcc_a(self) -> float:
        return _nanmean(self.per_gene_pcc)


def _nanmean(values: np.ndarray) -> float:
    defined = values[~np.isnan(values)]
    return float(defined.mean()) if defined.size else math.nan


def build_fold_report(
    fold_id: int,
    sample_pairs: list[tuple[np.ndarray, np.ndarray]],
    pooled: bool = False,
) -> FoldReport:
    """Score one fold from (truth, prediction) pairs, one pair per sample.

    Default: per-gene PCC within each sample, averaged over the fold's
    samples (genes undefined in a sample are excluded from its average).
    ``pooled`` instead concatenates all spots before correlating.
    """
    if not sample_pairs:
        raise ContractError("fold report needs at least one sample")
    if pooled:
        truth = np.concatenate([t for t, _ in sample_pairs], axis=0)
        pred = np.concatenate([p for _, p in sample_pairs], axis=0)
        gene = per_gene_pcc(truth, pred)
        mse = mse_metric(truth, pred)
        mae = mae_metric(truth, pred)
    else:
        per_sample = np.stack([per_gene_pcc(t, p) for t, p in sample_pairs])
        with np.errstate(invalid="ignore"):
            gene = np.where(
                np.isnan(per_sample).all(axis=0),
                np.nan,
                np.nansum(np.nan_to_num(per_sample), axis=0)
                / np.maximum((~np.isnan(per_sample)).sum(axis=0), 1),
            )
        mse = float(np.mean([mse_metric(t, p) for t, p in sample_pairs]))
        mae = float(np.mean([mae_metric(t, p) for t, p in sample_pairs]))
    return FoldReport(
        fold_id=fold_id,
        per_gene_pcc=gene,
        mse=mse,
        mae=mae,
        gene_rank=rank_genes(gene),
    )


def select_hpg(fold_reports: list[FoldReport], top: int = 50) -> list[int]:
    """Top genes by average rank across folds; ties broken by gene index."""
    if not fold_reports:
        raise ContractError("select_hpg needs at least one fold report")
    m = fold_reports[0].n_genes
    if top > m:
        raise ContractError(f"top={top} exceeds gene count {m}")
    mean_rank = np.mean([r.gene_rank for r in fold_reports], axis=0)
    order = sorted(range(m), key=lambda g: (mean_rank[g], g))
    return order[:top]


@dataclass
class EvalSummary:
    mse: float
    mse_std: float
    mae: float
    mae_std: float
    pcc_a: float
    pcc_a_std: float
    pcc_h: float
    pcc_h_std: float
    hpg: list[int]
    undefined_per_fold: list[int]


def aggregate(fold_reports: list[FoldReport], hpg: list[int]) -> EvalSummary:
    """Cross-fold means and stds for MSE, MAE, PCC(A), and PCC(H)."""
    if not fold_reports:
        raise ContractError("aggregate needs at least one fold report")
    hpg_arr = np.asarray(hpg, dtype=np.int64)
    pcc_a = np.array([_nanmean(r.per_gene_pcc) for r in fold_reports])
    pcc_h = np.array([_nanmean(r.per_gene_pcc[hpg_arr]) for r in fold_reports])
    mse = np.array([r.mse for r in fold_reports])
    mae = np.array([r.mae for r in fold_reports])
    return EvalSummary(
        mse=float(mse.mean()),
        mse_std=float(mse.std()),
        mae=float(mae.mean()),
        mae_std=float(mae.std()),
        pcc_a=float(pcc_a.mean()),
        pcc_a_std=float(pcc_a.std()),
        pcc_h=float(pcc_h.mean()),
        pcc_h_std=float(pcc_h.std()),
        hpg=list(hpg),
        undefined_per_fold=[r.n_undefined for r in fold_reports],
    )


# ---------------------------------------------------------------------------
# report emission


def write_report_csv(path, fold_reports: list[FoldReport], summary: EvalSummary) -> None:
    """Machine-readable long-format table: fold, metric, value."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["fold", "metric", "value"])
        for r in fold_reports:
            writer.writerow([r.fold_id, "mse", repr(r.mse)])
            writer.writerow([r.fold_id, "mae", repr(r.mae)])
            writer.writerow([r.fold_id, "pcc_a", repr(r.pcc_a)])
            writer.writerow([r.fold_id, "undefined_genes", r.n_undefined])
        for name in ("mse", "mae", "pcc_a", "pcc_h"):
            writer.writerow(["summary", name, repr(getattr(summary, name))])
            writer.writerow(["summary", f"{name}_std", repr(getattr(summary, f"{name}_std"))])
        writer.writerow(["summary", "hpg", " ".join(str(g) for g in summary.hpg)])


def format_report_text(fold_reports: list[FoldReport], summary: EvalSummary) -> str:
    lines = []
    for r in fold_reports:
        lines.append(
            f"fold {r.fold_id}: mse={r.mse:.6f} mae={r.mae:.6f} "
            f"pcc_a={r.pcc_a:.6f} undefined={r.n_undefined}/{r.n_genes}"
        )
    lines.append(
        f"summary: mse={summary.mse:.6f}±{summary.mse_std:.6f} "
        f"mae={summary.mae:.6f}±{summary.mae_std:.6f} "
        f"pcc_a={summary.pcc_a:.6f}±{summary.pcc_a_std:.6f} "
        f"pcc_h={summary.pcc_h:.6f}±{summary.pcc_h_std:.6f}"
    )
    return "\n".join(lines) + "\n"
