"""Fixed equiangular-tight-frame classifier.

W = sqrt(E_W * C/(C-1)) * U (I - (1/C) 1 1^T) with U^T U = I. Columns of W
have norm sqrt(E_W), every pairwise cosine is -1/(C-1), and the columns
sum to zero; the classifier never trains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tailnas.autodiff import functional as F
from tailnas.autodiff.tensor import Tensor
from tailnas.errors import ShapeError


@dataclass(frozen=True)
class ETFWeights:
    W: np.ndarray  # (d, C)
    U: np.ndarray  # (d, C), orthonormal columns
    E_W: float
    C: int
    d: int
    seed: int

    def column_norms(self):
        return np.linalg.norm(self.W, axis=0)

    def pairwise_cosines(self):
        wn = self.W / self.column_norms()
        gram = wn.T @ wn
        return gram[np.triu_indices(self.C, k=1)]

    def pairwise_angle_degrees(self):
        return np.degrees(np.arccos(np.clip(self.pairwise_cosines(), -1.0, 1.0)))


def build_etf(d, C, E_W=1.0, seed=0):
    """Construct ETF weights; deterministic per (d, C, E_W, seed)."""
    if C < 2:
        raise ValueError(f"ETF needs at least 2 classes, got C={C}")
    if d < C:
        raise ShapeError(f"ETF needs feature dim >= class count (U^T U = I), got d={d} < C={C}")
    if E_W <= 0:
        raise ValueError(f"E_W must be positive, got {E_W}")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((d, C))
    q, r = np.linalg.qr(g)
    # sign convention: nonnegative R diagonal, so U is unique per seed
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    center = np.eye(C) - np.full((C, C), 1.0 / C)
    w = np.sqrt(E_W * C / (C - 1)) * (q @ center)
    return ETFWeights(W=w, U=q, E_W=float(E_W), C=C, d=d, seed=seed)


def etf_logits(weights, features):
    """features (N, d) -> logits (N, C); gradient reaches features only."""
    if features.ndim != 2 or features.shape[1] != weights.d:
        raise ShapeError(f"features {features.shape} do not match ETF dim ({weights.d})")
    w = Tensor(weights.W)  # frozen: requires_grad stays False
    return F.matmul(features, w)


def verify_etf(weights, tol=1e-8):
    """Measure deviations from the ETF identities and report pass/fail per tol."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    norms = weights.column_norms()
    target = np.sqrt(weights.E_W)
    cosines = weights.pairwise_cosines()
    target_cos = -1.0 / (weights.C - 1)
    col_sum = weights.W.sum(axis=1)
    ortho = weights.U.T @ weights.U - np.eye(weights.C)
    report = {
        "C": weights.C,
        "d": weights.d,
        "E_W": weights.E_W,
        "seed": weights.seed,
        "max_norm_deviation": float(np.abs(norms - target).max()),
        "max_cosine_deviation": float(np.abs(cosines - target_cos).max()),
        "max_column_sum": float(np.abs(col_sum).max()),
        "max_orthonormality_deviation": float(np.abs(ortho).max()),
        "mean_pairwise_angle_degrees": float(weights.pairwise_angle_degrees().mean()),
        "tol": float(tol),
    }
    report["pass"] = bool(
        report["max_norm_deviation"] <= tol
        and report["max_cosine_deviation"] <= tol
        and report["max_column_sum"] <= tol
    )
    return report
