"""Similarity alignment of point sets (Kabsch-Umeyama), reflection excluded."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateConfigurationError(ValueError):
    """The cross-covariance is rank deficient (points collinear or coincident)."""


@dataclass
class SimilarityTransform:
    rotation: np.ndarray      # (3, 3)
    translation: np.ndarray   # (3,)
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


def procrustes_align(source: np.ndarray, target: np.ndarray,
                     with_scale: bool = True) -> SimilarityTransform:
    """Least-squares similarity transform taking ``source`` onto ``target``.

    Minimizes sum_i || s R source_i + t - target_i ||^2 with det(R) = +1.
    Requires N >= 3 non-collinear points.
    """
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("source and target must both be (N, 3)")
    n = src.shape[0]
    if n < 3:
        raise ValueError("at least 3 points are required")

    mu_s = src.mean(axis=0)
    mu_t = tgt.mean(axis=0)
    xs = src - mu_s
    xt = tgt - mu_t

    cov = xt.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    # Rank < 2 leaves the rotation about the degenerate direction undetermined.
    if D[1] <= 1e-12 * max(D[0], 1e-300):
        raise DegenerateConfigurationError(
            "rank-deficient cross-covariance: points are collinear or coincident")

    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt

    var_s = (xs * xs).sum() / n
    scale = float(np.trace(np.diag(D) @ S) / var_s) if with_scale else 1.0
    t = mu_t - scale * R @ mu_s
    return SimilarityTransform(rotation=R, translation=t, scale=scale)


def aligned_residual(source: np.ndarray, target: np.ndarray,
                     with_scale: bool = True) -> float:
    """Root-mean-square residual after the optimal similarity alignment."""
    tf = procrustes_align(source, target, with_scale=with_scale)
    diff = tf.apply(np.asarray(source, dtype=np.float64)) - np.asarray(target)
    return float(np.sqrt((diff ** 2).sum(axis=1).mean()))
