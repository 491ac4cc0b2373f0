"""Rotation representations: axis-angle, 3x3 matrix, and the 6D form.

The 6D form is the first two matrix columns flattened column-first, so the
identity rotation is (1, 0, 0, 0, 1, 0).  Conversion back to a matrix applies
Gram-Schmidt to the two columns and completes the frame with a cross product,
which guarantees an orthonormal result with determinant +1.

All functions are vectorized over leading dimensions.  Differentiable (Tensor)
variants of the 6D path live at the bottom; they are what the training and
guidance graphs use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concat, stack

_EPS = 1e-12


class DegenerateRotationError(ValueError):
    """A 6D vector with (near) zero-norm columns cannot define a rotation."""


def axis_angle_to_matrix(aa: np.ndarray) -> np.ndarray:
    """Rodrigues formula, safe at zero angle. aa: (..., 3) -> (..., 3, 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    small = theta[..., 0] < 1e-8
    # sin(t)/t and (1-cos(t))/t^2 with series fallbacks near zero
    with np.errstate(invalid="ignore", divide="ignore"):
        k1 = np.where(small, 1.0 - theta[..., 0] ** 2 / 6.0,
                      np.sin(theta[..., 0]) / np.where(small, 1.0, theta[..., 0]))
        k2 = np.where(small, 0.5 - theta[..., 0] ** 2 / 24.0,
                      (1.0 - np.cos(theta[..., 0])) / np.where(small, 1.0, theta[..., 0] ** 2))
    x, y, z = aa[..., 0], aa[..., 1], aa[..., 2]
    zeros = np.zeros_like(x)
    K = np.stack([
        np.stack([zeros, -z, y], axis=-1),
        np.stack([z, zeros, -x], axis=-1),
        np.stack([-y, x, zeros], axis=-1),
    ], axis=-2)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + k1[..., None, None] * K + k2[..., None, None] * (K @ K)


def matrix_to_axis_angle(R: np.ndarray) -> np.ndarray:
    """Inverse Rodrigues; the returned angle lies in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.clip((R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2] - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(tr)
    vee = np.stack([R[..., 2, 1] - R[..., 1, 2],
                    R[..., 0, 2] - R[..., 2, 0],
                    R[..., 1, 0] - R[..., 0, 1]], axis=-1)
    sin_t = np.sin(theta)
    small = theta < 1e-7
    near_pi = theta > np.pi - 1e-4

    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(small | near_pi, 0.5,
                         theta / np.where(small | near_pi, 1.0, 2.0 * sin_t))
    aa = vee * scale[..., None]

    if np.any(near_pi):
        # Near pi, (R_sym + I)/2 ~= axis axis^T up to O((pi-theta)^2) terms:
        # the largest-diagonal column is a scaled copy of the axis, which is
        # far better conditioned than vee.  Symmetrizing first drops the
        # sin(theta) K contribution that would otherwise tilt the column.
        A = (R + np.swapaxes(R, -1, -2) + 2.0 * np.eye(3)) / 4.0
        diag = np.stack([A[..., 0, 0], A[..., 1, 1], A[..., 2, 2]], axis=-1)
        k = np.argmax(diag, axis=-1)
        col = np.take_along_axis(A, k[..., None, None].repeat(3, axis=-2), axis=-1)[..., 0]
        norm = np.linalg.norm(col, axis=-1, keepdims=True)
        axis = col / np.where(norm < _EPS, 1.0, norm)
        # Orient consistently with the antisymmetric part (sign of sin(theta)).
        flip = (np.sum(axis * vee, axis=-1) < 0.0)[..., None]
        axis = np.where(flip, -axis, axis)
        aa = np.where(near_pi[..., None], axis * theta[..., None], aa)
    return aa


def matrix_to_sixd(R: np.ndarray) -> np.ndarray:
    """First two columns, column-first: (r00, r10, r20, r01, r11, r21)."""
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def sixd_to_matrix(v: np.ndarray) -> np.ndarray:
    """Gram-Schmidt on the two 6D columns; third column via cross product."""
    v = np.asarray(v, dtype=np.float64)
    a, b = v[..., :3], v[..., 3:]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na < _EPS):
        raise DegenerateRotationError("first 6D column has zero norm")
    r1 = a / na
    b_proj = b - np.sum(r1 * b, axis=-1, keepdims=True) * r1
    nb = np.linalg.norm(b_proj, axis=-1, keepdims=True)
    if np.any(nb < _EPS):
        raise DegenerateRotationError("6D columns are parallel or second column is zero")
    r2 = b_proj / nb
    r3 = np.cross(r1, r2)
    return np.stack([r1, r2, r3], axis=-1)


def axis_angle_to_sixd(aa: np.ndarray) -> np.ndarray:
    return matrix_to_sixd(axis_angle_to_matrix(aa))


def sixd_to_axis_angle(v: np.ndarray) -> np.ndarray:
    return matrix_to_axis_angle(sixd_to_matrix(v))


def geodesic_distance(R1: np.ndarray, R2: np.ndarray) -> np.ndarray:
    """Angle of the relative rotation R1^T R2, in radians."""
    M = np.swapaxes(np.asarray(R1), -1, -2) @ np.asarray(R2)
    tr = np.clip((M[..., 0, 0] + M[..., 1, 1] + M[..., 2, 2] - 1.0) / 2.0, -1.0, 1.0)
    return np.arccos(tr)


def is_rotation_matrix(R: np.ndarray, tol: float = 1e-6) -> bool:
    R = np.asarray(R, dtype=np.float64)
    ortho = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max() <= tol
    return bool(ortho and np.all(np.abs(np.linalg.det(R) - 1.0) <= tol))


@dataclass(frozen=True)
class Rotation:
    """A rotation tagged with its storage form: axis_angle | matrix | sixd."""

    form: str
    values: np.ndarray

    @classmethod
    def from_axis_angle(cls, aa) -> "Rotation":
        return cls("axis_angle", np.asarray(aa, dtype=np.float64))

    @classmethod
    def from_matrix(cls, R) -> "Rotation":
        R = np.asarray(R, dtype=np.float64)
        if not is_rotation_matrix(R):
            raise ValueError("matrix is not a rotation (orthonormal, det +1)")
        return cls("matrix", R)

    @classmethod
    def from_sixd(cls, v) -> "Rotation":
        return cls("sixd", np.asarray(v, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        if self.form == "matrix":
            return self.values
        if self.form == "axis_angle":
            return axis_angle_to_matrix(self.values)
        return sixd_to_matrix(self.values)

    def convert(self, target_form: str) -> "Rotation":
        if target_form == self.form:
            return self
        R = self.matrix()
        if target_form == "matrix":
            return Rotation("matrix", R)
        if target_form == "axis_angle":
            return Rotation("axis_angle", matrix_to_axis_angle(R))
        if target_form == "sixd":
            return Rotation("sixd", matrix_to_sixd(R))
        raise ValueError(f"unknown rotation form: {target_form}")


# -- differentiable 6D path ---------------------------------------------------


def _cross_t(u: Tensor, v: Tensor) -> Tensor:
    """Cross product over the last axis for Tensors of shape (..., 3)."""
    u0, u1, u2 = u[..., 0], u[..., 1], u[..., 2]
    v0, v1, v2 = v[..., 0], v[..., 1], v[..., 2]
    return stack([u1 * v2 - u2 * v1, u2 * v0 - u0 * v2, u0 * v1 - u1 * v0], axis=-1)


def sixd_to_matrix_t(v: Tensor) -> Tensor:
    """Differentiable 6D -> matrix (Gram-Schmidt). v: (..., 6) -> (..., 3, 3)."""
    a = v[..., :3]
    b = v[..., 3:]
    na = (a * a).sum(axis=-1, keepdims=True).sqrt()
    r1 = a / na
    b_proj = b - (r1 * b).sum(axis=-1, keepdims=True) * r1
    nb = (b_proj * b_proj).sum(axis=-1, keepdims=True).sqrt()
    r2 = b_proj / nb
    r3 = _cross_t(r1, r2)
    return stack([r1, r2, r3], axis=-1)
