"""Anchored diffusion process and the motion representation it runs on.

The forward process is centered on an initial estimate (the anchor) instead
of zero:

    x_t = anchor + sqrt(abar_t) (x0 - anchor) + sqrt(1 - abar_t) * sigma * eps

so x_T ~ N(anchor, sigma) and early steps stay close to the coarse estimate.
The reverse step applies the standard DDPM posterior in recentred coordinates
y = x - anchor with per-step noise scale sigma * sqrt(beta_tilde_t); with
anchor 0 and sigma 1 both directions coincide bit-for-bit with the textbook
process given the same noise stream.

The per-frame motion width is 157: 24 six-dim rotation blocks, 10 shape
coefficients, 3 translation, in that order.  Hand-joint rotation blocks are
carried but inert (forward kinematics pins hands to their wrist frame).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .body import (NUM_JOINTS, MotionSequence, PersonMotion)
from .rotations import (axis_angle_to_sixd, sixd_to_axis_angle)
from .tensor import NonFiniteError

MOTION_DIM = 157
ROT_COLS = NUM_JOINTS * 6            # 144
SHAPE_COLS = slice(ROT_COLS, ROT_COLS + 10)
TRANSL_COLS = slice(ROT_COLS + 10, MOTION_DIM)
POSE_COLS = slice(0, ROT_COLS)


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise schedule constants, indexed t = 0..T with abar_0 = 1."""

    T: int
    beta: np.ndarray        # (T+1,), beta[0] = 0
    alpha: np.ndarray       # (T+1,), alpha[0] = 1
    alpha_bar: np.ndarray   # (T+1,), strictly decreasing from 1
    beta_tilde: np.ndarray  # (T+1,) posterior variance coefficients
    sigma: float            # anchor noise scale

    @classmethod
    def create(cls, T: int = 50, sigma: float = 0.05,
               kind: str = "cosine") -> "DiffusionSchedule":
        if T < 1:
            raise ScheduleError("T must be >= 1")
        if sigma < 0:
            raise ScheduleError("sigma must be >= 0")
        if kind == "cosine":
            s = 0.008
            f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * math.pi / 2) ** 2
            abar = f / f[0]
            betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, 0.999)
        elif kind == "linear":
            scale = 1000.0 / T
            betas = np.linspace(scale * 1e-4, min(scale * 0.02, 0.999), T)
        else:
            raise ScheduleError(f"unknown schedule kind: {kind}")

        beta = np.concatenate([[0.0], betas])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        if not np.all((beta[1:] > 0) & (beta[1:] < 1)):
            raise ScheduleError("betas must lie in (0, 1)")
        if np.any(np.diff(alpha_bar) >= 0):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        beta_tilde = np.zeros(T + 1)
        beta_tilde[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
        return cls(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                   beta_tilde=beta_tilde, sigma=float(sigma))

    def posterior_coeffs(self, t: int):
        """(coef_x0, coef_xt) of the DDPM posterior mean at step t >= 1."""
        ab_t = self.alpha_bar[t]
        ab_prev = self.alpha_bar[t - 1]
        c0 = self.beta[t] * np.sqrt(ab_prev) / (1.0 - ab_t)
        ct = (1.0 - ab_prev) * np.sqrt(self.alpha[t]) / (1.0 - ab_t)
        return c0, ct


# -- packing ----------------------------------------------------------------------


def pack(seq: MotionSequence) -> tuple[np.ndarray, np.ndarray]:
    """MotionSequence -> two (L, 157) arrays, one per person."""
    return tuple(_pack_person(p) for p in seq.persons)


def _pack_person(person: PersonMotion) -> np.ndarray:
    L = person.frames
    rep = np.empty((L, MOTION_DIM))
    rot6 = np.empty((L, NUM_JOINTS, 6))
    rot6[:, 0] = axis_angle_to_sixd(person.phi)
    rot6[:, 1:22] = axis_angle_to_sixd(person.theta)
    rot6[:, 22:] = np.array([1.0, 0, 0, 0, 1, 0])
    rep[:, POSE_COLS] = rot6.reshape(L, ROT_COLS)
    rep[:, SHAPE_COLS] = person.beta
    rep[:, TRANSL_COLS] = person.tau
    return rep


def unpack(rep_a: np.ndarray, rep_b: np.ndarray) -> MotionSequence:
    """Two (L, 157) arrays -> MotionSequence (hand blocks ignored)."""
    return MotionSequence((_unpack_person(rep_a), _unpack_person(rep_b)))


def _unpack_person(rep: np.ndarray) -> PersonMotion:
    rep = np.asarray(rep, dtype=np.float64)
    if rep.ndim != 2 or rep.shape[1] != MOTION_DIM:
        raise ValueError(f"motion rep must be (L, {MOTION_DIM})")
    L = rep.shape[0]
    rot6 = rep[:, POSE_COLS].reshape(L, NUM_JOINTS, 6)
    return PersonMotion(
        phi=sixd_to_axis_angle(rot6[:, 0]),
        theta=sixd_to_axis_angle(rot6[:, 1:22]),
        beta=rep[:, SHAPE_COLS].copy(),
        tau=rep[:, TRANSL_COLS].copy(),
    )


# -- anchored process ---------------------------------------------------------------


def forward_sample(sched: DiffusionSchedule, x0: np.ndarray, anchor: np.ndarray,
                   t: int, noise: np.ndarray) -> np.ndarray:
    """Draw x_t of the anchored forward process, deterministic given noise."""
    if not 0 <= t <= sched.T:
        raise ScheduleError(f"t={t} outside [0, {sched.T}]")
    ab = sched.alpha_bar[t]
    return anchor + np.sqrt(ab) * (x0 - anchor) + np.sqrt(1.0 - ab) * (sched.sigma * noise)


def reverse_step(sched: DiffusionSchedule, x_t: np.ndarray, x0_pred: np.ndarray,
                 t: int, noise: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """One reverse posterior step; noise is omitted at t = 1."""
    if not 1 <= t <= sched.T:
        raise ScheduleError(f"t={t} outside [1, {sched.T}]")
    mu = posterior_mean(sched, x_t, x0_pred, t, anchor)
    if t == 1:
        return mu
    return mu + sched.sigma * np.sqrt(sched.beta_tilde[t]) * noise


def posterior_mean(sched: DiffusionSchedule, x_t: np.ndarray, x0_pred: np.ndarray,
                   t: int, anchor: np.ndarray) -> np.ndarray:
    c0, ct = sched.posterior_coeffs(t)
    return anchor + (c0 * (x0_pred - anchor) + ct * (x_t - anchor))


def sample_loop(sched: DiffusionSchedule, denoiser, anchor_a: np.ndarray,
                anchor_b: np.ndarray, conditions, rng: np.random.Generator,
                guidance_hook=None, t_start: int | None = None
                ) -> tuple[np.ndarray, np.ndarray]:
    """Reverse the anchored process from t_start (default T) down to 1.

    ``denoiser(x_a, x_b, t, conditions) -> (x0_a, x0_b)`` predicts the clean
    motion for both persons.  If ``guidance_hook(mu_a, mu_b, t) -> (mu_a,
    mu_b)`` is supplied, it may replace the posterior mean before noise
    injection.  The final reverse step has posterior mean equal to the x0
    prediction itself, so the returned pair is the last (possibly guided)
    x0 estimate.
    """
    t_start = sched.T if t_start is None else t_start
    if not 0 <= t_start <= sched.T:
        raise ScheduleError(f"t_start={t_start} outside [0, {sched.T}]")
    if t_start == 0:
        return np.array(anchor_a, dtype=np.float64), np.array(anchor_b, dtype=np.float64)

    shape = np.asarray(anchor_a).shape
    x_a = forward_sample(sched, anchor_a, anchor_a, t_start, rng.standard_normal(shape))
    x_b = forward_sample(sched, anchor_b, anchor_b, t_start, rng.standard_normal(shape))

    for t in range(t_start, 0, -1):
        x0_a, x0_b = denoiser(x_a, x_b, t, conditions)
        if np.asarray(x0_a).shape != shape or np.asarray(x0_b).shape != shape:
            raise ValueError("denoiser output shape mismatch")
        mu_a = posterior_mean(sched, x_a, x0_a, t, anchor_a)
        mu_b = posterior_mean(sched, x_b, x0_b, t, anchor_b)
        if guidance_hook is not None:
            mu_a, mu_b = guidance_hook(mu_a, mu_b, t)
        if t > 1:
            scale = sched.sigma * np.sqrt(sched.beta_tilde[t])
            x_a = mu_a + scale * rng.standard_normal(shape)
            x_b = mu_b + scale * rng.standard_normal(shape)
        else:
            x_a, x_b = mu_a, mu_b
        if not (np.all(np.isfinite(x_a)) and np.all(np.isfinite(x_b))):
            raise NonFiniteError(f"non-finite state at reverse step t={t}")
    return x_a, x_b
