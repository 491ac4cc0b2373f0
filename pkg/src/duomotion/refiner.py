"""Temporal motion refiner: confidence merge + guided re-sampling.

The merge keeps high-confidence frames from the anchor estimate and takes the
diffusion infill elsewhere.  Refinement re-noises the merged motion to a
shallow step and reverses it through the frozen denoiser; at every reverse
step the posterior mean is optimized with L-BFGS against the guidance loss
(contact-weighted distance to the geometry optimizer's joints plus the
collision penalty), factorized into separate rotational and translational
problems.  Shape coordinates are never touched by guidance.

Collision sets for the penalty are frozen once per denoising step, so the
within-step objective is smooth and the line-search guarantee makes the
guidance loss non-increasing across L-BFGS iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body import NUM_JOINTS, load_default_tree
from .collision import penetration_loss_t
from .diffusion import (MOTION_DIM, POSE_COLS, SHAPE_COLS, TRANSL_COLS,
                        DiffusionSchedule, sample_loop)
from .infiller import collision_contexts, predicted_joints_np, predicted_joints_t
from .optim import lbfgs_minimize
from .tensor import Tensor
from .body import capsule_vertices_t


@dataclass
class ConfidenceTrack:
    """Per-person, per-frame reliability scores in [0, 1] with a threshold."""

    values: np.ndarray          # (2, L)
    threshold: float = 0.6

    def __post_init__(self):
        self.values = np.clip(np.asarray(self.values, dtype=np.float64), 0.0, 1.0)
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")

    def mask(self) -> np.ndarray:
        return (self.values >= self.threshold).astype(np.float64)


@dataclass
class GuidanceConfig:
    lambda_joint: float = 1.0
    lambda_pen: float = 0.1
    step_scale: float = 1.0       # scales the accepted L-BFGS displacement
    iterations: int = 3           # L-BFGS iterations per factor per step
    history: int = 8
    t_re: int = 10                # refinement start step
    alpha: float = 5.0            # contact mask up-weighting
    conf_threshold: float = 0.6

    def __post_init__(self):
        for name in ("lambda_joint", "lambda_pen", "step_scale", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.iterations < 0 or self.history < 1 or self.t_re < 0:
            raise ValueError("invalid guidance configuration")


def confidence_merge(anchor_a: np.ndarray, anchor_b: np.ndarray,
                     infilled_a: np.ndarray, infilled_b: np.ndarray,
                     conf: ConfidenceTrack) -> tuple[np.ndarray, np.ndarray]:
    """Binary per-frame blend: confident frames keep the anchor, the rest take
    the infilled motion.  Exact elementwise selection."""
    if anchor_a.shape != infilled_a.shape or anchor_b.shape != infilled_b.shape:
        raise ValueError("anchor and infilled must share shapes")
    m = conf.mask()
    out_a = m[0][:, None] * anchor_a + (1.0 - m[0][:, None]) * infilled_a
    out_b = m[1][:, None] * anchor_b + (1.0 - m[1][:, None]) * infilled_b
    return out_a, out_b


@dataclass
class GuidanceContext:
    """Everything the per-step guidance objective needs, fixed per clip."""

    guide_joints: np.ndarray     # (2, L, 24, 3) from the geometry optimizer
    masks: np.ndarray            # (2, 24, L) contact masks
    config: GuidanceConfig
    tree: object = None
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.tree = self.tree or load_default_tree()


def guidance_loss(mu_a: np.ndarray, mu_b: np.ndarray, ctx: GuidanceContext,
                  contexts=None, with_grad: bool = False):
    """Guidance objective at a candidate posterior mean.

    Returns (total, breakdown) and, with ``with_grad``, the gradient w.r.t.
    the stacked (2, L, D) input.  ``contexts`` carries frozen collision sets;
    pass the result of ``collision_contexts`` to include the penalty term.
    """
    rep = Tensor(np.stack([mu_a, mu_b]), requires_grad=with_grad)
    total_t, breakdown = _guidance_loss_t(rep, ctx, contexts)
    if not with_grad:
        return total_t.item(), breakdown
    total_t.backward()
    return total_t.item(), breakdown, rep.grad


def _guidance_loss_t(rep: Tensor, ctx: GuidanceContext, contexts):
    cfg = ctx.config
    L = rep.shape[1]
    joints = predicted_joints_t(rep, ctx.tree).reshape(2, L, NUM_JOINTS, 3)
    w = cfg.alpha * ctx.masks.swapaxes(1, 2)[..., None] + 1.0
    jd = joints - ctx.guide_joints
    l_contact = (jd * jd * w).mean()

    l_pen = Tensor(0.0)
    if contexts and cfg.lambda_pen > 0.0:
        for frame, cset, (tris_a, tris_b) in contexts:
            va = capsule_vertices_t(ctx.tree, joints[0:1, frame])[0]
            vb = capsule_vertices_t(ctx.tree, joints[1:2, frame])[0]
            l_pen = l_pen + penetration_loss_t(va, tris_a, vb, tris_b, cset)

    total = cfg.lambda_joint * l_contact + cfg.lambda_pen * l_pen
    return total, {"contact": l_contact.item(), "pen": l_pen.item()}


def guided_denoise_step(mu_a: np.ndarray, mu_b: np.ndarray,
                        ctx: GuidanceContext) -> tuple[np.ndarray, np.ndarray]:
    """Optimize the posterior mean against the guidance loss.

    Rotational and translational coordinate blocks are optimized as separate
    L-BFGS problems (shape untouched); the collision set is frozen at entry.
    A failed line search leaves the mean unmodified and records a warning.
    """
    cfg = ctx.config
    if cfg.step_scale == 0.0 or cfg.iterations == 0:
        return mu_a, mu_b

    contexts = None
    if cfg.lambda_pen > 0.0:
        joints = predicted_joints_np(np.stack([mu_a, mu_b]), ctx.tree)
        contexts = collision_contexts(joints[0], joints[1], ctx.tree) or None

    mu = np.stack([mu_a, mu_b])
    for cols in (POSE_COLS, TRANSL_COLS):
        block_shape = mu[:, :, cols].shape

        def objective(flat):
            candidate = mu.copy()
            candidate[:, :, cols] = flat.reshape(block_shape)
            rep = Tensor(candidate, requires_grad=True)
            total_t, _ = _guidance_loss_t(rep, ctx, contexts)
            total_t.backward()
            return total_t.item(), rep.grad[:, :, cols].ravel().copy()

        result = lbfgs_minimize(objective, mu[:, :, cols].ravel(),
                                max_iters=cfg.iterations,
                                history_size=cfg.history, tolerance=0.0)
        if result.line_search_failed and result.iterations == 0:
            ctx.warnings.append("guidance line search failed; mean unchanged")
            continue
        optimized = result.x.reshape(block_shape)
        mu[:, :, cols] = mu[:, :, cols] + cfg.step_scale * (optimized - mu[:, :, cols])
    return mu[0], mu[1]


def refine(merged_a: np.ndarray, merged_b: np.ndarray, denoiser_fn,
           sched: DiffusionSchedule, ctx: GuidanceContext,
           rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Re-noise the merged motion to t_re and reverse with guided steps.

    ``denoiser_fn`` is a frozen (x_a, x_b, t, cond) -> (x0_a, x0_b) callable;
    the anchored process is centered on the merged motion itself.
    """
    t_re = ctx.config.t_re
    if t_re > sched.T:
        raise ValueError(f"t_re={t_re} exceeds schedule T={sched.T}")
    if t_re == 0:
        return np.array(merged_a), np.array(merged_b)

    def hook(mu_a, mu_b, t):
        return guided_denoise_step(mu_a, mu_b, ctx)

    use_hook = ctx.config.step_scale > 0.0 and ctx.config.iterations > 0 and \
        (ctx.config.lambda_joint > 0.0 or ctx.config.lambda_pen > 0.0)
    return sample_loop(sched, denoiser_fn, merged_a, merged_b, None, rng,
                       guidance_hook=hook if use_hook else None,
                       t_start=t_re)


def reconstruct_clip(clip, infiller_model, caption, sched: DiffusionSchedule,
                     rng: np.random.Generator, geometry_model=None,
                     guidance: GuidanceConfig | None = None,
                     use_text: bool = True, do_refine: bool = False):
    """Full reconstruction for one clip: infill, merge, optionally refine.

    Returns the predicted MotionSequence.
    """
    from .annotation import pairs_to_mask
    from .body import motion_joints
    from .diffusion import pack, unpack
    from .infiller import build_conditioning

    tree = load_default_tree()
    cond = build_conditioning(clip, caption, use_text=use_text)
    anchor_a, anchor_b = pack(clip.anchors)
    infilled_a, infilled_b = sample_loop(
        sched, infiller_model.sampler(cond), anchor_a, anchor_b, None, rng)

    guidance = guidance or GuidanceConfig()
    conf = ConfidenceTrack(values=clip.confidence,
                           threshold=guidance.conf_threshold)
    merged_a, merged_b = confidence_merge(anchor_a, anchor_b,
                                          infilled_a, infilled_b, conf)
    if not do_refine:
        return unpack(merged_a, merged_b)

    anchor_joints = [motion_joints(tree, p) for p in clip.anchors.persons]
    if geometry_model is not None:
        guide_a, guide_b = geometry_model.predict_joints(
            anchor_joints[0], anchor_joints[1], cond)
    else:
        guide_a, guide_b = anchor_joints
    pairs = caption.pairs if caption is not None else clip.contacts
    mask = pairs_to_mask(pairs, clip.frames)
    ctx = GuidanceContext(guide_joints=np.stack([guide_a, guide_b]),
                          masks=np.stack([mask.person1, mask.person2]),
                          config=guidance, tree=tree)
    final_a, final_b = refine(merged_a, merged_b, infiller_model.sampler(cond),
                              sched, ctx, rng)
    return unpack(final_a, final_b)
