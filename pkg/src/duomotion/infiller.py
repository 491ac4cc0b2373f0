"""Semantic-guided motion infiller: the two-branch denoiser and its training.

Architecture: motion embedding + positional encoding + timestep embedding +
observation tokens feed N shared-weight attention blocks (self + cross over
the partner stream).  A trainable copy of the blocks consumes the same stream
plus text features injected through a zero-initialized linear layer; each copy
block's output re-enters the base stream through a second, per-block zero
linear layer.  With the zero layers at init, the conditioned output equals
the base output exactly.

Training draws a random diffusion step per clip, noises the ground truth
around the anchor, denoises, and applies the composite reconstruction loss:
reprojection, shape, joints, velocities, inter-person distances, and the
collision penalty (weights in the config; the penalty rides on detected
colliding triangle pairs and can be disabled by weight).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nets
from .annotation import TEXT_DIM, encode_text
from .body import (Camera, MotionSequence, NUM_JOINTS, capsule_segments,
                   capsule_vertices_t, fk_t, load_default_tree, motion_joints,
                   project, shaped_offsets_t)
from .checkpoint import NetworkCheckpoint, load_into_store
from .collision import (build_bvh, capsules_overlap, detect_collisions,
                        penetration_loss_t)
from .diffusion import (MOTION_DIM, POSE_COLS, SHAPE_COLS, TRANSL_COLS,
                        DiffusionSchedule, forward_sample, pack, unpack)
from .optim import ParameterStore, adamw_step, cosine_restart_lr, grad
from .rotations import sixd_to_matrix_t
from .tensor import NonFiniteError, Tensor, concat

OBS_DIM = NUM_JOINTS * 2 + NUM_JOINTS + 1      # keypoints, visibility, confidence

DEFAULT_MODEL_CONFIG = {
    "d_model": 128,
    "blocks": 4,
    "heads": 4,
    "feed_forward": False,
    "text_conditioning": True,
}

DEFAULT_LOSS_WEIGHTS = {
    "reproj": 1.0,
    "smpl": 1.0,
    "joint": 1.0,
    "vel": 1.0,
    "int": 1.0,
    "pen": 1e-4,
}


@dataclass
class ConditioningBundle:
    """Per-person observation features and text features for one clip.

    obs rows are (48 normalized keypoints, 24 visibility bits, 1 confidence)
    per frame; f_text is one 256-dim vector per person.
    """

    obs: np.ndarray       # (2, L, OBS_DIM)
    f_text: np.ndarray    # (2, TEXT_DIM)

    def __post_init__(self):
        if self.obs.shape[0] != 2 or self.obs.shape[2] != OBS_DIM:
            raise ValueError(f"obs must be (2, L, {OBS_DIM})")
        if self.f_text.shape != (2, TEXT_DIM):
            raise ValueError(f"f_text must be (2, {TEXT_DIM})")


def build_conditioning(clip, caption=None, use_text: bool = True) -> ConditioningBundle:
    """Observation tokens from a ClipRecord plus encoded captions."""
    cam = clip.camera
    kp = clip.keypoints_2d.copy()
    kp[..., 0] = (kp[..., 0] - cam.cx) / cam.cx
    kp[..., 1] = (kp[..., 1] - cam.cy) / cam.cy
    kp = kp * clip.visibility[..., None]          # occluded stays zero
    L = clip.frames
    obs = np.concatenate([kp.reshape(2, L, -1), clip.visibility,
                          clip.confidence[..., None]], axis=2)
    if use_text and caption is not None:
        f_text = np.stack([encode_text(caption.text_1), encode_text(caption.text_2)])
    else:
        f_text = np.zeros((2, TEXT_DIM))
    return ConditioningBundle(obs=obs, f_text=f_text)


class TwoBranchDenoiser:
    """Shared-weight two-branch denoiser with a zero-layer conditioned copy."""

    def __init__(self, config: dict | None = None, seed: int = 0):
        self.config = dict(DEFAULT_MODEL_CONFIG)
        if config:
            self.config.update(config)
        self.store = ParameterStore()
        rng = np.random.default_rng(seed)
        d = self.config["d_model"]
        ff = self.config["feed_forward"]

        nets.init_linear(self.store, "embed", MOTION_DIM, d, rng)
        nets.init_linear(self.store, "obs", OBS_DIM, d, rng)
        nets.init_linear(self.store, "temb", d, d, rng)
        for i in range(self.config["blocks"]):
            nets.init_attention_block(self.store, f"base.{i}", d, rng, ff)
            nets.init_attention_block(self.store, f"copy.{i}", d, rng, ff)
            nets.init_linear(self.store, f"z2.{i}", d, d, rng, zero=True)
        nets.init_linear(self.store, "z1", TEXT_DIM, d, rng, zero=True)
        # The head predicts a correction on the noisy input, scaled small at
        # init so the untrained denoiser is near-identity; this keeps the
        # FK/projection losses finite from the first step.
        nets.init_linear(self.store, "head", d, MOTION_DIM, rng)
        self.store["head.weight"].data *= 0.01

    # -- forward -------------------------------------------------------------

    def forward(self, x: Tensor, t: np.ndarray, obs: np.ndarray,
                f_text: np.ndarray) -> Tensor:
        """x: (2B, L, D) noisy motions with persons stacked (a block then b
        block); t: (2B,) timesteps; obs: (2B, L, OBS_DIM); f_text: (2B, 256).
        Returns predicted clean motions, same shape as x."""
        cfg = self.config
        store = self.store
        L = x.shape[1]
        d = cfg["d_model"]

        pe = nets.sinusoidal_embedding(np.arange(L), d)[None]          # (1, L, d)
        temb_feat = nets.sinusoidal_embedding(np.asarray(t, float), d)  # (2B, d)
        temb = nets.linear(store, "temb", Tensor(temb_feat)).reshape(-1, 1, d)

        h = nets.linear(store, "embed", x) + pe + temb \
            + nets.linear(store, "obs", Tensor(obs))
        if cfg["text_conditioning"]:
            text_in = nets.linear(store, "z1", Tensor(f_text)).reshape(-1, 1, d)
            g = h + text_in
        else:
            g = h
        for i in range(cfg["blocks"]):
            h_next = nets.attention_block(store, f"base.{i}", h,
                                          nets.swap_halves(h), cfg["heads"],
                                          cfg["feed_forward"])
            g = nets.attention_block(store, f"copy.{i}", g,
                                     nets.swap_halves(g), cfg["heads"],
                                     cfg["feed_forward"])
            h = h_next + nets.linear(store, f"z2.{i}", g)
        return x + nets.linear(store, "head", h)

    def denoise(self, x_a: np.ndarray, x_b: np.ndarray, t: int,
                cond: ConditioningBundle) -> tuple[np.ndarray, np.ndarray]:
        """Single-clip inference contract used by the sampling loop."""
        x = Tensor(np.stack([x_a, x_b]))
        out = self.forward(x, np.array([t, t]), cond.obs, cond.f_text)
        return out.data[0], out.data[1]

    def sampler(self, cond: ConditioningBundle):
        """Adapter for diffusion.sample_loop's denoiser argument."""
        def fn(x_a, x_b, t, _conditions):
            return self.denoise(x_a, x_b, t, cond)
        return fn


# -- losses ---------------------------------------------------------------------------


@dataclass
class ClipTargets:
    """Precomputed per-clip supervision targets (numpy constants)."""

    gt_rep: np.ndarray        # (2, L, D)
    anchor_rep: np.ndarray    # (2, L, D)
    gt_joints: np.ndarray     # (2, L, 24, 3)
    kp_norm: np.ndarray       # (2, L, 24, 2) normalized gt projections
    obs: np.ndarray           # (2, L, OBS_DIM)
    f_text: np.ndarray        # (2, TEXT_DIM)
    visibility: np.ndarray    # (2, L, 24)


def clip_targets(clip, caption=None, use_text: bool = True) -> ClipTargets:
    tree = load_default_tree()
    gt_rep = np.stack(pack(clip.gt))
    anchor_rep = np.stack(pack(clip.anchors))
    gt_joints = np.stack([motion_joints(tree, p) for p in clip.gt.persons])
    cam = clip.camera
    proj = project(cam, gt_joints)
    proj[..., 0] = (proj[..., 0] - cam.cx) / cam.cx
    proj[..., 1] = (proj[..., 1] - cam.cy) / cam.cy
    cond = build_conditioning(clip, caption, use_text)
    return ClipTargets(gt_rep=gt_rep, anchor_rep=anchor_rep, gt_joints=gt_joints,
                       kp_norm=proj, obs=cond.obs, f_text=cond.f_text,
                       visibility=clip.visibility)


def predicted_joints_t(pred_rep: Tensor, tree) -> Tensor:
    """Differentiable joints from packed predictions. (2B, L, D) -> (2B*L, 24, 3)."""
    n, L, _ = pred_rep.shape
    flat = pred_rep.reshape(n * L, MOTION_DIM)
    rot6 = flat[:, POSE_COLS].reshape(n * L, NUM_JOINTS, 6)
    rotmats = sixd_to_matrix_t(rot6)
    offsets = shaped_offsets_t(tree, flat[:, SHAPE_COLS])
    return fk_t(tree, rotmats, offsets, flat[:, TRANSL_COLS])


def predicted_joints_np(pred_rep: np.ndarray, tree) -> np.ndarray:
    """Numpy twin of ``predicted_joints_t`` for collision detection."""
    from .body import fk, shaped_offsets
    from .rotations import sixd_to_matrix
    n, L, _ = pred_rep.shape
    flat = pred_rep.reshape(n * L, MOTION_DIM)
    rotmats = sixd_to_matrix(flat[:, POSE_COLS].reshape(n * L, NUM_JOINTS, 6))
    offsets = tree.template_offsets * (
        1.0 + flat[:, SHAPE_COLS] @ tree.shape_basis)[..., None]
    joints = fk(tree, rotmats, offsets, flat[:, TRANSL_COLS])
    return joints.reshape(n, L, NUM_JOINTS, 3)


def training_loss_t(pred_rep: Tensor, gt_rep: np.ndarray, gt_joints: np.ndarray,
                    kp_norm: np.ndarray, camera: Camera, weights: dict,
                    tree=None, pen_pairs=None):
    """Composite loss on a stacked batch; returns (scalar Tensor, breakdown).

    pred_rep: (2B, L, D) with person a rows stacked over person b rows.
    ``pen_pairs`` is a list of (row_a, row_b, collision contexts) produced by
    ``collision_contexts``; the collision sets are frozen constants and only
    vertex positions carry gradient.
    """
    tree = tree or load_default_tree()
    n, L, _ = pred_rep.shape
    joints = predicted_joints_t(pred_rep, tree).reshape(n, L, NUM_JOINTS, 3)
    gt_j = gt_joints.reshape(n, L, NUM_JOINTS, 3)

    z = joints[..., 2:3]
    proj = concat([joints[..., 0:1] / z * (camera.focal / camera.cx),
                   joints[..., 1:2] / z * (camera.focal / camera.cy)], axis=-1)
    reproj_diff = proj - kp_norm.reshape(n, L, NUM_JOINTS, 2)
    l_reproj = (reproj_diff * reproj_diff).mean()

    beta_diff = pred_rep[:, :, SHAPE_COLS] - gt_rep[:, :, SHAPE_COLS]
    l_smpl = (beta_diff * beta_diff).mean()

    jd = joints - gt_j
    l_joint = (jd * jd).mean()

    vel_p = joints[:, 1:] - joints[:, :-1]
    vel_g = gt_j[:, 1:] - gt_j[:, :-1]
    vd = vel_p - vel_g
    l_vel = (vd * vd).mean()

    half = n // 2
    rel_p = (joints[:half] - joints[half:]).abs()
    rel_g = np.abs(gt_j[:half] - gt_j[half:])
    idiff = rel_p - rel_g
    l_int = (idiff * idiff).mean()

    l_pen = Tensor(0.0)
    if pen_pairs:
        for ia, ib, contexts in pen_pairs:
            for frame, cset, (tris_a, tris_b) in contexts:
                va = capsule_vertices_t(tree, joints[ia:ia + 1, frame])[0]
                vb = capsule_vertices_t(tree, joints[ib:ib + 1, frame])[0]
                l_pen = l_pen + penetration_loss_t(va, tris_a, vb, tris_b, cset)

    total = (weights["reproj"] * l_reproj + weights["smpl"] * l_smpl
             + weights["joint"] * l_joint + weights["vel"] * l_vel
             + weights["int"] * l_int + weights["pen"] * l_pen)
    breakdown = {
        "reproj": l_reproj.item(), "smpl": l_smpl.item(),
        "joint": l_joint.item(), "vel": l_vel.item(),
        "int": l_int.item(), "pen": l_pen.item(),
    }
    for name, value in breakdown.items():
        if not np.isfinite(value):
            raise NonFiniteError(f"loss term {name!r} is non-finite")
    return total, breakdown


def collision_contexts(joints_a: np.ndarray, joints_b: np.ndarray, tree):
    """Frozen per-frame collision contexts between two capsule bodies.

    A fast capsule-level broad phase skips frames that cannot touch; only the
    remainder pay for meshing, BVH builds, and exact detection.
    """
    from .body import capsule_mesh
    contexts = []
    for frame in range(joints_a.shape[0]):
        sa = capsule_segments(tree, joints_a[frame])
        sb = capsule_segments(tree, joints_b[frame])
        if not capsules_overlap(*sa, *sb):
            continue
        mesh_a = capsule_mesh(tree, joints_a[frame])
        mesh_b = capsule_mesh(tree, joints_b[frame])
        cset = detect_collisions(build_bvh(mesh_a), mesh_a,
                                 build_bvh(mesh_b), mesh_b)
        if cset:
            contexts.append((frame, cset, (mesh_a.triangles, mesh_b.triangles)))
    return contexts


def training_loss(pred: MotionSequence, gt: MotionSequence, annotations,
                  camera: Camera, weights: dict | None = None):
    """Public single-clip loss: returns (total, per-term breakdown).

    ``annotations`` is accepted for interface parity with the contact-weighted
    trainers; none of the six composite terms uses it.
    """
    weights = dict(DEFAULT_LOSS_WEIGHTS, **(weights or {}))
    tree = load_default_tree()
    pred_rep = Tensor(np.stack(pack(pred)))
    gt_rep = np.stack(pack(gt))
    gt_joints = np.stack([motion_joints(tree, p) for p in gt.persons])
    proj = project(camera, gt_joints)
    proj[..., 0] = (proj[..., 0] - camera.cx) / camera.cx
    proj[..., 1] = (proj[..., 1] - camera.cy) / camera.cy

    pen_pairs = None
    if weights["pen"] != 0.0:
        pred_joints = np.stack([motion_joints(tree, p) for p in pred.persons])
        contexts = collision_contexts(pred_joints[0], pred_joints[1], tree)
        pen_pairs = [(0, 1, contexts)] if contexts else None
    total, breakdown = training_loss_t(pred_rep, gt_rep, gt_joints, proj,
                                       camera, weights, tree,
                                       pen_pairs=pen_pairs)
    return total.item(), breakdown


# -- training ------------------------------------------------------------------------


@dataclass
class InfillerTrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-4
    restart_period: int = 10
    t_mult: int = 2
    seed: int = 0
    loss_weights: dict = field(default_factory=lambda: dict(DEFAULT_LOSS_WEIGHTS))
    model: dict = field(default_factory=dict)
    schedule_T: int = 50
    schedule_sigma: float = 0.05
    schedule_kind: str = "cosine"


def train_infiller(clips, captions, config: InfillerTrainConfig,
                   config_hash: str = "", log=None) -> NetworkCheckpoint:
    """Train the denoiser on ClipRecords; returns the final checkpoint.

    ``captions`` maps clip_id -> InteractionCaption (or None entries when
    text conditioning is off or annotations are missing).
    """
    if not clips:
        raise ValueError("dataset is empty")
    model = TwoBranchDenoiser(config.model, seed=config.seed)
    use_text = model.config["text_conditioning"]
    sched = DiffusionSchedule.create(config.schedule_T, config.schedule_sigma,
                                     config.schedule_kind)
    tree = load_default_tree()
    camera = clips[0].camera

    targets = [clip_targets(c, captions.get(c.clip_id), use_text) for c in clips]
    rng = np.random.default_rng(config.seed)
    weights = dict(DEFAULT_LOSS_WEIGHTS, **config.loss_weights)

    loss_curve = []
    last_good = model.store.copy_values()
    for epoch in range(config.epochs):
        lr = cosine_restart_lr(config.lr, epoch, config.restart_period,
                               config.t_mult)
        order = rng.permutation(len(targets))
        epoch_losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = [targets[i] for i in order[lo:lo + config.batch_size]]
            try:
                loss_value = _train_step(model, batch, sched, camera, weights,
                                         tree, rng, lr, config.weight_decay)
            except NonFiniteError:
                model.store.load_values(last_good)
                ckpt = NetworkCheckpoint.from_store(
                    "infiller", model.store, model.config, config.seed, epoch,
                    loss_curve, config_hash)
                raise NonFiniteError(
                    f"training diverged at epoch {epoch}; last good checkpoint "
                    f"restored (loss curve length {len(loss_curve)})") from None
            epoch_losses.append(loss_value)
        loss_curve.append(float(np.mean(epoch_losses)))
        last_good = model.store.copy_values()
        if log:
            log(f"epoch {epoch}: loss {loss_curve[-1]:.5f} lr {lr:.2e}")

    return NetworkCheckpoint.from_store("infiller", model.store, model.config,
                                        config.seed, config.epochs, loss_curve,
                                        config_hash)


def evaluation_loss(model: TwoBranchDenoiser, targets, sched: DiffusionSchedule,
                    camera: Camera, weights: dict, seed: int = 0) -> float:
    """Deterministic diagnostic loss: every clip at the mid schedule step with
    a fixed noise draw.  Comparable across training stages."""
    tree = load_default_tree()
    rng = np.random.default_rng(seed)
    t = max(1, sched.T // 2)
    total, count = 0.0, 0
    for tg in targets:
        gt = tg.gt_rep
        ab = sched.alpha_bar[t]
        noise = rng.standard_normal(gt.shape)
        x_t = tg.anchor_rep + np.sqrt(ab) * (gt - tg.anchor_rep) \
            + np.sqrt(1.0 - ab) * (sched.sigma * noise)
        pred = model.forward(Tensor(x_t), np.array([t, t]), tg.obs, tg.f_text)
        loss, _ = training_loss_t(pred, gt, tg.gt_joints, tg.kp_norm, camera,
                                  weights, tree)
        total += loss.item()
        count += 1
    return total / count


def _train_step(model, batch, sched, camera, weights, tree, rng, lr,
                weight_decay) -> float:
    B = len(batch)
    L = batch[0].gt_rep.shape[1]
    t_batch = rng.integers(1, sched.T + 1, size=B)

    gt = np.concatenate([np.stack([tg.gt_rep[0] for tg in batch]),
                         np.stack([tg.gt_rep[1] for tg in batch])])
    anchor = np.concatenate([np.stack([tg.anchor_rep[0] for tg in batch]),
                             np.stack([tg.anchor_rep[1] for tg in batch])])
    obs = np.concatenate([np.stack([tg.obs[0] for tg in batch]),
                          np.stack([tg.obs[1] for tg in batch])])
    f_text = np.concatenate([np.stack([tg.f_text[0] for tg in batch]),
                             np.stack([tg.f_text[1] for tg in batch])])
    gt_joints = np.concatenate([np.stack([tg.gt_joints[0] for tg in batch]),
                                np.stack([tg.gt_joints[1] for tg in batch])])
    kp = np.concatenate([np.stack([tg.kp_norm[0] for tg in batch]),
                         np.stack([tg.kp_norm[1] for tg in batch])])

    t2 = np.concatenate([t_batch, t_batch])
    ab = sched.alpha_bar[t2][:, None, None]
    noise = rng.standard_normal(gt.shape)
    x_t = anchor + np.sqrt(ab) * (gt - anchor) + np.sqrt(1.0 - ab) * (sched.sigma * noise)

    pred = model.forward(Tensor(x_t), t2, obs, f_text)

    pen_pairs = None
    if weights["pen"] != 0.0:
        joints_np = predicted_joints_np(pred.data, tree)
        pen_pairs = []
        for i in range(B):
            contexts = collision_contexts(joints_np[i], joints_np[B + i], tree)
            if contexts:
                pen_pairs.append((i, B + i, contexts))
        pen_pairs = pen_pairs or None
    total, _ = training_loss_t(pred, gt, gt_joints, kp, camera, weights, tree,
                               pen_pairs=pen_pairs)
    grads = grad(total, model.store)
    adamw_step(model.store, grads, lr=lr, weight_decay=weight_decay)
    return total.item()
