"""Geometry optimizer: joint-trajectory regressor used as guidance source.

Same two-branch mutual-attention layout as the denoiser, but the motion
embedding is a spatial-temporal graph convolution over the skeleton: spatial
steps average over the normalized bone adjacency (H <- A_hat H W, no bias),
temporal steps are kernel-3 same-padded convolutions per joint, with a
nonlinearity between blocks; joints are mean-pooled into a per-frame token.
The head predicts per-joint offsets added to the input trajectories.

Trained with the contact-weighted composite loss: reprojection, contact-
weighted joints, velocities, and inter-person distances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nets
from .annotation import ContactMask, pairs_to_mask
from .body import Camera, NUM_JOINTS, load_default_tree, motion_joints
from .checkpoint import NetworkCheckpoint
from .infiller import OBS_DIM, ConditioningBundle, build_conditioning
from .optim import ParameterStore, adamw_step, cosine_restart_lr, grad
from .tensor import NonFiniteError, Tensor, concat

DEFAULT_GEOMETRY_CONFIG = {
    "d_model": 128,
    "blocks": 2,            # attention blocks
    "heads": 4,
    "gcn_blocks": 2,
    "gcn_hidden": 64,
    "temporal_kernel": 3,
    "feed_forward": False,
}

DEFAULT_GEOMETRY_WEIGHTS = {
    "reproj": 1.0,
    "contact": 1.0,
    "vel": 1.0,
    "int": 1.0,
    "alpha": 5.0,          # contact up-weighting
}


@dataclass(frozen=True)
class SkeletonGraph:
    """Row-normalized symmetric adjacency over the 24 joints (bones + loops)."""

    adjacency: np.ndarray       # (24, 24), rows sum to 1
    temporal_kernel: int = 3

    @classmethod
    def from_tree(cls, tree=None, temporal_kernel: int = 3) -> "SkeletonGraph":
        tree = tree or load_default_tree()
        A = np.eye(NUM_JOINTS)
        for j in range(1, NUM_JOINTS):
            p = tree.parents[j]
            A[j, p] = 1.0
            A[p, j] = 1.0
        if not np.allclose(A, A.T):
            raise ValueError("adjacency must be symmetric before normalization")
        A_hat = A / A.sum(axis=1, keepdims=True)
        return cls(adjacency=A_hat, temporal_kernel=temporal_kernel)


class GeometryOptimizer:
    """ST-GCN embedding + shared two-branch attention + residual joint head."""

    def __init__(self, config: dict | None = None, seed: int = 0):
        self.config = dict(DEFAULT_GEOMETRY_CONFIG)
        if config:
            self.config.update(config)
        self.graph = SkeletonGraph.from_tree(
            temporal_kernel=self.config["temporal_kernel"])
        self.store = ParameterStore()
        rng = np.random.default_rng(seed)
        cfg = self.config
        d, hid = cfg["d_model"], cfg["gcn_hidden"]

        c_in = 3
        for i in range(cfg["gcn_blocks"]):
            self.store.add(f"gcn.{i}.spatial",
                           rng.standard_normal((c_in, hid)) / np.sqrt(c_in))
            for tap in range(cfg["temporal_kernel"]):
                self.store.add(f"gcn.{i}.temporal.{tap}",
                               (np.eye(hid) if tap == cfg["temporal_kernel"] // 2
                                else np.zeros((hid, hid)))
                               + 0.02 * rng.standard_normal((hid, hid)))
            self.store.add(f"gcn.{i}.temporal.bias", np.zeros(hid))
            c_in = hid
        nets.init_linear(self.store, "token", hid, d, rng)
        nets.init_linear(self.store, "obs", OBS_DIM, d, rng)
        for i in range(cfg["blocks"]):
            nets.init_attention_block(self.store, f"attn.{i}", d, rng,
                                      cfg["feed_forward"])
        nets.init_linear(self.store, "head", d, NUM_JOINTS * 3, rng)
        self.store["head.weight"].data *= 0.01      # near-identity at init

    # -- embedding ------------------------------------------------------------

    def stgcn_embed(self, joints: Tensor) -> Tensor:
        """joints: (B, L, 24, 3) -> per-frame tokens (B, L, d_model)."""
        cfg = self.config
        A_hat = Tensor(self.graph.adjacency)
        h = joints
        for i in range(cfg["gcn_blocks"]):
            if i > 0:
                h = h.relu()
            h = A_hat @ h                                    # spatial mixing
            h = h @ self.store[f"gcn.{i}.spatial"]           # channel map, no bias
            h = self._temporal_conv(h, i)
        pooled = h.mean(axis=2)                              # over joints
        return nets.linear(self.store, "token", pooled)

    def _temporal_conv(self, h: Tensor, block: int) -> Tensor:
        """Kernel-k same-padded convolution over frames, shared across joints."""
        k = self.config["temporal_kernel"]
        half = k // 2
        B, L, J, C = h.shape
        zeros = Tensor(np.zeros((B, half, J, C)))
        padded = concat([zeros, h, zeros], axis=1)
        out = None
        for tap in range(k):
            shifted = padded[:, tap:tap + L]
            term = shifted @ self.store[f"gcn.{block}.temporal.{tap}"]
            out = term if out is None else out + term
        return out + self.store[f"gcn.{block}.temporal.bias"]

    # -- forward ---------------------------------------------------------------

    def forward(self, joints_in: Tensor, obs: np.ndarray) -> Tensor:
        """joints_in: (2B, L, 24, 3) stacked persons -> refined joints, same
        shape.  Offsets are predicted; input trajectories carry through."""
        cfg = self.config
        B2, L = joints_in.shape[0], joints_in.shape[1]
        d = cfg["d_model"]
        h = self.stgcn_embed(joints_in) \
            + nets.sinusoidal_embedding(np.arange(L), d)[None] \
            + nets.linear(self.store, "obs", Tensor(obs))
        for i in range(cfg["blocks"]):
            h = nets.attention_block(self.store, f"attn.{i}", h,
                                     nets.swap_halves(h), cfg["heads"],
                                     cfg["feed_forward"])
        delta = nets.linear(self.store, "head", h).reshape(B2, L, NUM_JOINTS, 3)
        return joints_in + delta

    def predict_joints(self, joints_a: np.ndarray, joints_b: np.ndarray,
                       cond: ConditioningBundle) -> tuple[np.ndarray, np.ndarray]:
        """Inference on one clip: (L, 24, 3) per person in camera-frame meters."""
        x = Tensor(np.stack([joints_a, joints_b]))
        out = self.forward(x, cond.obs)
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError("geometry optimizer produced non-finite joints")
        return out.data[0], out.data[1]


# -- losses -----------------------------------------------------------------------


def contact_weighted_loss(pred_joints, gt_joints, mask: np.ndarray,
                          alpha: float):
    """Mean squared joint error scaled by (alpha * M + 1).

    pred_joints: Tensor or array (L, 24, 3); mask: (24, L) binary.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    weights = alpha * np.asarray(mask, dtype=np.float64).T[..., None] + 1.0
    diff = pred_joints - gt_joints
    weighted = diff * diff * weights
    return weighted.mean()


def geometry_loss_t(pred: Tensor, gt_joints: np.ndarray, kp_norm: np.ndarray,
                    masks: np.ndarray, camera: Camera, weights: dict):
    """Composite loss on stacked batches: reproj + contact + vel + int.

    pred, gt_joints: (2B, L, 24, 3); masks: (2B, 24, L).
    """
    n, L = pred.shape[0], pred.shape[1]
    z = pred[..., 2:3]
    proj = concat([pred[..., 0:1] / z * (camera.focal / camera.cx),
                   pred[..., 1:2] / z * (camera.focal / camera.cy)], axis=-1)
    rd = proj - kp_norm.reshape(n, L, NUM_JOINTS, 2)
    l_reproj = (rd * rd).mean()

    w = weights["alpha"] * masks.swapaxes(1, 2)[..., None] + 1.0    # (2B, L, 24, 1)
    jd = pred - gt_joints
    l_contact = (jd * jd * w).mean()

    vd = (pred[:, 1:] - pred[:, :-1]) - (gt_joints[:, 1:] - gt_joints[:, :-1])
    l_vel = (vd * vd).mean()

    half = n // 2
    idiff = (pred[:half] - pred[half:]).abs() - np.abs(gt_joints[:half] - gt_joints[half:])
    l_int = (idiff * idiff).mean()

    total = (weights["reproj"] * l_reproj + weights["contact"] * l_contact
             + weights["vel"] * l_vel + weights["int"] * l_int)
    breakdown = {"reproj": l_reproj.item(), "contact": l_contact.item(),
                 "vel": l_vel.item(), "int": l_int.item()}
    for name, value in breakdown.items():
        if not np.isfinite(value):
            raise NonFiniteError(f"geometry loss term {name!r} is non-finite")
    return total, breakdown


# -- training ------------------------------------------------------------------------


@dataclass
class GeometryTrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-4
    restart_period: int = 10
    t_mult: int = 2
    seed: int = 0
    loss_weights: dict = field(default_factory=lambda: dict(DEFAULT_GEOMETRY_WEIGHTS))
    model: dict = field(default_factory=dict)


@dataclass
class _GeoTargets:
    joints_in: np.ndarray     # (2, L, 24, 3) anchor joints
    gt_joints: np.ndarray
    kp_norm: np.ndarray
    obs: np.ndarray
    masks: np.ndarray         # (2, 24, L)


def geometry_targets(clip, caption=None) -> _GeoTargets:
    tree = load_default_tree()
    anchors = np.stack([motion_joints(tree, p) for p in clip.anchors.persons])
    gt = np.stack([motion_joints(tree, p) for p in clip.gt.persons])
    cam = clip.camera
    from .body import project
    proj = project(cam, gt)
    proj[..., 0] = (proj[..., 0] - cam.cx) / cam.cx
    proj[..., 1] = (proj[..., 1] - cam.cy) / cam.cy
    cond = build_conditioning(clip, caption, use_text=False)
    pairs = caption.pairs if caption is not None else clip.contacts
    mask = pairs_to_mask(pairs, clip.frames)
    masks = np.stack([mask.person1, mask.person2])
    return _GeoTargets(joints_in=anchors, gt_joints=gt, kp_norm=proj,
                       obs=cond.obs, masks=masks)


def train_geometry(clips, captions, config: GeometryTrainConfig,
                   config_hash: str = "", log=None) -> NetworkCheckpoint:
    """Train the joint regressor on ClipRecords; mirrors train_infiller."""
    if not clips:
        raise ValueError("dataset is empty")
    model = GeometryOptimizer(config.model, seed=config.seed)
    camera = clips[0].camera
    targets = [geometry_targets(c, captions.get(c.clip_id)) for c in clips]
    rng = np.random.default_rng(config.seed)
    weights = dict(DEFAULT_GEOMETRY_WEIGHTS, **config.loss_weights)

    loss_curve = []
    last_good = model.store.copy_values()
    for epoch in range(config.epochs):
        lr = cosine_restart_lr(config.lr, epoch, config.restart_period,
                               config.t_mult)
        order = rng.permutation(len(targets))
        epoch_losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = [targets[i] for i in order[lo:lo + config.batch_size]]
            joints_in = np.concatenate([
                np.stack([tg.joints_in[0] for tg in batch]),
                np.stack([tg.joints_in[1] for tg in batch])])
            gt = np.concatenate([np.stack([tg.gt_joints[0] for tg in batch]),
                                 np.stack([tg.gt_joints[1] for tg in batch])])
            obs = np.concatenate([np.stack([tg.obs[0] for tg in batch]),
                                  np.stack([tg.obs[1] for tg in batch])])
            kp = np.concatenate([np.stack([tg.kp_norm[0] for tg in batch]),
                                 np.stack([tg.kp_norm[1] for tg in batch])])
            masks = np.concatenate([np.stack([tg.masks[0] for tg in batch]),
                                    np.stack([tg.masks[1] for tg in batch])])
            try:
                pred = model.forward(Tensor(joints_in), obs)
                total, _ = geometry_loss_t(pred, gt, kp, masks, camera, weights)
                grads = grad(total, model.store)
                adamw_step(model.store, grads, lr=lr,
                           weight_decay=config.weight_decay)
            except NonFiniteError:
                model.store.load_values(last_good)
                raise NonFiniteError(
                    f"geometry training diverged at epoch {epoch}; last good "
                    f"checkpoint restored") from None
            epoch_losses.append(total.item())
        loss_curve.append(float(np.mean(epoch_losses)))
        last_good = model.store.copy_values()
        if log:
            log(f"geometry epoch {epoch}: loss {loss_curve[-1]:.5f}")

    return NetworkCheckpoint.from_store("geometry", model.store, model.config,
                                        config.seed, config.epochs, loss_curve,
                                        config_hash)
