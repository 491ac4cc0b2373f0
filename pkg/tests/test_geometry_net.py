"""ST-GCN embedding, joint regressor, contact-weighted loss, trainer."""

import numpy as np
import pytest

from duomotion.annotation import parse_response
from duomotion.body import load_default_tree, motion_joints
from duomotion.checkpoint import load_into_store
from duomotion.geometry_net import (DEFAULT_GEOMETRY_WEIGHTS, GeometryOptimizer,
                                    GeometryTrainConfig, SkeletonGraph,
                                    contact_weighted_loss, geometry_targets,
                                    train_geometry)
from duomotion.infiller import build_conditioning
from duomotion.synthdata import ScenarioSpec, generate_clip
from duomotion.tensor import Tensor

TREE = load_default_tree()
TINY = {"d_model": 16, "blocks": 1, "heads": 2, "gcn_hidden": 8}


def test_adjacency_rows_sum_to_one_and_symmetric_before_normalization():
    graph = SkeletonGraph.from_tree()
    assert np.allclose(graph.adjacency.sum(axis=1), 1.0, atol=1e-9)
    # support is symmetric even though the normalized matrix is not
    support = graph.adjacency > 0
    assert np.array_equal(support, support.T)


def test_constant_input_stays_constant_after_spatial_step():
    graph = SkeletonGraph.from_tree()
    const = np.ones((24, 5))
    assert np.allclose(graph.adjacency @ const, const, atol=1e-12)


def test_identity_temporal_kernel_preserves_time():
    model = GeometryOptimizer(TINY, seed=0)
    # zero every non-center temporal tap, identity at the center
    hid = model.config["gcn_hidden"]
    for i in range(model.config["gcn_blocks"]):
        for tap in range(model.config["temporal_kernel"]):
            center = model.config["temporal_kernel"] // 2
            model.store[f"gcn.{i}.temporal.{tap}"].data = (
                np.eye(hid) if tap == center else np.zeros((hid, hid)))
    rng = np.random.default_rng(1)
    h = Tensor(rng.normal(size=(2, 6, 24, hid)))
    out = model._temporal_conv(h, 0)
    assert np.allclose(out.data, h.data, atol=1e-12)


def test_zero_input_zero_output_spatial_no_bias():
    model = GeometryOptimizer(TINY, seed=0)
    joints = Tensor(np.zeros((2, 4, 24, 3)))
    tokens = model.stgcn_embed(joints)
    # spatial/temporal steps have no input-dependent bias until the token
    # projection, so the pre-projection stream is exactly zero
    pre_bias = tokens.data - model.store["token.bias"].data
    assert np.allclose(pre_bias, 0.0, atol=1e-12)


def _clip_and_cond(kind="hug", seed=5, occlusion="none"):
    clip = generate_clip(ScenarioSpec(kind=kind, seed=seed, occlusion=occlusion))
    cond = build_conditioning(clip, None, use_text=False)
    ja = motion_joints(TREE, clip.anchors.persons[0])
    jb = motion_joints(TREE, clip.anchors.persons[1])
    return clip, cond, ja, jb


def test_predict_joints_shape_and_finite():
    _, cond, ja, jb = _clip_and_cond()
    model = GeometryOptimizer(TINY, seed=2)
    out_a, out_b = model.predict_joints(ja, jb, cond)
    assert out_a.shape == (16, 24, 3) and out_b.shape == (16, 24, 3)
    assert np.all(np.isfinite(out_a)) and np.all(np.isfinite(out_b))


def test_predict_joints_agent_swap_exact():
    from duomotion.infiller import ConditioningBundle
    _, cond, ja, jb = _clip_and_cond()
    model = GeometryOptimizer(TINY, seed=3)
    out = model.predict_joints(ja, jb, cond)
    cond_sw = ConditioningBundle(obs=cond.obs[::-1].copy(),
                                 f_text=cond.f_text[::-1].copy())
    out_sw = model.predict_joints(jb, ja, cond_sw)
    assert np.array_equal(out[0], out_sw[1])
    assert np.array_equal(out[1], out_sw[0])


# -- contact-weighted loss -----------------------------------------------------


def test_contact_loss_reduces_to_plain():
    rng = np.random.default_rng(4)
    pred = rng.normal(size=(8, 24, 3))
    gt = rng.normal(size=(8, 24, 3))
    plain = float(((pred - gt) ** 2).mean())
    zero_mask = np.zeros((24, 8))
    assert contact_weighted_loss(pred, gt, zero_mask, alpha=5.0) == pytest.approx(plain)
    ones_mask = np.ones((24, 8))
    assert contact_weighted_loss(pred, gt, ones_mask, alpha=0.0) == pytest.approx(plain)


def test_contact_loss_single_entry_six_fold():
    pred = np.zeros((4, 24, 3))
    gt = np.zeros((4, 24, 3))
    pred[2, 7] = [0.1, 0.0, 0.0]
    mask = np.zeros((24, 4))
    base = contact_weighted_loss(pred, gt, mask, alpha=5.0)
    mask[7, 2] = 1.0
    weighted = contact_weighted_loss(pred, gt, mask, alpha=5.0)
    assert weighted == pytest.approx(6.0 * base, rel=1e-12)


def test_contact_loss_negative_alpha_rejected():
    with pytest.raises(ValueError):
        contact_weighted_loss(np.zeros((2, 24, 3)), np.zeros((2, 24, 3)),
                              np.zeros((24, 2)), alpha=-1.0)


def test_contact_loss_dominates_plain():
    rng = np.random.default_rng(5)
    pred = rng.normal(size=(6, 24, 3))
    gt = rng.normal(size=(6, 24, 3))
    mask = (rng.random((24, 6)) < 0.3).astype(float)
    plain = contact_weighted_loss(pred, gt, np.zeros((24, 6)), alpha=3.0)
    weighted = contact_weighted_loss(pred, gt, mask, alpha=3.0)
    assert weighted >= plain


# -- trainer -----------------------------------------------------------------------


def _tiny_dataset(n=6):
    clips, captions = [], {}
    kinds = ["handshake", "hug", "dance"]
    for i in range(n):
        clip = generate_clip(ScenarioSpec(kind=kinds[i % 3], seed=500 + i,
                                          occlusion="light", noise_rot=0.12))
        clips.append(clip)
        captions[clip.clip_id] = None
    return clips, captions


def test_zero_lr_keeps_parameters():
    clips, captions = _tiny_dataset(4)
    cfg = GeometryTrainConfig(epochs=1, batch_size=4, lr=0.0, weight_decay=0.0,
                              seed=7, model=TINY)
    before = GeometryOptimizer(TINY, seed=7).store.copy_values()
    ckpt = train_geometry(clips, captions, cfg)
    for name, arr in before.items():
        assert np.array_equal(arr, ckpt.values[name]), name


def test_fixed_seed_reproducible():
    clips, captions = _tiny_dataset(4)
    cfg = GeometryTrainConfig(epochs=2, batch_size=2, lr=5e-4, seed=9, model=TINY)
    c1 = train_geometry(clips, captions, cfg)
    c2 = train_geometry(clips, captions, cfg)
    assert c1.loss_curve == c2.loss_curve
    for name in c1.values:
        assert np.array_equal(c1.values[name], c2.values[name])


def test_trained_beats_anchor_joints():
    clips, captions = _tiny_dataset(12)
    cfg = GeometryTrainConfig(epochs=30, batch_size=3, lr=6e-3, seed=11, model=TINY)
    ckpt = train_geometry(clips, captions, cfg)
    assert ckpt.loss_curve[-1] < ckpt.loss_curve[0]

    model = GeometryOptimizer(TINY, seed=11)
    load_into_store(ckpt, model.store)
    held = generate_clip(ScenarioSpec(kind="hug", seed=901, occlusion="light",
                                      noise_rot=0.12))
    cond = build_conditioning(held, None, use_text=False)
    ja = motion_joints(TREE, held.anchors.persons[0])
    jb = motion_joints(TREE, held.anchors.persons[1])
    ga = motion_joints(TREE, held.gt.persons[0])
    gb = motion_joints(TREE, held.gt.persons[1])
    pa, pb = model.predict_joints(ja, jb, cond)
    err_pred = np.linalg.norm(np.concatenate([pa - ga, pb - gb]), axis=-1).mean()
    err_anchor = np.linalg.norm(np.concatenate([ja - ga, jb - gb]), axis=-1).mean()
    assert err_pred < err_anchor
