"""Independent oracles shared by the test suite.

These deliberately avoid the library code paths they are used to check:
finite differences instead of the autodiff tape, exhaustive pair enumeration
instead of BVH traversal, plain loops instead of vectorized evaluators.
"""

from __future__ import annotations

import numpy as np


def central_differences(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def fd_close(ad: np.ndarray, fd: np.ndarray, rtol: float = 1e-4) -> bool:
    """Relative comparison with a unit floor, elementwise."""
    ad = np.asarray(ad).ravel()
    fd = np.asarray(fd).ravel()
    return bool(np.all(np.abs(ad - fd) <= rtol * np.maximum(1.0, np.abs(fd))))


def brute_force_collisions(verts_a, tris_a, verts_b, tris_b, predicate) -> set:
    """All-pairs collision set using the supplied triangle-triangle predicate."""
    ta = verts_a[tris_a]      # (Fa, 3, 3)
    tb = verts_b[tris_b]      # (Fb, 3, 3)
    fa_idx, fb_idx = np.meshgrid(np.arange(len(tris_a)), np.arange(len(tris_b)),
                                 indexing="ij")
    fa_idx = fa_idx.ravel()
    fb_idx = fb_idx.ravel()
    hits = predicate(ta[fa_idx], tb[fb_idx])
    return {(int(i), int(j)) for i, j in zip(fa_idx[hits], fb_idx[hits])}


def loop_penetration_loss(verts_a, tris_a, verts_b, tris_b, pairs) -> float:
    """Straightforward per-pair, per-vertex evaluation of the local-field penalty."""
    total = 0.0
    for fa, fb in pairs:
        pa = verts_a[tris_a[fa]]
        pb = verts_b[tris_b[fb]]
        for v in pa:
            total += _depth(v, pb) ** 2
        for v in pb:
            total += _depth(v, pa) ** 2
    return total


def _depth(v, tri):
    c = tri.mean(axis=0)
    n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    n = n / np.linalg.norm(n)
    return max(0.0, -float(np.dot(v - c, n)))


def loop_penetration_metric(frames_a, frames_b, sdf_a, sdf_b) -> float:
    """Per-frame, per-person accumulated depth via explicit loops, in mm."""
    total = 0.0
    count = 0
    for va, vb, sa, sb in zip(frames_a, frames_b, sdf_a, sdf_b):
        depth_in_a = 0.0
        for v in vb:
            d = sa(v)
            if d < 0:
                depth_in_a += -d
        depth_in_b = 0.0
        for v in va:
            d = sb(v)
            if d < 0:
                depth_in_b += -d
        total += depth_in_a + depth_in_b
        count += 2
    return 1000.0 * total / count


def point_in_capsule(point, seg_a, seg_b, radius) -> bool:
    """Membership test used against the capsule SDF sign."""
    d = seg_b - seg_a
    t = float(np.dot(point - seg_a, d) / max(np.dot(d, d), 1e-300))
    t = min(1.0, max(0.0, t))
    closest = seg_a + t * d
    return bool(np.linalg.norm(point - closest) <= radius)


def run_length_contacts(dist_per_frame: np.ndarray, threshold: float) -> list:
    """Maximal runs of frames with distance < threshold, as (begin, end) pairs."""
    below = dist_per_frame < threshold
    runs = []
    start = None
    for i, b in enumerate(below):
        if b and start is None:
            start = i
        elif not b and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(below) - 1))
    return runs
