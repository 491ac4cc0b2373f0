"""Triangle collision detection and penetration measures.

The broad phase is a median-split BVH over triangle bounds; the narrow phase
is a complete separating-axis test for triangle pairs (2 face normals, 9 edge
cross products, and 6 in-plane edge normals so coplanar pairs are decided
correctly).  Separation requires a projection gap larger than 1e-10, so
touching counts as intersecting.

The penetration penalty follows the local-field form: for each colliding
triangle pair, every vertex of one triangle contributes the squared clamped
depth below the other triangle's plane (centroid/normal field).  Unit vertex
normals make the normal factor drop out of the squared norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body import SurfaceMesh
from .tensor import Tensor, stack

_SEP_EPS = 1e-10
_LEAF_SIZE = 4


# -- triangle-triangle predicate ----------------------------------------------------


def _axes_for_pairs(ta: np.ndarray, tb: np.ndarray) -> np.ndarray:
    """Candidate separating axes for each triangle pair. (n,3,3)x2 -> (n,17,3)."""
    ea = np.stack([ta[:, 1] - ta[:, 0], ta[:, 2] - ta[:, 1], ta[:, 0] - ta[:, 2]], axis=1)
    eb = np.stack([tb[:, 1] - tb[:, 0], tb[:, 2] - tb[:, 1], tb[:, 0] - tb[:, 2]], axis=1)
    na = np.cross(ea[:, 0], ea[:, 1])[:, None, :]
    nb = np.cross(eb[:, 0], eb[:, 1])[:, None, :]
    cross_ab = np.cross(ea[:, :, None, :], eb[:, None, :, :]).reshape(-1, 9, 3)
    in_plane_a = np.cross(na, ea)
    in_plane_b = np.cross(nb, eb)
    return np.concatenate([na, nb, cross_ab, in_plane_a, in_plane_b], axis=1)


def tri_tri_intersect(ta: np.ndarray, tb: np.ndarray) -> np.ndarray:
    """Vectorized intersection test for paired triangles.

    ta, tb: (n, 3, 3) vertex triples.  Returns a boolean mask of length n.
    A pair is separated iff some axis gives a projection gap > 1e-10;
    degenerate axes (near-zero vectors) never separate.
    """
    ta = np.asarray(ta, dtype=np.float64)
    tb = np.asarray(tb, dtype=np.float64)
    if ta.ndim == 2:
        ta = ta[None]
        tb = tb[None]
    n = ta.shape[0]
    alive = np.ones(n, dtype=bool)       # still possibly intersecting
    axes = _axes_for_pairs(ta, tb)
    # Scale-aware degeneracy threshold per pair.
    scale = np.maximum(np.abs(ta).max(axis=(1, 2)), np.abs(tb).max(axis=(1, 2)))
    scale = np.maximum(scale, 1.0)
    for k in range(axes.shape[1]):
        if not alive.any():
            break
        ax = axes[alive, k]
        norm = np.linalg.norm(ax, axis=1)
        ok = norm > 1e-12 * scale[alive] ** 2
        pa = np.einsum("nij,nj->ni", ta[alive], ax)
        pb = np.einsum("nij,nj->ni", tb[alive], ax)
        gap = np.maximum(pa.min(axis=1) - pb.max(axis=1),
                         pb.min(axis=1) - pa.max(axis=1))
        separated = ok & (gap > _SEP_EPS * norm)
        idx = np.flatnonzero(alive)
        alive[idx[separated]] = False
    return alive


# -- BVH ---------------------------------------------------------------------------


@dataclass
class BVH:
    """Flat node arrays; leaves reference ranges of the triangle permutation."""

    lo: np.ndarray        # (nodes, 3) box minima
    hi: np.ndarray        # (nodes, 3) box maxima
    left: np.ndarray      # (nodes,) child index or -1 at leaves
    right: np.ndarray
    start: np.ndarray     # (nodes,) leaf triangle range [start, end)
    end: np.ndarray
    order: np.ndarray     # triangle index permutation
    degenerate: np.ndarray  # indices of zero-area triangles (flagged, kept)


def build_bvh(mesh: SurfaceMesh) -> BVH:
    """Median split over the longest box axis; leaf size <= 4; deterministic."""
    tris = mesh.vertices[mesh.triangles]            # (F, 3, 3)
    if len(tris) < 1:
        raise ValueError("mesh must contain at least one triangle")
    tlo = tris.min(axis=1)
    thi = tris.max(axis=1)
    centers = tris.mean(axis=1)
    areas = 0.5 * np.linalg.norm(
        np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    degenerate = np.flatnonzero(areas <= 1e-14)

    order = np.arange(len(tris))
    lo, hi, left, right, start, end = [], [], [], [], [], []

    def new_node():
        lo.append(None)
        hi.append(None)
        left.append(-1)
        right.append(-1)
        start.append(-1)
        end.append(-1)
        return len(lo) - 1

    stack_ = [(new_node(), 0, len(tris))]
    while stack_:
        node, a, b = stack_.pop()
        idx = order[a:b]
        lo[node] = tlo[idx].min(axis=0)
        hi[node] = thi[idx].max(axis=0)
        if b - a <= _LEAF_SIZE:
            start[node] = a
            end[node] = b
            continue
        axis = int(np.argmax(hi[node] - lo[node]))
        # stable argsort on centers keeps construction deterministic
        local = np.argsort(centers[idx, axis], kind="stable")
        order[a:b] = idx[local]
        mid = (a + b) // 2
        lc, rc = new_node(), new_node()
        left[node] = lc
        right[node] = rc
        stack_.append((rc, mid, b))
        stack_.append((lc, a, mid))

    return BVH(lo=np.array(lo), hi=np.array(hi),
               left=np.array(left), right=np.array(right),
               start=np.array(start), end=np.array(end),
               order=order, degenerate=degenerate)


def bvh_leaf_census(bvh: BVH) -> np.ndarray:
    """Triangle indices reachable by enumerating all leaves (for verification)."""
    out = []
    for node in range(len(bvh.lo)):
        if bvh.left[node] == -1:
            out.extend(bvh.order[bvh.start[node]:bvh.end[node]])
    return np.array(sorted(out))


def detect_collisions(bvh_a: BVH, mesh_a: SurfaceMesh,
                      bvh_b: BVH, mesh_b: SurfaceMesh) -> set:
    """Exact set of intersecting triangle index pairs between two meshes."""
    tris_a = mesh_a.vertices[mesh_a.triangles]
    tris_b = mesh_b.vertices[mesh_b.triangles]

    cand_a: list = []
    cand_b: list = []
    stack_ = [(0, 0)]
    while stack_:
        na, nb = stack_.pop()
        if (np.any(bvh_a.lo[na] > bvh_b.hi[nb]) or
                np.any(bvh_b.lo[nb] > bvh_a.hi[na])):
            continue
        leaf_a = bvh_a.left[na] == -1
        leaf_b = bvh_b.left[nb] == -1
        if leaf_a and leaf_b:
            ia = bvh_a.order[bvh_a.start[na]:bvh_a.end[na]]
            ib = bvh_b.order[bvh_b.start[nb]:bvh_b.end[nb]]
            for i in ia:
                for j in ib:
                    cand_a.append(i)
                    cand_b.append(j)
        elif leaf_a:
            stack_.append((na, bvh_b.left[nb]))
            stack_.append((na, bvh_b.right[nb]))
        elif leaf_b:
            stack_.append((bvh_a.left[na], nb))
            stack_.append((bvh_a.right[na], nb))
        else:
            stack_.append((bvh_a.left[na], bvh_b.left[nb]))
            stack_.append((bvh_a.left[na], bvh_b.right[nb]))
            stack_.append((bvh_a.right[na], bvh_b.left[nb]))
            stack_.append((bvh_a.right[na], bvh_b.right[nb]))

    if not cand_a:
        return set()
    ca = np.array(cand_a)
    cb = np.array(cand_b)
    hits = tri_tri_intersect(tris_a[ca], tris_b[cb])
    return {(int(i), int(j)) for i, j in zip(ca[hits], cb[hits])}


# -- penetration loss -----------------------------------------------------------------


def _pair_depth_sq(verts: np.ndarray, other_tri: np.ndarray) -> float:
    c = other_tri.mean(axis=0)
    n = np.cross(other_tri[1] - other_tri[0], other_tri[2] - other_tri[0])
    nn = np.linalg.norm(n)
    if not np.isfinite(nn) or nn < 1e-30:
        raise ValueError("non-finite or degenerate triangle normal in collision set")
    n = n / nn
    depth = np.maximum(0.0, -(verts - c) @ n)
    return float((depth ** 2).sum())


def penetration_loss(mesh_a: SurfaceMesh, mesh_b: SurfaceMesh, collisions) -> float:
    """Sum of squared clamped depths over the colliding triangle pairs."""
    tris_a = mesh_a.vertices[mesh_a.triangles]
    tris_b = mesh_b.vertices[mesh_b.triangles]
    total = 0.0
    for fa, fb in collisions:
        total += _pair_depth_sq(tris_a[fa], tris_b[fb])
        total += _pair_depth_sq(tris_b[fb], tris_a[fa])
    return total


def penetration_loss_t(verts_a: Tensor, tris_a: np.ndarray,
                       verts_b: Tensor, tris_b: np.ndarray, collisions) -> Tensor:
    """Differentiable penetration penalty for a fixed collision set.

    verts_*: (V, 3) Tensors; the collision set itself is treated as constant,
    so gradients flow only through vertex positions (subgradient at the clamp).
    """
    if not collisions:
        return Tensor(0.0)
    pairs = sorted(collisions)
    fa = np.array([p[0] for p in pairs])
    fb = np.array([p[1] for p in pairs])
    ta = verts_a[tris_a[fa]]          # (P, 3, 3)
    tb = verts_b[tris_b[fb]]

    def one_side(v, tri):
        c = tri.mean(axis=1, keepdims=True)                     # (P,1,3)
        e1 = tri[:, 1] - tri[:, 0]
        e2 = tri[:, 2] - tri[:, 0]
        n = _cross_rows(e1, e2)
        n = n / (n * n).sum(axis=-1, keepdims=True).sqrt()
        depth = (-((v - c) * n.reshape(-1, 1, 3)).sum(axis=-1)).relu()
        return (depth * depth).sum()

    return one_side(ta, tb) + one_side(tb, ta)


def _cross_rows(a: Tensor, b: Tensor) -> Tensor:
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


# -- capsule SDF and the Pen metric --------------------------------------------------


def capsule_sdf(starts: np.ndarray, ends: np.ndarray, radii: np.ndarray,
                points: np.ndarray) -> np.ndarray:
    """Signed distance from points to a union of capsules; negative inside.

    starts/ends/radii: (C, 3), (C, 3), (C,); points: (..., 3) -> (...)
    """
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64)
    flat = pts.reshape(-1, 3)

    d = ends - starts                                  # (C, 3)
    denom = np.maximum((d * d).sum(axis=1), 1e-300)
    rel = flat[:, None, :] - starts[None, :, :]        # (N, C, 3)
    t = np.clip((rel * d[None]).sum(axis=2) / denom, 0.0, 1.0)
    closest = starts[None] + t[..., None] * d[None]
    dist = np.linalg.norm(flat[:, None, :] - closest, axis=2) - radii[None]
    return dist.min(axis=1).reshape(pts.shape[:-1])


def penetration_metric(frames_a_segments, frames_a_vertices,
                       frames_b_segments, frames_b_vertices) -> float:
    """Accumulated penetration depth between two capsule bodies, in mm.

    Per frame and per person, sums max(0, -SDF_self(v)) over the other
    person's surface vertices; the result is the average of those sums over
    persons and frames, scaled to millimeters.

    frames_*_segments: list of (starts, ends, radii) per frame.
    frames_*_vertices: list of (V, 3) surface vertices per frame.
    """
    if len(frames_a_segments) != len(frames_b_segments):
        raise ValueError("frame counts differ")
    total = 0.0
    count = 0
    for (sa, ea, ra), va, (sb, eb, rb), vb in zip(
            frames_a_segments, frames_a_vertices,
            frames_b_segments, frames_b_vertices):
        into_a = capsule_sdf(sa, ea, ra, vb)
        into_b = capsule_sdf(sb, eb, rb, va)
        total += float(np.maximum(0.0, -into_a).sum())
        total += float(np.maximum(0.0, -into_b).sum())
        count += 2
    return 1000.0 * total / count


def capsules_overlap(starts_a, ends_a, radii_a, starts_b, ends_b, radii_b,
                     margin: float = 0.0) -> bool:
    """Cheap conservative broad phase: can any two capsules of the bodies touch?

    Distances are sampled along the first segment family, which yields an
    upper bound, so the test inflates the reach by the worst-case sampling
    error (half the sample spacing) and therefore never misses an overlap.
    """
    samples = 9
    min_d = _segment_segment_distance(starts_a, ends_a, starts_b, ends_b, samples)
    max_len = float(np.linalg.norm(ends_a - starts_a, axis=1).max(initial=0.0))
    slack = max_len / (2 * (samples - 1))
    reach = radii_a[:, None] + radii_b[None, :] + margin + slack
    return bool(np.any(min_d <= reach))


def _segment_segment_distance(p1, q1, p2, q2, samples: int = 9) -> np.ndarray:
    """Sampled pairwise distances between two segment sets: (A,B) upper bounds."""
    ts = np.linspace(0.0, 1.0, samples)
    pts = p1[:, None, :] + ts[None, :, None] * (q1 - p1)[:, None, :]   # (A,S,3)
    d = q2 - p2                                                        # (B,3)
    denom = np.maximum((d * d).sum(axis=1), 1e-300)
    rel = pts[:, :, None, :] - p2[None, None, :, :]                    # (A,S,B,3)
    u = np.clip((rel * d[None, None]).sum(axis=3) / denom, 0.0, 1.0)
    closest = p2[None, None] + u[..., None] * d[None, None]
    dist = np.linalg.norm(pts[:, :, None, :] - closest, axis=3)        # (A,S,B)
    return dist.min(axis=1)
