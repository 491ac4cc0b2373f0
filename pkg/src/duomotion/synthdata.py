"""Deterministic two-person interaction clips: ground truth, observations,
occlusion, confidence, and noisy anchor estimates.

Scenario motions are authored as parameter keyframes with clamped cubic
interpolation; the scenario builder calibrates the peak separation
numerically (via FK of the peak pose) so the designated contact joints
actually meet below the contact threshold.  Anchors are ground truth plus
seeded Gaussian parameter noise, amplified on occluded joints and frames
where a real estimator would be unreliable.

Everything derives from (seed, clip id): identical specs give bit-identical
clips.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from . import annotation as anno
from .body import (Camera, MotionSequence, PersonMotion, forward_kinematics,
                   load_default_tree, motion_joints, project)
from .fileio import check_schema, decode_array, encode_array, read_json, write_json

CLIP_SCHEMA_VERSION = 1
MANIFEST_SCHEMA_VERSION = 1
SCENARIOS = ("handshake", "hug", "high-five", "dance", "approach")
# Ground-truth joint accelerations stay under this bound.  A 16-frame clip
# covers a whole interaction (~4 s), so one frame is ~0.25 s and ordinary limb
# movements reach a few tenths of a meter per frame^2.
ACCEL_CAP = 0.8

_ARM_JOINTS = (16, 17, 18, 19, 20, 21, 22, 23)
_TORSO_JOINTS = (3, 6, 9, 12, 13, 14, 15)

OCCLUSION_PROFILES = {
    "none": {},
    # person 2 loses its arms for a few frames
    "light": {1: (_ARM_JOINTS, 8, 11)},
    # person 2 loses torso and arms for the mid-clip window
    "heavy": {1: (_TORSO_JOINTS + _ARM_JOINTS, 6, 12)},
    # both persons lose torso and arms mid-clip
    "heavy_both": {0: (_TORSO_JOINTS + _ARM_JOINTS, 6, 12),
                   1: (_TORSO_JOINTS + _ARM_JOINTS, 6, 12)},
}


class ScenarioError(ValueError):
    pass


class InfeasibleScenarioError(ScenarioError):
    pass


@dataclass
class ScenarioSpec:
    kind: str
    seed: int
    frames: int = 16
    noise_rot: float = 0.08        # anchor rotation noise, radians
    noise_transl: float = 0.04     # anchor translation noise, meters
    occlusion: str = "none"
    contact_threshold: float = 0.10
    peak_separation_override: float | None = None

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ScenarioError(f"unknown scenario kind: {self.kind!r}")
        if self.frames < 3:
            raise ScenarioError("clips need at least 3 frames")
        if self.noise_rot < 0 or self.noise_transl < 0:
            raise ScenarioError("noise levels must be >= 0")
        if self.occlusion not in OCCLUSION_PROFILES:
            raise ScenarioError(f"unknown occlusion profile: {self.occlusion!r}")

    @property
    def clip_id(self) -> str:
        return f"{self.kind}_{self.seed:05d}"


@dataclass
class ClipRecord:
    clip_id: str
    scenario: str
    seed: int
    frames: int
    camera: Camera
    gt: MotionSequence
    anchors: MotionSequence
    keypoints_2d: np.ndarray     # (2, L, 24, 2) pixels, zeroed where invisible
    visibility: np.ndarray       # (2, L, 24) in {0, 1}
    confidence: np.ndarray       # (2, L) visible-joint fraction
    contacts: list               # derived ContactPair list


def _clip_rng(spec: ScenarioSpec) -> np.random.Generator:
    digest = hashlib.sha256(f"{spec.seed}:{spec.clip_id}".encode()).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))


# -- pose authoring ------------------------------------------------------------------


def _neutral_theta() -> np.ndarray:
    """Standing pose: arms hanging close to the body."""
    theta = np.zeros((21, 3))
    theta[15] = (0.0, 0.0, -1.25)    # left_shoulder (joint 16)
    theta[16] = (0.0, 0.0, 1.25)     # right_shoulder (joint 17)
    theta[17] = (0.0, 0.0, -0.20)    # left_elbow
    theta[18] = (0.0, 0.0, 0.20)     # right_elbow
    return theta


_PROBE_ARM = {
    # scenario -> (shoulder joint adjusted by the alignment solver, per person)
    "handshake": (17, 17),
    "high-five": (17, 17),
    "hug": (16, None),        # person 0's left arm reaches person 1's shoulder
    "dance": (16, 17),
}


def _peak_theta(kind: str, person: int, amp: float,
                elev: float = 0.0, adduct: float = 0.0) -> np.ndarray:
    """Scenario-specific peak pose; (elev, adduct) are the alignment knobs the
    solver applies to that person's probe-arm shoulder."""
    theta = _neutral_theta()

    def set_joint(j, aa):
        theta[j - 1] = np.asarray(aa, dtype=np.float64)

    if kind == "handshake":
        # right arm forward and adducted toward the midline, elbow slightly bent
        set_joint(17, (-elev, (np.pi / 2 + 0.45 + adduct) * amp, 0.0))
        set_joint(19, (-0.35 * amp, 0.25, 0.0))
    elif kind == "high-five":
        # right arm forward and raised high
        set_joint(17, ((-0.9 - elev) * amp, np.pi / 2 + 0.35 + adduct, 0.0))
        set_joint(19, (-0.25, 0.15, 0.0))
    elif kind == "hug":
        # both arms forward, wrapping; left reaches higher than right
        set_joint(16, ((-0.35 - elev) * amp, -(np.pi / 2 + 0.50 + adduct), 0.0))
        set_joint(17, (0.25 * amp, np.pi / 2 + 0.50, 0.0))
        set_joint(18, (0.0, -0.55, 0.0))
        set_joint(19, (0.0, 0.55, 0.0))
    elif kind == "dance":
        # person 1 offers the left hand, person 2 the right; free arm sways
        if person == 0:
            set_joint(16, (-elev, -(np.pi / 2 + 0.40 + adduct) * amp, 0.0))
            set_joint(18, (0.0, -0.30, 0.0))
        else:
            set_joint(17, (-elev, (np.pi / 2 + 0.40 + adduct) * amp, 0.0))
            set_joint(19, (0.0, 0.30, 0.0))
    elif kind == "approach":
        pass                         # arms stay down
    return theta


_CONTACT_PROBE = {
    "handshake": ("right_wrist", "right_wrist", 0.05),
    "high-five": ("right_wrist", "right_wrist", 0.05),
    "hug": ("left_wrist", "right_shoulder", 0.07),
    "dance": ("left_wrist", "right_wrist", 0.06),
}

# (times, separation profile relative to peak, arm-pose blend profile)
_PROFILES = {
    "handshake": ([0.0, 0.3, 0.5, 0.75, 1.0],
                  [0.55, 0.10, 0.0, 0.0, 0.22],
                  [0.0, 0.75, 1.0, 1.0, 0.45]),
    "high-five": ([0.0, 0.35, 0.5, 0.65, 1.0],
                  [0.60, 0.12, 0.0, 0.05, 0.35],
                  [0.0, 0.80, 1.0, 0.9, 0.25]),
    "hug": ([0.0, 0.3, 0.5, 0.8, 1.0],
            [0.70, 0.15, 0.0, 0.0, 0.10],
            [0.0, 0.70, 1.0, 1.0, 0.80]),
    "dance": ([0.0, 0.3, 0.5, 0.8, 1.0],
              [0.25, 0.02, 0.0, 0.0, 0.05],
              [0.0, 0.85, 1.0, 1.0, 0.9]),
    "approach": ([0.0, 0.5, 1.0],
                 [0.95, 0.45, 0.0],
                 [0.0, 0.0, 0.0]),
}

_BASE_DEPTH = 3.2


def _facing_phi(person: int) -> np.ndarray:
    # person 0 faces +x, person 1 faces -x (they look at each other)
    return np.array([0.0, np.pi / 2, 0.0]) if person == 0 else np.array([0.0, -np.pi / 2, 0.0])


def _probe_delta(kind: str, amps, betas, elev: float, adduct: float, tree):
    """Probe-joint offset (B minus A) at zero pelvis separation."""
    from .body import PersonFrameParams
    name_a, name_b, _ = _CONTACT_PROBE[kind]
    probes = []
    for person, name in ((0, name_a), (1, name_b)):
        knobs = (elev, adduct) if _PROBE_ARM[kind][person] is not None and person == 0 \
            else (0.0, 0.0)
        theta = _peak_theta(kind, person, amps[person], *knobs)
        params = PersonFrameParams(_facing_phi(person), theta,
                                   betas[person], np.zeros(3))
        joints = forward_kinematics(tree, params)
        probes.append(joints[tree.joint_index(name)])
    return probes[1] - probes[0]


def _align_probe_arm(kind: str, amps, betas, tree):
    """Newton solve on person 0's (elev, adduct) so the probe joints share the
    same height and lateral position; the x gap is set separately."""
    knobs = np.zeros(2)
    for _ in range(8):
        delta = _probe_delta(kind, amps, betas, knobs[0], knobs[1], tree)
        resid = delta[1:]                    # (y, z) misalignment
        if np.linalg.norm(resid) < 1e-4:
            break
        h = 1e-4
        J = np.empty((2, 2))
        for k in range(2):
            bumped = knobs.copy()
            bumped[k] += h
            J[:, k] = (_probe_delta(kind, amps, betas, *bumped, tree)[1:] - resid) / h
        try:
            step = np.linalg.solve(J, resid)
        except np.linalg.LinAlgError:
            break
        knobs -= np.clip(step, -0.5, 0.5)
        knobs = np.clip(knobs, -1.2, 1.2)
    return knobs


def _calibrate_separation(kind: str, amps, betas, knobs, target_gap: float,
                          tree) -> float:
    """Peak pelvis separation so the probe joints meet at the target gap."""
    delta = _probe_delta(kind, amps, betas, knobs[0], knobs[1], tree)
    lateral_sq = delta[1] ** 2 + delta[2] ** 2
    if lateral_sq > target_gap ** 2:
        raise InfeasibleScenarioError(
            f"{kind}: probe joints misaligned by {np.sqrt(lateral_sq):.3f} m, "
            f"cannot reach a {target_gap:.3f} m contact gap")
    # person 1 sits at +d/2, person 0 at -d/2: gap grows with d along x
    d = float(np.sqrt(target_gap ** 2 - lateral_sq) - delta[0])
    if d <= 0.2:
        raise InfeasibleScenarioError(
            f"{kind}: calibrated separation {d:.3f} m is too small for two bodies")
    return d


def _spline(times, values, u):
    return CubicSpline(times, values, bc_type="clamped")(u)


def generate_clip(spec: ScenarioSpec) -> ClipRecord:
    """Author one deterministic clip; see the module docstring for the recipe."""
    tree = load_default_tree()
    rng = _clip_rng(spec)
    L = spec.frames
    u = np.linspace(0.0, 1.0, L)

    betas = []
    for _ in range(2):
        beta = np.zeros(10)
        beta[:4] = np.clip(0.12 * rng.standard_normal(4), -0.3, 0.3)
        betas.append(beta)

    amps = [rng.uniform(0.92, 1.08) for _ in range(2)]
    times, sep_rel, blend_profile = _PROFILES[spec.kind]
    _, _, target_gap = _CONTACT_PROBE.get(spec.kind, (None, None, 0.05))
    target_gap = target_gap * rng.uniform(0.85, 1.1)
    if spec.kind == "approach":
        knobs = np.zeros(2)
        d_peak = (1.9 if spec.peak_separation_override is None
                  else float(spec.peak_separation_override))
    else:
        knobs = _align_probe_arm(spec.kind, amps, betas, tree)
        if spec.peak_separation_override is not None:
            d_peak = float(spec.peak_separation_override)
        else:
            d_peak = _calibrate_separation(spec.kind, amps, betas, knobs,
                                           target_gap, tree)

    peak_thetas = [
        _peak_theta(spec.kind, 0, amps[0], knobs[0], knobs[1]),
        _peak_theta(spec.kind, 1, amps[1]),
    ]
    neutral = _neutral_theta()

    phase = rng.uniform(-0.04, 0.04)
    sep = d_peak + _spline(times, sep_rel, np.clip(u + phase, 0, 1)) * rng.uniform(0.9, 1.1)
    blend = np.clip(_spline(times, blend_profile, np.clip(u + phase, 0, 1)), 0.0, 1.0)

    sway = 0.03 * np.sin(2 * np.pi * (u + rng.uniform(0, 1)))
    bob = 0.008 * np.sin(4 * np.pi * (u + rng.uniform(0, 1)))

    persons = []
    for p in range(2):
        side = -1.0 if p == 0 else 1.0
        phi = np.tile(_facing_phi(p), (L, 1))
        theta = (neutral[None] * (1.0 - blend[:, None, None])
                 + peak_thetas[p][None] * blend[:, None, None])
        # gentle leg swing while the separation is still closing
        speed = np.abs(np.gradient(sep))
        swing = np.sin(2 * np.pi * (1.5 * u + 0.5 * p))
        theta[:, 0, 0] += swing * speed * 1.2          # left hip
        theta[:, 1, 0] -= swing * speed * 1.2          # right hip
        if spec.kind == "dance":
            theta[:, 2, 2] += 0.10 * np.sin(2 * np.pi * (u + 0.25 * p))  # spine sway
        tau = np.stack([side * sep / 2.0,
                        bob * (1.0 if p == 0 else -1.0),
                        np.full(L, _BASE_DEPTH) + sway * side], axis=1)
        persons.append(PersonMotion(phi=phi, theta=theta,
                                    beta=np.tile(betas[p], (L, 1)), tau=tau))
    gt = MotionSequence(tuple(persons))

    joints = [motion_joints(tree, person) for person in gt.persons]
    accel = [np.diff(j, n=2, axis=0) for j in joints]
    max_accel = max(float(np.linalg.norm(a, axis=-1).max()) for a in accel)
    if max_accel > ACCEL_CAP:
        raise ScenarioError(
            f"{spec.clip_id}: joint acceleration {max_accel:.4f} exceeds the "
            f"{ACCEL_CAP} m/frame^2 cap")

    contacts = anno.derive_contacts(joints[0], joints[1], spec.contact_threshold)
    if spec.kind != "approach":
        name_a, name_b, _ = _CONTACT_PROBE[spec.kind]
        if not any(p.joint_a == name_a and p.joint_b == name_b for p in contacts):
            raise InfeasibleScenarioError(
                f"{spec.clip_id}: designated contact {name_a}/{name_b} not achieved")

    visibility = np.ones((2, L, 24))
    for person, (hidden, lo, hi) in OCCLUSION_PROFILES[spec.occlusion].items():
        visibility[person, lo:hi + 1, list(hidden)] = 0.0
    confidence = visibility.mean(axis=2)

    camera = Camera()
    keypoints = np.zeros((2, L, 24, 2))
    for p in range(2):
        keypoints[p] = project(camera, joints[p])
    keypoints = keypoints * visibility[..., None]     # withhold occluded joints

    anchors = _noisy_anchors(gt, visibility, spec, rng)

    return ClipRecord(clip_id=spec.clip_id, scenario=spec.kind, seed=spec.seed,
                      frames=L, camera=camera, gt=gt, anchors=anchors,
                      keypoints_2d=keypoints, visibility=visibility,
                      confidence=confidence, contacts=contacts)


def _noisy_anchors(gt: MotionSequence, visibility: np.ndarray,
                   spec: ScenarioSpec, rng: np.random.Generator) -> MotionSequence:
    """Ground truth + seeded parameter noise; occluded parts degrade harder."""
    persons = []
    for p, person in enumerate(gt.persons):
        L = person.frames
        phi = person.phi + spec.noise_rot * rng.standard_normal((L, 3))
        theta = person.theta + spec.noise_rot * rng.standard_normal((L, 21, 3))
        tau = person.tau + spec.noise_transl * rng.standard_normal((L, 3))
        beta = person.beta + 0.2 * spec.noise_rot * rng.standard_normal((L, 10))

        # occluded joints get much worse estimates; frames with low visibility
        # also drift in translation
        hidden = visibility[p] == 0.0                   # (L, 24)
        theta_hidden = hidden[:, 1:22]
        theta = theta + theta_hidden[..., None] * (
            4.0 * spec.noise_rot * rng.standard_normal((L, 21, 3)))
        frame_occluded = (visibility[p].mean(axis=1) < 0.7)[:, None]
        tau = tau + frame_occluded * (
            2.0 * spec.noise_transl * rng.standard_normal((L, 3)))
        persons.append(PersonMotion(phi=phi, theta=theta,
                                    beta=np.clip(beta, -2.9, 2.9), tau=tau))
    return MotionSequence(tuple(persons))


# -- clip files and manifests --------------------------------------------------------


def _motion_doc(seq: MotionSequence) -> list:
    return [{
        "phi": encode_array(p.phi), "theta": encode_array(p.theta),
        "beta": encode_array(p.beta), "tau": encode_array(p.tau),
    } for p in seq.persons]


def _motion_from_doc(doc) -> MotionSequence:
    return MotionSequence(tuple(
        PersonMotion(phi=decode_array(d["phi"]), theta=decode_array(d["theta"]),
                     beta=decode_array(d["beta"]), tau=decode_array(d["tau"]))
        for d in doc))


def write_clip(path, clip: ClipRecord, config_hash: str = "") -> None:
    doc = {
        "schema_version": CLIP_SCHEMA_VERSION,
        "config_hash": config_hash,
        "clip_id": clip.clip_id,
        "scenario": clip.scenario,
        "seed": clip.seed,
        "frames": clip.frames,
        "camera": {"focal": clip.camera.focal, "cx": clip.camera.cx,
                   "cy": clip.camera.cy},
        "gt": _motion_doc(clip.gt),
        "anchors": _motion_doc(clip.anchors),
        "keypoints_2d": encode_array(clip.keypoints_2d),
        "visibility": encode_array(clip.visibility),
        "confidence": encode_array(clip.confidence),
        "contacts": [[c.joint_a, c.joint_b, c.begin, c.end] for c in clip.contacts],
    }
    write_json(path, doc)


def read_clip(path) -> ClipRecord:
    doc = read_json(path)
    check_schema(doc, CLIP_SCHEMA_VERSION, "clip file")
    cam = Camera(**doc["camera"])
    return ClipRecord(
        clip_id=doc["clip_id"], scenario=doc["scenario"], seed=doc["seed"],
        frames=doc["frames"], camera=cam,
        gt=_motion_from_doc(doc["gt"]),
        anchors=_motion_from_doc(doc["anchors"]),
        keypoints_2d=decode_array(doc["keypoints_2d"]),
        visibility=decode_array(doc["visibility"]),
        confidence=decode_array(doc["confidence"]),
        contacts=[anno.ContactPair(a, b, int(s), int(e))
                  for a, b, s, e in doc["contacts"]],
    )


def make_dataset(specs, split_ratios, out_dir, config_hash: str = "") -> dict:
    """Generate clips to disk and write a manifest with disjoint id splits."""
    if not specs:
        raise ScenarioError("at least one scenario spec is required")
    if abs(sum(split_ratios) - 1.0) > 1e-9:
        raise ScenarioError("split ratios must sum to 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    paths = []
    for spec in specs:
        clip = generate_clip(spec)
        path = out / f"{clip.clip_id}.clip.json"
        write_clip(path, clip, config_hash)
        paths.append(path.name)

    n = len(paths)
    n_train = int(round(split_ratios[0] * n))
    n_val = int(round(split_ratios[1] * n))
    splits = {
        "train": paths[:n_train],
        "val": paths[n_train:n_train + n_val],
        "test": paths[n_train + n_val:],
    }
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "config_hash": config_hash,
        "clip_count": n,
        "splits": splits,
    }
    write_json(out / "manifest.json", manifest)
    return manifest


def load_manifest(data_dir):
    doc = read_json(Path(data_dir) / "manifest.json")
    check_schema(doc, MANIFEST_SCHEMA_VERSION, "manifest")
    return doc


def default_specs(scenarios, clips_per_scenario: int, seed: int,
                  occlusion: str = "none", **kwargs) -> list:
    """A balanced spec list; clip seeds derive from (seed, scenario, index)."""
    specs = []
    for kind in scenarios:
        for i in range(clips_per_scenario):
            digest = hashlib.sha256(f"{seed}:{kind}:{i}".encode()).digest()
            clip_seed = int.from_bytes(digest[:4], "little") % 100_000
            specs.append(ScenarioSpec(kind=kind, seed=clip_seed,
                                      occlusion=occlusion, **kwargs))
    return specs
