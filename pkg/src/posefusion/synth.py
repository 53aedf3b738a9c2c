"""Deterministic synthetic scene engine.

Produces FrameRecord sequences with controllable occlusion rates and
contact counts. Objects are surface point clouds rendered by z-buffered
splats (painter's order, dilated discs); the hand is a 2-D occluder
silhouette; tactile electrodes follow a linear contact model plus noise.
Everything is reproducible bit-exactly from the master seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .dataio import (
    IMAGE_HEIGHT,
    IMAGE_WIDTH,
    FrameRecord,
    compute_occlusion_rate,
    read_manifest,
    write_sequence,
)
from .errors import InvalidArgumentError, RenderError
from .geometry import ModelPointCloud, Pose, Quaternion, quat_to_rotation
from .handgraph import NUM_ELECTRODES, NUM_FINGERS, TactileFrame, TactileStats

SHAPES = ("box", "bottle", "sphere", "tool")
SCENARIO_CYCLE = ("front", "upper", "under", "back", "close", "far", "dim")

# Fingertip rest offsets relative to the palm (meters), canonical order.
REST_OFFSETS = np.array([
    [-0.08, 0.03, -0.02],
    [-0.04, 0.04, 0.01],
    [0.00, 0.04, 0.02],
    [0.04, 0.04, 0.01],
    [0.08, 0.03, -0.02],
])


@dataclass
class SceneConfig:
    """Everything that determines a generated dataset."""

    object_id: str = "synth_tool"
    shape: str = "tool"
    dims: tuple = (0.12, 0.07, 0.04)  # bounding extents, meters
    num_model_points: int = 500
    # camera intrinsics for 640x480
    fx: float = 580.0
    fy: float = 580.0
    cx: float = 320.0
    cy: float = 240.0
    # trajectory
    center: tuple = (0.0, 0.0, 0.55)
    trans_step_std: float = 0.0012  # meters per frame
    rot_step_std: float = 0.02  # radians per frame
    smoothing: float = 0.8
    wander_xy: float = 0.02
    wander_z: float = 0.09
    max_initial_tilt: float = 0.9  # radians off the canonical orientation
    # contact schedule: probability weights over target counts 0..5
    contact_weights: tuple = (0.08, 0.28, 0.14, 0.20, 0.15, 0.15)
    segment_frames: tuple = (10, 30)  # min/max segment length
    contact_epsilon: float = 0.006  # meters
    # occluder schedule
    occluder_fraction: float = 0.45  # fraction of frames with an occluder
    occluder_scale_range: tuple = (0.3, 1.25)  # relative to object bbox
    # noise
    depth_noise_m: float = 0.002
    tactile_noise: float = 1.0
    contact_gain: float = 15.0  # scale of the electrode mixing matrix
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise InvalidArgumentError(f"unknown shape {self.shape!r}")
        if min(self.dims) <= 0:
            raise InvalidArgumentError("dims must be positive")
        if self.num_model_points < 4:
            raise InvalidArgumentError("need at least 4 model points")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in self.__dict__.items()}

    @staticmethod
    def from_dict(d: dict) -> "SceneConfig":
        fields = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return SceneConfig(**fields)


@dataclass
class ContactModel:
    """Linear electrode response: baseline + W @ [normal(3); penetration(1)]."""

    W: np.ndarray  # (19, 4)
    baseline: np.ndarray  # (19,)
    noise_std: float

    @staticmethod
    def from_seed(seed: int, gain: float, noise_std: float) -> "ContactModel":
        rng = np.random.default_rng((seed, 0xC0))
        W = rng.normal(scale=gain, size=(NUM_ELECTRODES, 4))
        baseline = rng.uniform(1500.0, 3000.0, size=NUM_ELECTRODES)
        return ContactModel(W=W, baseline=baseline, noise_std=noise_std)

    def respond(self, normal: np.ndarray, penetration: float, epsilon: float) -> np.ndarray:
        feat = np.concatenate([normal, [penetration / epsilon]])
        return self.W @ feat


# ---------------------------------------------------------------------------
# Procedural object models


def _sample_box(rng, dims, n):
    """Points on the surface of an axis-aligned box, with outward normals."""
    hx, hy, hz = np.asarray(dims) / 2.0
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1, 1, size=n)
    v = rng.uniform(-1, 1, size=n)
    pts = np.zeros((n, 3))
    nrm = np.zeros((n, 3))
    for f in range(6):
        m = faces == f
        axis, sign = f // 2, 1.0 if f % 2 == 0 else -1.0
        o1, o2 = [a for a in range(3) if a != axis]
        half = [hx, hy, hz]
        pts[m, axis] = sign * half[axis]
        pts[m, o1] = u[m] * half[o1]
        pts[m, o2] = v[m] * half[o2]
        nrm[m, axis] = sign
    return pts, nrm


def _sample_sphere(rng, dims, n):
    r = min(dims) / 2.0
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * r, v


def _sample_bottle(rng, dims, n):
    """Cylinder body + narrower neck, axis along z."""
    radius = min(dims[0], dims[1]) / 2.0
    height = dims[2] if dims[2] >= max(dims[0], dims[1]) else max(dims)
    n_body = int(n * 0.75)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    z = np.concatenate([
        rng.uniform(-height / 2, height * 0.15, size=n_body),
        rng.uniform(height * 0.15, height / 2, size=n - n_body),
    ])
    r = np.where(z < height * 0.15, radius, radius * 0.45)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    nrm = np.stack([np.cos(theta), np.sin(theta), np.zeros(n)], axis=1)
    return pts, nrm


def _sample_tool(rng, dims, n):
    """Asymmetric L-shaped tool: a long bar with a head block on one end."""
    lx, ly, lz = dims
    n1 = int(n * 0.6)
    bar, nb = _sample_box(rng, (lx, ly * 0.4, lz * 0.6), n1)
    head, nh = _sample_box(rng, (lx * 0.35, ly, lz), n - n1)
    head[:, 0] += lx * 0.5
    head[:, 1] += ly * 0.25
    return np.vstack([bar, head]), np.vstack([nb, nh])


_SAMPLERS = {"box": _sample_box, "sphere": _sample_sphere,
             "bottle": _sample_bottle, "tool": _sample_tool}


def _farthest_points(pts: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Indices of k well-separated points (greedy farthest-point sampling)."""
    rng = np.random.default_rng((seed, 0xF9))
    idx = [int(rng.integers(len(pts)))]
    d = np.linalg.norm(pts - pts[idx[0]], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(d))
        idx.append(nxt)
        d = np.minimum(d, np.linalg.norm(pts - pts[nxt], axis=1))
    return np.asarray(idx)


@dataclass
class SceneAssets:
    """Derived, seed-deterministic scene resources."""

    config: SceneConfig
    model: ModelPointCloud
    normals: np.ndarray = field(repr=False)
    albedo: np.ndarray = field(repr=False)  # (n, 3) in [0, 1]
    anchor_indices: np.ndarray = field(repr=False)  # 5 contact anchors
    contact_model: ContactModel = None
    splat_radius: float = 0.0  # meters

    @staticmethod
    def build(config: SceneConfig) -> "SceneAssets":
        rng = np.random.default_rng((config.seed, 0xA5))
        pts, nrm = _SAMPLERS[config.shape](rng, config.dims, config.num_model_points)
        albedo = rng.uniform(0.15, 1.0, size=(len(pts), 3))
        anchors = _farthest_points(pts, NUM_FINGERS, config.seed)
        contact = ContactModel.from_seed(
            config.seed, config.contact_gain, config.tactile_noise)
        extent = float(np.max(np.ptp(pts, axis=0)))
        radius = 1.8 * extent / np.sqrt(config.num_model_points)
        return SceneAssets(config=config, model=ModelPointCloud(config.object_id, pts),
                           normals=nrm, albedo=albedo, anchor_indices=anchors,
                           contact_model=contact, splat_radius=radius)


@dataclass
class OccluderState:
    """Hand-proxy silhouette: an axis-aligned rectangle in the image."""

    center: tuple  # (u, v) pixels
    size: tuple  # (w, h) pixels
    depth_m: float = 0.35
    gray: int = 180


# ---------------------------------------------------------------------------
# Trajectory


def generate_trajectory(config: SceneConfig, num_frames: int,
                        rng: np.random.Generator | None = None):
    """Smoothed random walk on rigid poses, bounded around the scene center."""
    if num_frames < 1:
        raise InvalidArgumentError("num_frames must be >= 1")
    if rng is None:
        rng = np.random.default_rng((config.seed, 0x7A))
    center = np.asarray(config.center)
    # random start inside the wander box: without it every sequence hovers
    # at the center and a constant-pose predictor looks artificially good
    span = np.array([config.wander_xy, config.wander_xy, config.wander_z])
    t = center + rng.uniform(-1.0, 1.0, size=3) * span
    q = Quaternion(*np.append(1.0, np.zeros(3)))
    # random but bounded initial tilt: rotation stays a local regression
    # problem instead of full-orientation-space regression
    q = q.multiply(Quaternion.from_axis_angle(
        rng.normal(size=3), rng.uniform(0, config.max_initial_tilt)))
    v = np.zeros(3)
    w = np.zeros(3)
    alpha = config.smoothing
    lo = center - np.array([config.wander_xy, config.wander_xy, config.wander_z])
    hi = center + np.array([config.wander_xy, config.wander_xy, config.wander_z])
    poses = []
    for _ in range(num_frames):
        poses.append(Pose(t.copy(), q))
        v = alpha * v + (1 - alpha) * rng.normal(scale=config.trans_step_std, size=3)
        w = alpha * w + (1 - alpha) * rng.normal(scale=config.rot_step_std, size=3)
        t = t + v
        # reflect at the wander bounds to stay in view
        for a in range(3):
            if t[a] < lo[a]:
                t[a] = 2 * lo[a] - t[a]
                v[a] = -v[a]
            elif t[a] > hi[a]:
                t[a] = 2 * hi[a] - t[a]
                v[a] = -v[a]
        angle = float(np.linalg.norm(w))
        if angle > 0:
            q = Quaternion.from_axis_angle(w / angle, angle).multiply(q).normalized()
    return poses


# ---------------------------------------------------------------------------
# Rendering


def render_frame(object_pose: Pose, occluder_state: OccluderState | None,
                 assets: SceneAssets, rng: np.random.Generator | None = None):
    """Splat-render the model; returns (rgb, depth_mm, mask_full, mask_visible)."""
    cfg = assets.config
    pts_cam = object_pose.apply(assets.model.points)
    z = pts_cam[:, 2]
    if np.max(z) <= 0.0:
        raise RenderError("object is fully behind the camera")
    visible = z > 0.05
    if not np.any(visible):
        raise RenderError("no model points in front of the near plane")
    R = quat_to_rotation(object_pose.orientation)
    normals_cam = assets.normals @ R.T
    light = np.array([0.3, -0.5, -0.8])
    light /= np.linalg.norm(light)
    shade = 0.55 + 0.45 * np.clip(normals_cam @ -light, 0.0, 1.0)

    u = cfg.fx * pts_cam[:, 0] / z + cfg.cx
    v = cfg.fy * pts_cam[:, 1] / z + cfg.cy
    order = np.argsort(-z)  # painter's algorithm, far to near

    rgb = np.full((IMAGE_HEIGHT, IMAGE_WIDTH, 3), (28, 32, 36), dtype=np.uint8)
    depth = np.zeros((IMAGE_HEIGHT, IMAGE_WIDTH), dtype=np.float32)
    mask_full = np.zeros((IMAGE_HEIGHT, IMAGE_WIDTH), dtype=np.uint8)
    for i in order:
        if not visible[i]:
            continue
        ui, vi = int(round(u[i])), int(round(v[i]))
        if not (-20 <= ui < IMAGE_WIDTH + 20 and -20 <= vi < IMAGE_HEIGHT + 20):
            continue
        r_px = int(np.clip(round(cfg.fx * assets.splat_radius / z[i]), 2, 16))
        color = tuple(int(c) for c in np.clip(assets.albedo[i] * shade[i] * 255, 0, 255))
        cv2.circle(rgb, (ui, vi), r_px, color, -1)
        cv2.circle(depth, (ui, vi), r_px, float(z[i]), -1)
        cv2.circle(mask_full, (ui, vi), r_px, 1, -1)
    mask_full = mask_full.astype(bool)
    if not np.any(mask_full):
        raise RenderError("object silhouette projects outside the image")

    if rng is not None and cfg.depth_noise_m > 0:
        noise = rng.normal(scale=cfg.depth_noise_m, size=depth.shape).astype(np.float32)
        depth = np.where(depth > 0, np.maximum(depth + noise, 0.001), 0.0)

    mask_visible = mask_full.copy()
    if occluder_state is not None and occluder_state.size[0] > 0 and occluder_state.size[1] > 0:
        cu, cv_ = occluder_state.center
        w, h = occluder_state.size
        x0 = max(0, int(cu - w / 2))
        x1 = min(IMAGE_WIDTH, int(cu + w / 2))
        y0 = max(0, int(cv_ - h / 2))
        y1 = min(IMAGE_HEIGHT, int(cv_ + h / 2))
        if x1 > x0 and y1 > y0:
            rgb[y0:y1, x0:x1] = occluder_state.gray
            depth[y0:y1, x0:x1] = occluder_state.depth_m
            mask_visible[y0:y1, x0:x1] = False

    depth_mm = np.clip(depth * 1000.0, 0, 65535).astype(np.uint16)
    return rgb, depth_mm, mask_full, mask_visible


# ---------------------------------------------------------------------------
# Tactile synthesis


def synth_tactile(object_pose: Pose, fingertip_world_poses, assets: SceneAssets,
                  contact_model: ContactModel, epsilon: float,
                  rng: np.random.Generator | None = None) -> TactileFrame:
    """Electrode frame from fingertip/object geometry.

    A finger contacts iff its tip lies within ``epsilon`` of the model
    surface; its electrodes then deviate from baseline by
    W @ [surface normal (camera frame); penetration/epsilon].
    """
    if epsilon <= 0:
        raise InvalidArgumentError("epsilon must be positive")
    if rng is None:
        rng = np.random.default_rng(0)
    pts_cam = object_pose.apply(assets.model.points)
    R = quat_to_rotation(object_pose.orientation)
    normals_cam = assets.normals @ R.T
    electrodes = np.tile(contact_model.baseline, (NUM_FINGERS, 1))
    flags = np.zeros(NUM_FINGERS, dtype=bool)
    for f, tip in enumerate(fingertip_world_poses):
        d = np.linalg.norm(pts_cam - tip.translation, axis=1)
        j = int(np.argmin(d))
        if d[j] < epsilon:
            flags[f] = True
            penetration = max(0.0, epsilon - float(d[j]))
            electrodes[f] += contact_model.respond(normals_cam[j], penetration, epsilon)
    electrodes += rng.normal(scale=contact_model.noise_std, size=electrodes.shape)
    baseline = np.tile(contact_model.baseline, (NUM_FINGERS, 1))
    return TactileFrame(electrodes, baseline, flags)


# ---------------------------------------------------------------------------
# Schedules


def _contact_schedule(config: SceneConfig, num_frames: int, rng,
                      num_points: int) -> list:
    """Per-frame (target_count, fingers, contact point per finger).

    Piecewise constant segments; each segment re-samples which surface
    point every contacting finger touches, so fingertip kinematics alone
    never pin down the object pose the way fixed markers would.
    """
    weights = np.asarray(config.contact_weights, dtype=np.float64)
    weights = weights / weights.sum()
    schedule = []
    while len(schedule) < num_frames:
        seg = int(rng.integers(config.segment_frames[0], config.segment_frames[1] + 1))
        count = int(rng.choice(6, p=weights))
        fingers = tuple(sorted(rng.choice(NUM_FINGERS, size=count, replace=False).tolist()))
        points = {f: int(rng.integers(num_points)) for f in fingers}
        schedule.extend([(count, fingers, points)] * seg)
    return schedule[:num_frames]


def _occluder_schedule(config: SceneConfig, num_frames: int, rng) -> list:
    """Per-frame occluder scale (0 = none), piecewise ramps."""
    scales = np.zeros(num_frames)
    i = 0
    while i < num_frames:
        seg = int(rng.integers(config.segment_frames[0], config.segment_frames[1] + 1))
        seg = min(seg, num_frames - i)
        if rng.uniform() < config.occluder_fraction:
            peak = rng.uniform(*config.occluder_scale_range)
            if rng.uniform() < 0.5:
                scales[i:i + seg] = np.linspace(0.1, peak, seg)  # growing block
            else:
                scales[i:i + seg] = peak
        i += seg
    return scales.tolist()


# ---------------------------------------------------------------------------
# Full sequence / dataset generation


def generate_sequence(config: SceneConfig, num_frames: int, sequence_seed: int,
                      scenario_tag: str = "front"):
    """Generate one sequence of FrameRecords (in memory)."""
    assets = SceneAssets.build(config)
    rng = np.random.default_rng((config.seed, sequence_seed))
    traj = generate_trajectory(config, num_frames, rng)
    contacts = _contact_schedule(config, num_frames, rng, assets.model.num_points)
    occluders = _occluder_schedule(config, num_frames, rng)
    occ_gray = int(rng.integers(120, 255))

    palm_nominal = Pose(np.array([0.0, 0.13, 0.55]), Quaternion.identity())
    frames = []
    for i in range(num_frames):
        obj_pose = traj[i]
        palm = Pose(palm_nominal.translation + rng.normal(scale=0.001, size=3),
                    Quaternion.from_axis_angle(rng.normal(size=3),
                                               abs(rng.normal(scale=0.01)))
                    .multiply(palm_nominal.orientation).normalized())
        count, fingers, contact_points = contacts[i]
        tips_world = []
        pts_cam = obj_pose.apply(assets.model.points)
        for f in range(NUM_FINGERS):
            if f in fingers:
                anchor = assets.model.points[contact_points[f]]
                pos = obj_pose.apply(anchor[None])[0] + rng.normal(scale=0.001, size=3)
            else:
                pos = palm.apply(REST_OFFSETS[f][None])[0] + rng.normal(scale=0.005, size=3)
            # tip orientation is about the finger's own posture, not the
            # object: object orientation reaches the tactile channel only
            # through the electrode response to the contact normal
            ori = Quaternion.from_axis_angle(
                rng.normal(size=3), abs(rng.normal(scale=0.05))).normalized()
            tips_world.append(Pose(pos, ori))
        tactile = synth_tactile(obj_pose, tips_world, assets, assets.contact_model,
                                config.contact_epsilon, rng)

        scale = occluders[i]
        occluder = None
        if scale > 0:
            z = pts_cam[:, 2]
            u = config.fx * pts_cam[:, 0] / z + config.cx
            v = config.fy * pts_cam[:, 1] / z + config.cy
            w = (u.max() - u.min()) * scale
            h = (v.max() - v.min()) * scale
            jitter = rng.normal(scale=4.0, size=2)
            occluder = OccluderState(
                center=(float(u.mean() + jitter[0]), float(v.mean() + jitter[1])),
                size=(float(w), float(h)), gray=occ_gray)
        rgb, depth, mask_full, mask_visible = render_frame(obj_pose, occluder, assets, rng)

        palm_inv = palm.inverse()
        tips_rel = [palm_inv.compose(t) for t in tips_world]
        frames.append(FrameRecord(
            rgb=rgb, depth=depth,
            object_mask_visible=mask_visible, object_mask_full=mask_full,
            palm_pose=palm, fingertip_poses=tips_rel, tactile=tactile,
            gt_pose=obj_pose,
            occlusion_rate=compute_occlusion_rate(mask_full, mask_visible),
            contact_count=tactile.contact_count,
            object_id=config.object_id,
            scenario_tag=scenario_tag,
            timestamp=i / 30.0,
        ))
    return frames


def generate_dataset(config: SceneConfig, num_sequences: int, frames_per_sequence: int,
                     out_dir, progress: bool = False) -> list:
    """Generate and store a dataset; returns the sequence manifests."""
    if num_sequences < 1 or frames_per_sequence < 1:
        raise InvalidArgumentError("need at least one sequence and one frame")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifests = []
    sum_e = np.zeros(NUM_ELECTRODES)
    sum_e2 = np.zeros(NUM_ELECTRODES)
    count = 0
    occ_hist = np.zeros(10, dtype=int)
    contact_hist = np.zeros(6, dtype=int)
    for s in range(num_sequences):
        tag = SCENARIO_CYCLE[s % len(SCENARIO_CYCLE)]
        frames = generate_sequence(config, frames_per_sequence, sequence_seed=s + 1,
                                   scenario_tag=tag)
        seq_dir = out_dir / f"seq_{s:03d}"
        manifests.append(write_sequence(frames, seq_dir, tactile_stats=None))
        for fr in frames:
            e = fr.tactile.electrodes.reshape(-1, NUM_ELECTRODES)
            sum_e += e.sum(axis=0)
            sum_e2 += (e * e).sum(axis=0)
            count += e.shape[0]
            occ_hist[min(int(fr.occlusion_rate * 10), 9)] += 1
            contact_hist[fr.contact_count] += 1
        if progress:
            print(f"  wrote {seq_dir} ({frames_per_sequence} frames, tag={tag})")
    mean = sum_e / count
    std = np.sqrt(np.maximum(sum_e2 / count - mean * mean, 0.0))
    stats = TactileStats(mean, std)
    # second pass: record dataset-level tactile stats in every manifest
    for m in manifests:
        m.tactile_stats = stats
        with open(m.path / "manifest.json", "w") as f:
            json.dump(m.to_dict(), f, indent=2, sort_keys=True)
    summary = {
        "config": config.to_dict(),
        "num_sequences": num_sequences,
        "frames_per_sequence": frames_per_sequence,
        "occlusion_rate_hist": occ_hist.tolist(),
        "contact_count_hist": contact_hist.tolist(),
        "tactile_stats": stats.to_dict(),
    }
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return [read_manifest(m.path) for m in manifests]
