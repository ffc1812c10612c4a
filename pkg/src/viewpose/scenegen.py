"""Synthetic multi-view activity scenes with ground-truth 2D poses.

A procedure is a long, label-segmented sequence of clips.  Each segment has an
activity class, a class-dependent duration and 1..N_p animated persons whose
hidden 3D skeletons are projected through per-procedure pinhole cameras into
normalized 2D poses per view.  The cameras are never exposed outside this
module's latent API: consumers only ever see frames and 2D poses, so the
learning problem stays calibration-free.

All generation is a pure, bit-reproducible function of (config, seed).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

from .tensorio import (TensorIOError, dump_json, load_array, read_json,
                       save_array, validate_array)

# COCO-17 joint layout
JOINT_NAMES = [
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
]
NUM_COCO_JOINTS = len(JOINT_NAMES)

# (a, b) joint index pairs drawn as limb segments
SKELETON_EDGES = [
    (0, 1), (0, 2), (1, 3), (2, 4),            # head
    (5, 6), (5, 7), (7, 9), (6, 8), (8, 10),   # arms
    (5, 11), (6, 12), (11, 12),                # torso
    (11, 13), (13, 15), (12, 14), (14, 16),    # legs
]

ACTIVITY_NAMES = [
    "idle", "walk", "bend_over_table", "arms_raised", "handoff", "cart_push",
]

# Persons stay inside this square (world meters, centered on the room origin)
AREA_HALF = 1.2
FPS = 8.0

_PALETTE = np.array([
    [0.90, 0.10, 0.10], [0.10, 0.35, 0.95], [0.95, 0.75, 0.10],
    [0.10, 0.80, 0.30], [0.80, 0.15, 0.85], [0.95, 0.45, 0.05],
    [0.05, 0.80, 0.85], [0.90, 0.30, 0.55],
], dtype=np.float64)


@dataclass
class SceneConfig:
    """Knobs for the synthetic scene generator."""

    num_views: int = 4
    num_joints: int = NUM_COCO_JOINTS
    max_persons: int = 8
    clip_len: int = 8
    frame_size: Tuple[int, int] = (64, 64)  # (H, W)
    num_classes: int = 6
    noise_std: float = 0.0
    occlusion_prob: float = 0.0
    seed: int = 0
    imbalance_ratio: float = 3.0   # expected longest/shortest class duration
    segment_rounds: int = 2        # each class appears this many times per procedure
    base_segment_clips: int = 4    # clips per segment for the shortest class

    def __post_init__(self):
        if self.num_views < 1:
            raise ValueError(f"num_views must be >= 1, got {self.num_views}")
        if self.max_persons < 1:
            raise ValueError(f"max_persons must be >= 1, got {self.max_persons}")
        if self.clip_len < 1:
            raise ValueError(f"clip_len must be >= 1, got {self.clip_len}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.occlusion_prob < 1.0:
            raise ValueError(f"occlusion_prob must be in [0, 1), got {self.occlusion_prob}")
        if self.noise_std < 0.0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.imbalance_ratio < 1.0:
            raise ValueError(f"imbalance_ratio must be >= 1, got {self.imbalance_ratio}")
        if self.num_joints != NUM_COCO_JOINTS:
            raise ValueError(f"only the {NUM_COCO_JOINTS}-joint layout is supported")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["frame_size"] = list(self.frame_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        d["frame_size"] = tuple(d["frame_size"])
        return cls(**d)


@dataclass
class LatentSkeleton:
    """Hidden 3D state of one person over one segment (never shown to models)."""

    joints3d: np.ndarray  # (frames, N_j, 3) world meters
    person_id: int
    activity: int


@dataclass
class Camera:
    """Hidden pinhole camera: world -> normalized image coordinates."""

    position: np.ndarray  # (3,)
    rotation: np.ndarray  # (3, 3), rows = right / down / forward
    focal: float          # normalized focal length
    near: float = 0.2


@dataclass
class MultiViewClip:
    frames: np.ndarray     # (C, T, 3, H, W) float32 in [0, 1]
    poses2d: np.ndarray    # (C, T, N_p, 2, N_j) float32, normalized coords
    validity: np.ndarray   # (C, T, N_p, N_j) bool
    track_ids: np.ndarray  # (C, T, N_p) int32, -1 = absent
    label: int
    procedure_id: int
    clip_index: int


@dataclass
class Segment:
    start: int  # first clip index (inclusive)
    end: int    # last clip index (exclusive)
    label: int


@dataclass
class ProcedureManifest:
    procedure_id: int
    num_clips: int
    segments: List[Segment]
    class_durations: Dict[int, int]  # class -> total clips

    def to_dict(self) -> dict:
        return {
            "procedure_id": self.procedure_id,
            "num_clips": self.num_clips,
            "segments": [[s.start, s.end, s.label] for s in self.segments],
            "class_durations": {str(k): v for k, v in self.class_durations.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProcedureManifest":
        return cls(
            procedure_id=d["procedure_id"],
            num_clips=d["num_clips"],
            segments=[Segment(*s) for s in d["segments"]],
            class_durations={int(k): v for k, v in d["class_durations"].items()},
        )


# ---------------------------------------------------------------------------
# Skeleton template and motion signatures
# ---------------------------------------------------------------------------

def _template_skeleton() -> np.ndarray:
    """Standing rest pose in the person-local frame (x forward, y left, z up)."""
    t = np.zeros((NUM_COCO_JOINTS, 3))
    t[0] = (0.09, 0.00, 1.62)   # nose
    t[1] = (0.08, 0.04, 1.66)
    t[2] = (0.08, -0.04, 1.66)
    t[3] = (0.02, 0.08, 1.63)
    t[4] = (0.02, -0.08, 1.63)
    t[5] = (0.00, 0.19, 1.45)   # shoulders
    t[6] = (0.00, -0.19, 1.45)
    t[7] = (0.00, 0.23, 1.18)   # elbows
    t[8] = (0.00, -0.23, 1.18)
    t[9] = (0.00, 0.25, 0.92)   # wrists
    t[10] = (0.00, -0.25, 0.92)
    t[11] = (0.00, 0.13, 0.95)  # hips
    t[12] = (0.00, -0.13, 0.95)
    t[13] = (0.02, 0.14, 0.50)  # knees
    t[14] = (0.02, -0.14, 0.50)
    t[15] = (0.04, 0.15, 0.08)  # ankles
    t[16] = (0.04, -0.15, 0.08)
    return t


_UPPER_BODY = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10]
_HIP_HEIGHT = 0.95

_LEFT_LEG = [13, 15]
_RIGHT_LEG = [14, 16]
_LEFT_ARM = [7, 9]
_RIGHT_ARM = [8, 10]


def _pitch_upper_body(local: np.ndarray, angle: float) -> None:
    """Rotate upper-body joints forward/down about the hip line (in place)."""
    c, s = np.cos(angle), np.sin(angle)
    pts = local[_UPPER_BODY]
    x = pts[:, 0]
    z = pts[:, 2] - _HIP_HEIGHT
    pts[:, 0] = c * x + s * z
    pts[:, 2] = -s * x + c * z + _HIP_HEIGHT
    local[_UPPER_BODY] = pts


def _leg_swing(local: np.ndarray, phase: float, amp: float) -> None:
    s = amp * np.sin(phase)
    local[_LEFT_LEG, 0] += s * np.array([0.6, 1.0])
    local[_RIGHT_LEG, 0] -= s * np.array([0.6, 1.0])
    lift = 0.05 * amp / 0.28
    local[15, 2] += lift * max(0.0, np.sin(phase))
    local[16, 2] += lift * max(0.0, -np.sin(phase))


def _arm_swing(local: np.ndarray, phase: float, amp: float) -> None:
    s = amp * np.sin(phase)
    local[_LEFT_ARM, 0] -= s * np.array([0.5, 1.0])
    local[_RIGHT_ARM, 0] += s * np.array([0.5, 1.0])


def _pose_at(activity: str, t: float, params: dict) -> Tuple[np.ndarray, np.ndarray, float]:
    """Local joint layout, root xy offset and yaw of one person at time ``t``.

    ``params`` holds the per-person randomized motion parameters drawn once per
    segment (phase, speed, amplitude scale, heading, role, anchor).
    """
    local = _template_skeleton()
    phase = params["phase"]
    amp = params["amp"]
    yaw = params["yaw"]
    root = np.zeros(2)

    if activity == "idle":
        sway = 0.02 * amp * np.sin(2 * np.pi * 0.4 * t + phase)
        root[1] += sway
        local[_UPPER_BODY, 2] += 0.006 * np.sin(2 * np.pi * 0.25 * t + phase)
    elif activity == "walk":
        step = 2 * np.pi * params["step_hz"] * t + phase
        dist = params["speed"] * t
        root[0] += dist
        _leg_swing(local, step, 0.28 * amp)
        _arm_swing(local, step, 0.22 * amp)
        local[:, 2] += 0.02 * amp * np.abs(np.sin(step))
    elif activity == "bend_over_table":
        bend = (0.75 + 0.30 * np.sin(2 * np.pi * 0.3 * t + phase)) * amp
        _pitch_upper_body(local, bend)
        # arms reach forward-down toward the work surface
        local[[7, 8], 0] += 0.18
        local[[9, 10], 0] += 0.38
        local[[9, 10], 2] -= 0.12
    elif activity == "arms_raised":
        lift = 0.70 + 0.12 * amp * np.sin(2 * np.pi * 1.0 * t + phase)
        for elbow, wrist in ((7, 9), (8, 10)):
            local[elbow, 2] = 1.45 + 0.28 * lift
            local[elbow, 0] += 0.06
            local[wrist, 2] = 1.45 + 0.62 * lift
            local[wrist, 0] += 0.10 * np.sin(2 * np.pi * 0.9 * t + phase)
        root[1] += 0.015 * np.sin(2 * np.pi * 0.3 * t + phase)
    elif activity == "handoff":
        # anti-phase arm extension between the two roles; the arm stays
        # partially extended at shoulder height through the whole cycle
        role = params["role"]
        reach = 0.55 + 0.45 * np.sin(2 * np.pi * 0.45 * t + phase + role * np.pi)
        arm = (7, 9) if role == 0 else (8, 10)
        local[arm[0], 0] += 0.10 + 0.16 * reach
        local[arm[0], 2] += 0.12 + 0.08 * reach
        local[arm[1], 0] += 0.20 + 0.34 * reach
        local[arm[1], 2] += 0.28 + 0.14 * reach
        _pitch_upper_body(local, 0.08 * reach)
    elif activity == "cart_push":
        step = 2 * np.pi * params["step_hz"] * t + phase
        root[0] += params["speed"] * t
        _leg_swing(local, step, 0.20 * amp)
        # both arms locked forward on the cart handle
        local[[7, 8], 0] += 0.28
        local[[7, 8], 2] -= 0.10
        local[[9, 10], 0] += 0.52
        local[[9, 10], 2] += 0.12
        _pitch_upper_body(local, 0.18)
    else:
        raise ValueError(f"unknown activity '{activity}'")

    return local, root, yaw


def _reflect_into_area(x: np.ndarray) -> np.ndarray:
    """Fold a coordinate back into [-AREA_HALF, AREA_HALF] (billiard reflection)."""
    span = 2 * AREA_HALF
    y = np.mod(x + AREA_HALF, 2 * span)
    y = np.where(y > span, 2 * span - y, y)
    return y - AREA_HALF


def animate_person(activity_idx: int, num_frames: int, params: dict) -> np.ndarray:
    """World-frame joint trajectory (num_frames, N_j, 3) for one person."""
    activity = ACTIVITY_NAMES[activity_idx]
    anchor = params["anchor"]
    out = np.empty((num_frames, NUM_COCO_JOINTS, 3))
    cy, sy = np.cos(params["yaw"]), np.sin(params["yaw"])
    rot = np.array([[cy, -sy], [sy, cy]])
    for f in range(num_frames):
        t = f / FPS
        local, root, _ = _pose_at(activity, t, params)
        xy = local[:, :2] @ rot.T
        world_root = anchor + rot @ root
        world_root = _reflect_into_area(world_root)
        out[f, :, 0] = xy[:, 0] + world_root[0]
        out[f, :, 1] = xy[:, 1] + world_root[1]
        out[f, :, 2] = local[:, 2]
    return out


def _sample_motion_params(rng: np.random.Generator, activity_idx: int,
                          slot: int, count: int) -> dict:
    params = {
        "phase": rng.uniform(0, 2 * np.pi),
        "amp": rng.uniform(0.8, 1.2),
        "yaw": rng.uniform(0, 2 * np.pi),
        "speed": rng.uniform(0.35, 0.65),
        "step_hz": rng.uniform(1.2, 1.8),
        "role": slot % 2,
        "anchor": rng.uniform(-AREA_HALF * 0.8, AREA_HALF * 0.8, size=2),
    }
    activity = ACTIVITY_NAMES[activity_idx]
    if activity == "handoff" and count >= 2:
        # the first two roles face each other across a short gap
        center = rng.uniform(-AREA_HALF * 0.5, AREA_HALF * 0.5, size=2)
        facing = rng.uniform(0, 2 * np.pi)
        offset = 0.6 * np.array([np.cos(facing), np.sin(facing)])
        if slot == 0:
            params["anchor"] = center - offset
            params["yaw"] = facing
        elif slot == 1:
            params["anchor"] = center + offset
            params["yaw"] = facing + np.pi
    if activity == "bend_over_table":
        # bend near a fixed table spot, facing it
        table = np.array([0.35, -0.25])
        offset_dir = rng.uniform(0, 2 * np.pi)
        params["anchor"] = table + 0.45 * np.array([np.cos(offset_dir), np.sin(offset_dir)])
        to_table = table - params["anchor"]
        params["yaw"] = np.arctan2(to_table[1], to_table[0])
    return params


# ---------------------------------------------------------------------------
# Cameras and projection
# ---------------------------------------------------------------------------

def _look_at(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    n = np.linalg.norm(right)
    if n < 1e-6:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / n
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


def sample_cameras(config: SceneConfig, rng: np.random.Generator) -> List[Camera]:
    """Fixed per-procedure rig: ring of side views plus one near-overhead view.

    The overhead camera is always the last view, mirroring rigs where one
    ceiling camera gives a quasi-bird's-eye perspective.
    """
    cams = []
    num_side = config.num_views - 1
    for i in range(num_side):
        az = 2 * np.pi * i / max(num_side, 1) + rng.uniform(-0.25, 0.25)
        radius = rng.uniform(3.2, 3.6)
        height = rng.uniform(1.6, 2.2)
        pos = np.array([radius * np.cos(az), radius * np.sin(az), height])
        target = np.array([0.0, 0.0, 0.9]) + rng.uniform(-0.08, 0.08, size=3)
        cams.append(Camera(pos, _look_at(pos, target), focal=rng.uniform(0.72, 0.80)))
    over_pos = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2),
                         rng.uniform(4.3, 4.7)])
    over_target = np.array([0.0, 0.0, 0.5]) + rng.uniform(-0.05, 0.05, size=3)
    cams.append(Camera(over_pos, _look_at(over_pos, over_target),
                       focal=rng.uniform(0.55, 0.62)))
    if config.num_views == 1:
        cams = cams[-1:]  # degenerate rig keeps only the overhead view
    return cams


def project_points(points: np.ndarray, camera: Camera) -> Tuple[np.ndarray, np.ndarray]:
    """Project (..., 3) world points to normalized [0,1]^2 image coordinates.

    Points behind the near plane or outside the frame are marked invalid;
    degenerate geometry never raises.
    """
    rel = points - camera.position
    cam = rel @ camera.rotation.T
    z = cam[..., 2]
    safe_z = np.where(np.abs(z) < 1e-9, 1e-9, z)
    u = 0.5 + camera.focal * cam[..., 0] / safe_z
    v = 0.5 + camera.focal * cam[..., 1] / safe_z
    uv = np.stack([u, v], axis=-1)
    valid = (z > camera.near) & (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (v <= 1.0)
    uv = np.clip(np.where(valid[..., None], uv, 0.0), 0.0, 1.0)
    return uv, valid


def project_to_views(skeletons: Sequence[LatentSkeleton],
                     cameras: Sequence[Camera],
                     max_persons: int) -> Tuple[np.ndarray, np.ndarray]:
    """Project hidden skeletons into every view.

    Returns poses (C, F, N_p, 2, N_j) and validity (C, F, N_p, N_j); person
    slots beyond ``len(skeletons)`` stay invalid.
    """
    if not skeletons:
        raise ValueError("need at least one skeleton")
    num_frames = skeletons[0].joints3d.shape[0]
    n_j = skeletons[0].joints3d.shape[1]
    C = len(cameras)
    poses = np.zeros((C, num_frames, max_persons, 2, n_j), dtype=np.float64)
    valid = np.zeros((C, num_frames, max_persons, n_j), dtype=bool)
    for c, cam in enumerate(cameras):
        for s, skel in enumerate(skeletons[:max_persons]):
            uv, ok = project_points(skel.joints3d, cam)  # (F, N_j, 2), (F, N_j)
            poses[c, :, s] = uv.transpose(0, 2, 1)
            valid[c, :, s] = ok
    return poses, valid


def corrupt_poses(poses: np.ndarray, validity: np.ndarray, noise_std: float,
                  occlusion_prob: float, seed) -> Tuple[np.ndarray, np.ndarray]:
    """Jitter valid joints with Gaussian noise and drop them independently.

    Pure function of its arguments; output coordinates are clipped to [0, 1].
    """
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    rng = np.random.default_rng(seed)
    out = poses.copy()
    out_valid = validity.copy()
    if noise_std > 0:
        # poses layout (..., 2, N_j) broadcast against validity (..., N_j)
        noise = rng.normal(0.0, noise_std, size=poses.shape)
        out = np.clip(out + noise * np.expand_dims(validity, -2), 0.0, 1.0)
    if occlusion_prob > 0:
        drop = rng.random(validity.shape) < occlusion_prob
        out_valid = out_valid & ~drop
    return out, out_valid


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

_GRID_CACHE: dict = {}


def _pixel_grid(h: int, w: int):
    if (h, w) not in _GRID_CACHE:
        yy, xx = np.mgrid[0:h, 0:w]
        _GRID_CACHE[(h, w)] = (yy.astype(np.float64), xx.astype(np.float64))
    return _GRID_CACHE[(h, w)]


def make_background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth deterministic texture, (H, W, 3) float in [0.2, 0.5]."""
    yy, xx = _pixel_grid(h, w)
    bg = np.empty((h, w, 3))
    for ch in range(3):
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        wave = (np.sin(2 * np.pi * fx * xx / w + phase[0])
                + np.sin(2 * np.pi * fy * yy / h + phase[1]))
        bg[..., ch] = 0.33 + 0.05 * wave + rng.uniform(-0.02, 0.02)
    return np.clip(bg, 0.2, 0.5)


def render_view_frames(poses: np.ndarray, validity: np.ndarray,
                       track_ids: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Render (T, 3, H, W) frames for one view.

    Persons are drawn as joint blobs plus limb segments in a fixed per-person
    color over the background.  Output is float32 in [0, 1], quantized to
    1/255 steps so uint8 storage would round-trip exactly.
    """
    T, n_p = poses.shape[0], poses.shape[1]
    h, w = background.shape[:2]
    yy, xx = _pixel_grid(h, w)
    joint_r2 = max(1.0, h / 36.0) ** 2
    limb_r2 = max(0.8, h / 52.0) ** 2
    frames = np.empty((T, 3, h, w), dtype=np.float32)
    for t in range(T):
        img = background.copy()
        for s in range(n_p):
            if track_ids[t, s] < 0 or not validity[t, s].any():
                continue
            color = _PALETTE[track_ids[t, s] % len(_PALETTE)]
            px = poses[t, s, 0] * (w - 1)
            py = poses[t, s, 1] * (h - 1)
            ok = validity[t, s]
            mask = np.zeros((h, w), dtype=bool)
            for a, b in SKELETON_EDGES:
                if not (ok[a] and ok[b]):
                    continue
                pax, pay, pbx, pby = px[a], py[a], px[b], py[b]
                dx, dy = pbx - pax, pby - pay
                seg2 = dx * dx + dy * dy
                if seg2 < 1e-12:
                    continue
                tt = np.clip(((xx - pax) * dx + (yy - pay) * dy) / seg2, 0.0, 1.0)
                d2 = (xx - (pax + tt * dx)) ** 2 + (yy - (pay + tt * dy)) ** 2
                mask |= d2 <= limb_r2
            for j in range(poses.shape[3]):
                if ok[j]:
                    mask |= (xx - px[j]) ** 2 + (yy - py[j]) ** 2 <= joint_r2
            img[mask] = color
        frames[t] = np.round(img * 255.0).astype(np.float32).transpose(2, 0, 1) / 255.0
    return frames


# ---------------------------------------------------------------------------
# Procedure generation
# ---------------------------------------------------------------------------

@dataclass
class ProcedureLatent:
    """Hidden state behind one procedure; test fixtures only, never serialized."""

    cameras: List[Camera]
    segments: List[Segment]
    skeletons: List[List[LatentSkeleton]]  # per segment


def _plan_segments(config: SceneConfig, rng: np.random.Generator) -> List[Tuple[int, int]]:
    """Ordered (label, duration_clips) list with class-dependent durations.

    Every class appears once per round; a per-round jitter shared by all
    classes keeps the realized duration ratio monotone in
    ``imbalance_ratio``.
    """
    K = config.num_classes
    ratio = config.imbalance_ratio
    mult = 1.0 + (ratio - 1.0) * np.arange(K) / (K - 1)
    plan: List[Tuple[int, int]] = []
    prev = -1
    for _ in range(config.segment_rounds):
        order = list(rng.permutation(K))
        if order[0] == prev and K > 1:
            order[0], order[1] = order[1], order[0]
        g = rng.uniform(0.8, 1.2)
        for label in order:
            dur = max(1, int(round(config.base_segment_clips * mult[label] * g)))
            plan.append((int(label), dur))
            prev = label
    return plan


def _generate(config: SceneConfig, seed: int):
    if config.num_classes > len(ACTIVITY_NAMES):
        raise ValueError(
            f"num_classes={config.num_classes} exceeds the motion catalog "
            f"({len(ACTIVITY_NAMES)} activities)"
        )
    rng = np.random.default_rng([config.seed & 0x7FFFFFFF, seed & 0x7FFFFFFF])
    cameras = sample_cameras(config, rng)
    h, w = config.frame_size
    backgrounds = [make_background(h, w, rng) for _ in range(config.num_views)]
    plan = _plan_segments(config, rng)

    T = config.clip_len
    segments: List[Segment] = []
    seg_skeletons: List[List[LatentSkeleton]] = []
    clips: List[MultiViewClip] = []
    class_durations: Dict[int, int] = {k: 0 for k in range(config.num_classes)}
    next_person_id = 0
    clip_cursor = 0

    for label, dur_clips in plan:
        n_frames = dur_clips * T
        count = int(rng.integers(1, config.max_persons + 1))
        if ACTIVITY_NAMES[label] == "handoff":
            count = max(count, min(2, config.max_persons))
        skels = []
        for slot in range(count):
            params = _sample_motion_params(rng, label, slot, count)
            joints = animate_person(label, n_frames, params)
            skels.append(LatentSkeleton(joints, next_person_id, label))
            next_person_id += 1
        seg_skeletons.append(skels)
        segments.append(Segment(clip_cursor, clip_cursor + dur_clips, label))
        class_durations[label] += dur_clips

        poses_all, valid_all = project_to_views(skels, cameras, config.max_persons)
        for k in range(dur_clips):
            sl = slice(k * T, (k + 1) * T)
            poses = poses_all[:, sl]        # (C, T, N_p, 2, N_j)
            valid = valid_all[:, sl]
            # a slot is tracked in a view iff any joint is visible in the clip
            track = np.full((config.num_views, T, config.max_persons), -1, dtype=np.int32)
            for c in range(config.num_views):
                for s, skel in enumerate(skels):
                    if valid[c, :, s].any():
                        track[c, :, s] = skel.person_id
            frames = np.empty((config.num_views, T, 3, h, w), dtype=np.float32)
            for c in range(config.num_views):
                frames[c] = render_view_frames(poses[c], valid[c], track[c],
                                               backgrounds[c])
            if config.noise_std > 0 or config.occlusion_prob > 0:
                clip_seed = [config.seed & 0x7FFFFFFF, seed & 0x7FFFFFFF, clip_cursor]
                poses, valid = corrupt_poses(poses, valid, config.noise_std,
                                             config.occlusion_prob, clip_seed)
            clips.append(MultiViewClip(
                frames=frames,
                poses2d=poses.astype(np.float32),
                validity=valid,
                track_ids=track,
                label=label,
                procedure_id=seed,
                clip_index=clip_cursor,
            ))
            clip_cursor += 1

    manifest = ProcedureManifest(
        procedure_id=seed,
        num_clips=clip_cursor,
        segments=segments,
        class_durations=class_durations,
    )
    latent = ProcedureLatent(cameras, segments, seg_skeletons)
    return manifest, clips, latent


def generate_procedure(config: SceneConfig, seed: int):
    """Generate one procedure: (manifest, clips).

    Bit-identical for identical (config, seed); independent of any other
    procedure, so datasets can be generated in parallel per procedure.
    """
    manifest, clips, _ = _generate(config, seed)
    return manifest, clips


def procedure_latent(config: SceneConfig, seed: int) -> ProcedureLatent:
    """Regenerate the hidden 3D skeletons and cameras behind a procedure."""
    _, _, latent = _generate(config, seed)
    return latent


# ---------------------------------------------------------------------------
# Dataset directory
# ---------------------------------------------------------------------------

_CLIP_FIELDS = ("frames", "poses", "validity", "tracks", "labels")


class SceneDataset:
    """Loaded dataset: manifest plus lazily-read per-procedure tensors."""

    def __init__(self, root: str, manifest: dict):
        self.root = root
        self.manifest = manifest
        self.config = SceneConfig.from_dict(manifest["config"])
        self.class_names = manifest["class_names"]
        self.procedures = {
            int(p["procedure_id"]): ProcedureManifest.from_dict(p)
            for p in manifest["procedures"]
        }
        self.splits: Dict[str, List[int]] = {
            k: list(v) for k, v in manifest["splits"].items()
        }
        self._cache: Dict[int, Dict[str, np.ndarray]] = {}

    def _proc_dir(self, proc_id: int) -> str:
        return os.path.join(self.root, f"proc_{proc_id:04d}")

    def _tensors(self, proc_id: int) -> Dict[str, np.ndarray]:
        if proc_id not in self._cache:
            d = self._proc_dir(proc_id)
            self._cache[proc_id] = {f: load_array(os.path.join(d, f))
                                    for f in _CLIP_FIELDS}
        return self._cache[proc_id]

    def clip_ids(self, split: str) -> List[Tuple[int, int]]:
        """All (procedure_id, clip_index) pairs of a split, in timeline order."""
        out = []
        for pid in self.splits[split]:
            out.extend((pid, i) for i in range(self.procedures[pid].num_clips))
        return out

    def num_clips(self, split: str) -> int:
        return sum(self.procedures[p].num_clips for p in self.splits[split])

    def get_clip(self, proc_id: int, clip_index: int) -> MultiViewClip:
        t = self._tensors(proc_id)
        return MultiViewClip(
            frames=t["frames"][clip_index],
            poses2d=t["poses"][clip_index],
            validity=t["validity"][clip_index].astype(bool),
            track_ids=t["tracks"][clip_index],
            label=int(t["labels"][clip_index]),
            procedure_id=proc_id,
            clip_index=clip_index,
        )

    def labels(self, split: str) -> np.ndarray:
        return np.array([self.get_clip(p, i).label for p, i in self.clip_ids(split)],
                        dtype=np.int64)


def serialize_dataset(path: str, config: SceneConfig,
                      procedures: Sequence[Tuple[ProcedureManifest, List[MultiViewClip]]],
                      splits: Dict[str, List[int]]) -> None:
    """Write a dataset directory: per-procedure tensor files plus manifest."""
    os.makedirs(path, exist_ok=True)
    total = sum(m.num_clips for m, _ in procedures)
    split_total = sum(
        sum(next(m.num_clips for m, _ in procedures if m.procedure_id == pid)
            for pid in pids)
        for pids in splits.values()
    )
    if split_total != total:
        raise ValueError(f"splits cover {split_total} clips, dataset has {total}")
    for man, clips in procedures:
        d = os.path.join(path, f"proc_{man.procedure_id:04d}")
        os.makedirs(d, exist_ok=True)
        save_array(os.path.join(d, "frames"),
                   np.stack([c.frames for c in clips]))
        save_array(os.path.join(d, "poses"),
                   np.stack([c.poses2d for c in clips]))
        save_array(os.path.join(d, "validity"),
                   np.stack([c.validity for c in clips]).astype(np.uint8))
        save_array(os.path.join(d, "tracks"),
                   np.stack([c.track_ids for c in clips]))
        save_array(os.path.join(d, "labels"),
                   np.array([c.label for c in clips], dtype=np.int32))
    manifest = {
        "format_version": 1,
        "config": config.to_dict(),
        "class_names": ACTIVITY_NAMES[:config.num_classes],
        "procedures": [m.to_dict() for m, _ in procedures],
        "splits": {k: list(v) for k, v in splits.items()},
    }
    dump_json(os.path.join(path, "manifest.json"), manifest)


def load_dataset(path: str) -> SceneDataset:
    """Open a dataset directory, validating the manifest and tensor sidecars."""
    manifest_path = os.path.join(path, "manifest.json")
    manifest = read_json(manifest_path)
    for key in ("config", "procedures", "splits", "class_names"):
        if key not in manifest:
            raise TensorIOError(f"manifest {manifest_path} missing key '{key}'")
    ds = SceneDataset(path, manifest)
    total = sum(m.num_clips for m in ds.procedures.values())
    split_total = sum(ds.num_clips(s) for s in ds.splits)
    if split_total != total:
        raise TensorIOError(
            f"manifest {manifest_path}: split clip counts sum to {split_total}, "
            f"dataset has {total}"
        )
    for pid in ds.procedures:
        d = ds._proc_dir(pid)
        for f in _CLIP_FIELDS:
            validate_array(os.path.join(d, f))
    return ds


def build_dataset(config: SceneConfig, num_procedures: int, out_path: str,
                  split_fractions: Dict[str, float] | None = None) -> SceneDataset:
    """Generate ``num_procedures`` procedures and write a split dataset.

    Splits are assigned at procedure granularity so no procedure leaks across
    train/val/test.
    """
    if split_fractions is None:
        split_fractions = {"train": 0.7, "val": 0.1, "test": 0.2}
    procedures = [generate_procedure(config, i) for i in range(num_procedures)]
    order = np.random.default_rng(config.seed).permutation(num_procedures)
    splits: Dict[str, List[int]] = {}
    start = 0
    names = list(split_fractions)
    for i, name in enumerate(names):
        if i == len(names) - 1:
            chunk = order[start:]
        else:
            n = int(round(split_fractions[name] * num_procedures))
            chunk = order[start:start + n]
            start += n
        splits[name] = sorted(int(p) for p in chunk)
    serialize_dataset(out_path, config, procedures, splits)
    return load_dataset(out_path)
