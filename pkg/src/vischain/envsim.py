"""Deterministic toy environments: planar arms, multi-view rendering,
scripted demonstrations, and the episode dataset format.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import robot_model as rm
from .autograd import seed_rng
from .camera import CameraModel, ImagePolyline, project_chain, project_point
from .pointset_ot import sample_chain_points
from .transforms import Transform, look_at

COLORS = ("red", "green", "blue")
COLOR_RGB = {"red": (255, 0, 0), "green": (0, 255, 0), "blue": (0, 0, 255)}
BACKGROUND = (20, 20, 20)
TARGET_RADIUS_PX = 4
LINE_HALF_WIDTH = 1  # 2 px lines

ROBOT_VARIANTS = ("planar3", "planar4")
_LINK_LENGTHS = {"planar3": (0.5, 0.4, 0.3), "planar4": (0.4, 0.35, 0.3, 0.25)}
_JOINT_LIMIT = 2.9
_HOME_CONFIG = {"planar3": (0.3, 0.4, 0.4), "planar4": (0.3, 0.3, 0.3, 0.3)}

IMAGE_SIZE = 64
_FOCAL = 60.0
_CANONICAL_CAMERAS = (
    ("front", (2.3, 0.0, 1.5)),
    ("left", (0.0, 2.3, 1.5)),
    ("right", (0.0, -2.3, 1.5)),
    ("top", (0.0, 0.0, 2.6)),
)

DATASET_FORMAT_VERSION = 1
_EP_MAGIC = b"VKCH"


class WorldGenError(Exception):
    pass


class IKError(Exception):
    pass


class DatasetError(Exception):
    pass


def make_chain(variant: str) -> rm.KinematicChain:
    """Planar arm with revolute z-axis joints in the z=0 plane."""
    lengths = _LINK_LENGTHS[variant]
    joints, links = [], []
    offset = 0.0
    for i, length in enumerate(lengths):
        joints.append(rm.JointSpec(
            name=f"j{i}", kind=rm.REVOLUTE, axis=np.array([0.0, 0.0, 1.0]),
            origin=Transform(trans=(offset, 0.0, 0.0)),
            limits=(-_JOINT_LIMIT, _JOINT_LIMIT),
            origin_xyz=(offset, 0.0, 0.0)))
        links.append(rm.LinkSpec(
            name=f"l{i}", segment=np.array([[0.0, 0.0, 0.0], [length, 0.0, 0.0]])))
        offset = length
    return rm.KinematicChain(tuple(joints), tuple(links))


def max_reach(variant: str) -> float:
    return float(sum(_LINK_LENGTHS[variant]))


def home_config(variant: str) -> np.ndarray:
    return np.array(_HOME_CONFIG[variant], dtype=np.float64)


def canonical_cameras(n_views: int):
    if not 1 <= n_views <= len(_CANONICAL_CAMERAS):
        raise WorldGenError(f"n_views must be 1..{len(_CANONICAL_CAMERAS)}, got {n_views}")
    cams = []
    for _, pos in _CANONICAL_CAMERAS[:n_views]:
        cams.append(CameraModel(
            fx=_FOCAL, fy=_FOCAL, cx=IMAGE_SIZE / 2, cy=IMAGE_SIZE / 2,
            width=IMAGE_SIZE, height=IMAGE_SIZE,
            pose=look_at(pos, (0.0, 0.0, 0.0))))
    return tuple(cams)


@dataclass(frozen=True)
class World:
    robot: rm.KinematicChain
    robot_variant: str
    targets: tuple  # of (position (3,), color name)
    cameras: tuple  # of CameraModel
    bounds: tuple = ((-1.4, -1.4, -0.1), (1.4, 1.4, 0.6))


@dataclass(frozen=True)
class Task:
    instruction_id: int  # index into COLORS: "reach the <color> target"
    target_index: int


@dataclass(frozen=True)
class Episode:
    world: World
    task: Task
    configs: np.ndarray      # (H, dof)
    actions: np.ndarray      # (H, dof); actions[t] = configs[t+1] - configs[t], last row 0
    images: np.ndarray       # (H, V, S, S, 3) uint8
    point_sets: np.ndarray   # (H, V, N_points, 2) normalized image units

    @property
    def horizon(self):
        return len(self.configs)


def generate_world(seed: int, robot_variant: str, n_views: int) -> World:
    """Three colored targets in the reach annulus, deterministic in seed."""
    if robot_variant not in ROBOT_VARIANTS:
        raise WorldGenError(f"unknown robot variant {robot_variant!r}")
    rng = seed_rng(seed, f"world-{robot_variant}")
    lmax = max_reach(robot_variant)
    r_lo, r_hi = 0.3 * lmax, 0.95 * lmax
    targets = []
    attempts = 0
    while len(targets) < len(COLORS):
        if attempts > 1000:
            raise WorldGenError("target rejection sampling exceeded 1000 attempts")
        attempts += 1
        r = np.sqrt(rng.uniform(r_lo ** 2, r_hi ** 2))
        theta = rng.uniform(-np.pi, np.pi)
        pos = np.array([r * np.cos(theta), r * np.sin(theta), 0.0])
        if all(np.linalg.norm(pos - t) >= 0.1 for t, _ in targets):
            targets.append((pos, COLORS[len(targets)]))
    return World(robot=make_chain(robot_variant), robot_variant=robot_variant,
                 targets=tuple(targets), cameras=canonical_cameras(n_views))


def _dls_ik(chain, q_start, target, damping, max_iters, tol):
    q = np.asarray(q_start, dtype=np.float64).copy()
    for _ in range(max_iters):
        err = target - rm.end_effector(chain, q)
        if np.linalg.norm(err) < tol:
            return q
        J = rm.position_jacobian(chain, q)
        dq = J.T @ np.linalg.solve(J @ J.T + damping ** 2 * np.eye(3), err)
        q, _ = chain.clamp_config(q + dq)
    if np.linalg.norm(target - rm.end_effector(chain, q)) < tol:
        return q
    return None


def solve_ik(chain, q_start, target, damping=1e-2, max_iters=200, tol=1e-4):
    """Damped least squares IK for the end-effector position.

    Plain gradient-following DLS gets stuck behind joint limits for a large
    fraction of targets, so after a failed solve from q_start the search
    restarts from a fixed list of seeds that point the base joint at the
    target with the elbows slightly bent (bending breaks the straight-arm
    singularity). The seed list is deterministic, so for a given chain and
    target the returned solution is canonical.
    """
    target = np.asarray(target, dtype=np.float64)
    q = _dls_ik(chain, q_start, target, damping, max_iters, tol)
    if q is not None:
        return q
    azimuth = float(np.arctan2(target[1], target[0]))
    for bend in (0.3, -0.3, 1.0, -1.0):
        seed = np.full(chain.dof, bend, dtype=np.float64)
        seed[0] = azimuth
        seed, _ = chain.clamp_config(seed)
        q = _dls_ik(chain, seed, target, damping, max_iters, tol)
        if q is not None:
            return q
    raise IKError(f"IK did not converge to {target.tolist()}")


def scripted_policy(world: World, task: Task, H: int, q0=None) -> np.ndarray:
    """H joint configs linearly interpolated from the start to the IK solution."""
    if q0 is None:
        q0 = home_config(world.robot_variant)
    q0 = np.asarray(q0, dtype=np.float64)
    target = world.targets[task.target_index][0]
    # the IK goal is always solved from home so every demonstration for a
    # given (world, target) pair shares one canonical goal config; demos
    # from different starts then all point toward the same attractor and
    # their conditional mean is a contracting action field
    q_goal = solve_ik(world.robot, home_config(world.robot_variant), target)
    alphas = np.linspace(0.0, 1.0, H)[:, None]
    return q0[None, :] * (1 - alphas) + q_goal[None, :] * alphas


def random_start_config(chain: rm.KinematicChain, rng) -> np.ndarray:
    """A start drawn uniformly within (slightly shrunk) joint limits.

    Demonstrations from diverse starts give the cloned policy corrective
    structure: wherever a rollout drifts, nearby demonstrations point back
    toward the goal. Demos from a single fixed start provide no such
    feedback and compound their errors.
    """
    lo = np.array([j.limits[0] for j in chain.joints if j.kind != rm.FIXED])
    hi = np.array([j.limits[1] for j in chain.joints if j.kind != rm.FIXED])
    # the full limit range matters: deployment rollouts that drift against a
    # joint stop can only be pulled back if demos cover the boundary shell
    return lo + (hi - lo) * rng.uniform(0.0, 1.0, size=lo.shape)


def goal_centered_start(chain: rm.KinematicChain, q_goal, rng,
                        sigma_lo=0.05, sigma_hi=2.0) -> np.ndarray:
    """A start near the goal config at a log-uniform random scale.

    Constant-speed demos carry a per-step magnitude proportional to the
    start-to-goal distance, so with only faraway starts the action field
    near the goal never shrinks and the cloned policy orbits the target at
    roughly one step-size instead of settling inside the success radius.
    Drawing start distances over several decades puts slow, short demos in
    every neighbourhood of the goal, which makes the averaged field taper
    off with distance and the rollout come to rest on the target.
    """
    sigma = float(np.exp(rng.uniform(np.log(sigma_lo), np.log(sigma_hi))))
    q = np.asarray(q_goal, dtype=np.float64) + sigma * rng.standard_normal(chain.dof)
    lo = np.array([j.limits[0] for j in chain.joints if j.kind != rm.FIXED])
    hi = np.array([j.limits[1] for j in chain.joints if j.kind != rm.FIXED])
    mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    return np.clip(q, mid - 0.9 * half, mid + 0.9 * half)


def _draw_disk(img, center, radius, color):
    h, w = img.shape[:2]
    cx, cy = center
    x0, x1 = max(0, int(np.floor(cx - radius))), min(w - 1, int(np.ceil(cx + radius)))
    y0, y1 = max(0, int(np.floor(cy - radius))), min(h - 1, int(np.ceil(cy + radius)))
    for y in range(y0, y1 + 1):
        for x in range(x0, x1 + 1):
            if (x - cx) ** 2 + (y - cy) ** 2 <= radius ** 2:
                img[y, x] = color


def _draw_line(img, a, b, color):
    """2 px line by integer stepping (no anti-aliasing)."""
    h, w = img.shape[:2]
    n = int(np.ceil(max(abs(b[0] - a[0]), abs(b[1] - a[1])))) + 1
    for t in np.linspace(0.0, 1.0, n):
        x = int(round(a[0] + t * (b[0] - a[0])))
        y = int(round(a[1] + t * (b[1] - a[1])))
        for dy in range(LINE_HALF_WIDTH + 1):
            for dx in range(LINE_HALF_WIDTH + 1):
                xx, yy = x + dx - LINE_HALF_WIDTH, y + dy - LINE_HALF_WIDTH
                if 0 <= xx < w and 0 <= yy < h:
                    img[yy, xx] = color


def render_image(world: World, q, cam: CameraModel) -> np.ndarray:
    """Raster observation: background, then targets, then the robot."""
    img = np.empty((cam.height, cam.width, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for pos, color in world.targets:
        uv, visible = project_point(cam, pos)
        if visible:
            _draw_disk(img, uv, TARGET_RADIUS_PX, COLOR_RGB[color])
    segments = rm.forward_kinematics(world.robot, q)
    poly = project_chain(cam, segments)
    pts = poly.points
    for i in range(0, len(pts) - 1, 2):
        if poly.visibility[i] or poly.visibility[i + 1]:
            _draw_line(img, pts[i], pts[i + 1], (255, 255, 255))
    return img


def chain_point_set(world: World, q, cam: CameraModel, n_points: int, mode="full_chain"):
    """Normalized ground-truth point set for one config and view."""
    segments = rm.forward_kinematics(world.robot, q)
    if mode == "end_effector":
        uv, _ = project_point(cam, segments[-1, 1])
        pts = uv[None, :]
    else:
        poly = project_chain(cam, segments)
        pts = sample_chain_points(poly, n_points)
    return pts / np.array([cam.width, cam.height], dtype=np.float64)


def ground_truth_chains(world: World, trajectory, T: int, n_points: int,
                        mode="full_chain") -> np.ndarray:
    """Per-view, per-step point sets, shape (V, S, N, 2) with S >= T.

    Steps beyond the trajectory's end repeat its final configuration.
    """
    trajectory = np.asarray(trajectory, dtype=np.float64)
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    S = max(len(trajectory), T)
    out = []
    for cam in world.cameras:
        per_step = [chain_point_set(world, trajectory[min(t, len(trajectory) - 1)],
                                    cam, n_points, mode=mode)
                    for t in range(S)]
        out.append(np.stack(per_step))
    return np.stack(out)


def horizon_slice(per_step, t: int, T: int):
    """per_step (..., S, N, 2) -> window (..., T, N, 2), repeating the last step."""
    S = per_step.shape[-3]
    idx = np.minimum(np.arange(t, t + T), S - 1)
    return np.take(per_step, idx, axis=-3)


def augment(image, point_sets, seed: int):
    """Consistent 2D augmentation: horizontal flip (p=0.5) then a +/-8 px shift.

    point_sets: any array (..., 2) in normalized units for the same view.
    """
    rng = seed_rng(seed, "augment")
    flip = bool(rng.random() < 0.5)
    dx = int(rng.integers(-8, 9))
    dy = int(rng.integers(-8, 9))
    img = np.asarray(image)
    h, w = img.shape[:2]
    pts = np.asarray(point_sets, dtype=np.float64).copy()
    if flip:
        img = img[:, ::-1]
        pts[..., 0] = 1.0 - pts[..., 0]
    out = np.empty_like(img)
    out[:] = BACKGROUND
    ys0, ys1 = max(0, dy), min(h, h + dy)
    xs0, xs1 = max(0, dx), min(w, w + dx)
    out[ys0:ys1, xs0:xs1] = img[ys0 - dy:ys1 - dy, xs0 - dx:xs1 - dx]
    pts[..., 0] += dx / w
    pts[..., 1] += dy / h
    return out, pts


def record_episode(world: World, task: Task, H: int, n_points: int,
                   mode="full_chain", q0=None) -> Episode:
    trajectory = scripted_policy(world, task, H, q0=q0)
    # actions are constructed first and configs integrated from them in
    # float32, so q_{t+1} == q_t + action_t holds exactly in the stored
    # (serialized) precision
    actions = np.zeros(trajectory.shape, dtype=np.float32)
    actions[:-1] = (trajectory[1:] - trajectory[:-1]).astype(np.float32)
    configs = np.empty(trajectory.shape, dtype=np.float32)
    configs[0] = trajectory[0].astype(np.float32)
    for t in range(H - 1):
        configs[t + 1] = configs[t] + actions[t]
    V = len(world.cameras)
    S = IMAGE_SIZE
    images = np.empty((H, V, S, S, 3), dtype=np.uint8)
    n_eff = 1 if mode == "end_effector" else n_points
    point_sets = np.empty((H, V, n_eff, 2), dtype=np.float32)
    for t in range(H):
        q = configs[t].astype(np.float64)
        for v, cam in enumerate(world.cameras):
            images[t, v] = render_image(world, q, cam)
            point_sets[t, v] = chain_point_set(world, q, cam, n_points, mode=mode)
    return Episode(world=world, task=task, configs=configs, actions=actions,
                   images=images, point_sets=point_sets)


def generate_episodes(base_seed: int, robot_variant: str, n_episodes: int,
                      n_views: int, H: int = 24, n_points: int = 16,
                      mode="full_chain"):
    """Deterministic scripted demonstrations; per-episode derived seeds."""
    episodes = []
    for i in range(n_episodes):
        for retry in range(20):
            seed = int(seed_rng(base_seed, "episode", i * 20 + retry).integers(2 ** 31))
            world = generate_world(seed, robot_variant, n_views)
            color = int(seed_rng(seed, "task").integers(len(COLORS)))
            task = Task(instruction_id=color, target_index=color)
            # one quarter of the demos start at home (the deployment start);
            # the rest start at random configs so the cloned policy sees
            # corrective paths from all over the workspace
            start_rng = seed_rng(seed, "start")
            if start_rng.uniform() < 0.25:
                q0 = None
            else:
                q0 = random_start_config(world.robot, start_rng)
            try:
                episodes.append(record_episode(world, task, H, n_points,
                                               mode=mode, q0=q0))
                break
            except IKError:
                continue
        else:
            raise WorldGenError(f"could not script episode {i}")
    return episodes


def rollout_eval(policy, world: World, task: Task, max_steps: int,
                 r_success: float = 0.05):
    """Receding-horizon rollout; success when the EE reaches the target.

    policy(instruction_id, images) must return one action vector (the first
    of its predicted sequence). Returns (success, trace of configs).
    """
    if max_steps < 1:
        raise ValueError(f"max_steps must be >= 1, got {max_steps}")
    chain = world.robot
    q = home_config(world.robot_variant)
    target = world.targets[task.target_index][0]
    trace = [q.copy()]
    if np.linalg.norm(rm.end_effector(chain, q) - target) <= r_success:
        return True, np.array(trace)
    for _ in range(max_steps):
        images = np.stack([render_image(world, q, cam) for cam in world.cameras])
        action = np.asarray(policy(task.instruction_id, images), dtype=np.float64)
        q, _ = chain.clamp_config(q + action[:chain.dof])
        trace.append(q.copy())
        if np.linalg.norm(rm.end_effector(chain, q) - target) <= r_success:
            return True, np.array(trace)
    return False, np.array(trace)


# ---------------------------------------------------------------------------
# dataset serialization


def _episode_bytes(ep: Episode) -> bytes:
    H, V, S, _, _ = ep.images.shape
    n_points = ep.point_sets.shape[2]
    dof = ep.configs.shape[1]
    parts = [_EP_MAGIC,
             struct.pack("<7I", DATASET_FORMAT_VERSION, H, V, n_points, S, S, dof)]
    for t in range(H):
        parts.append(ep.configs[t].astype("<f4").tobytes())
        parts.append(ep.actions[t].astype("<f4").tobytes())
        for v in range(V):
            parts.append(ep.images[t, v].tobytes())
        for v in range(V):
            parts.append(ep.point_sets[t, v].astype("<f4").tobytes())
    return b"".join(parts)


def dataset_save(episodes, path):
    os.makedirs(path, exist_ok=True)
    manifest_eps = []
    first = episodes[0]
    for v, cam in enumerate(first.world.cameras):
        from .camera import save_camera
        save_camera(cam, os.path.join(path, f"cam_{v}.json"))
    for k, ep in enumerate(episodes):
        raw = _episode_bytes(ep)
        fname = f"ep_{k}.bin"
        with open(os.path.join(path, fname), "wb") as f:
            f.write(raw)
        manifest_eps.append({
            "file": fname,
            "crc32": zlib.crc32(raw),
            "instruction_id": ep.task.instruction_id,
            "target_index": ep.task.target_index,
            "targets": [[*map(float, pos), color] for pos, color in ep.world.targets],
        })
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "robot_variant": first.world.robot_variant,
        "H": first.horizon,
        "N_points": int(first.point_sets.shape[2]),
        "image_size": IMAGE_SIZE,
        "n_views": len(first.world.cameras),
        "cameras": [f"cam_{v}.json" for v in range(len(first.world.cameras))],
        "episodes": manifest_eps,
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)


def _parse_episode(raw: bytes, meta, cameras, robot_variant) -> Episode:
    if raw[:4] != _EP_MAGIC:
        raise DatasetError("bad episode magic")
    version, H, V, n_points, W, Hpx, dof = struct.unpack("<7I", raw[4:32])
    if version != DATASET_FORMAT_VERSION:
        raise DatasetError(f"episode format version {version}, "
                           f"expected {DATASET_FORMAT_VERSION}")
    configs = np.empty((H, dof), dtype=np.float32)
    actions = np.empty((H, dof), dtype=np.float32)
    images = np.empty((H, V, Hpx, W, 3), dtype=np.uint8)
    point_sets = np.empty((H, V, n_points, 2), dtype=np.float32)
    off = 32
    img_bytes = W * Hpx * 3
    for t in range(H):
        configs[t] = np.frombuffer(raw, "<f4", dof, off); off += 4 * dof
        actions[t] = np.frombuffer(raw, "<f4", dof, off); off += 4 * dof
        for v in range(V):
            images[t, v] = np.frombuffer(raw, np.uint8, img_bytes, off).reshape(Hpx, W, 3)
            off += img_bytes
        for v in range(V):
            point_sets[t, v] = np.frombuffer(raw, "<f4", n_points * 2, off).reshape(n_points, 2)
            off += 8 * n_points
    if off != len(raw):
        raise DatasetError(f"episode file length {len(raw)}, expected {off}")
    targets = tuple((np.array(t[:3]), t[3]) for t in meta["targets"])
    world = World(robot=make_chain(robot_variant), robot_variant=robot_variant,
                  targets=targets, cameras=cameras)
    task = Task(instruction_id=meta["instruction_id"],
                target_index=meta["target_index"])
    return Episode(world=world, task=task, configs=configs, actions=actions,
                   images=images, point_sets=point_sets)


def dataset_load(path):
    from .camera import load_camera
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise DatasetError(f"no manifest.json in {path}")
    with open(mpath, encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise DatasetError(
            f"dataset format version {manifest.get('format_version')}, "
            f"this library reads version {DATASET_FORMAT_VERSION}")
    cameras = tuple(load_camera(os.path.join(path, c)) for c in manifest["cameras"])
    episodes = []
    for meta in manifest["episodes"]:
        with open(os.path.join(path, meta["file"]), "rb") as f:
            raw = f.read()
        if zlib.crc32(raw) != meta["crc32"]:
            raise DatasetError(f"checksum mismatch for {meta['file']}")
        episodes.append(_parse_episode(raw, meta, cameras, manifest["robot_variant"]))
    return episodes
