"""Pinhole camera projection of world-frame chain segments."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .transforms import Transform

Z_MIN = 1e-6  # meters; points at or behind this camera-frame depth are clipped


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: Transform = field(default_factory=Transform.identity)  # camera-in-world, +z forward

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def to_camera(self, points):
        return self.pose.inverse().apply(points)

    def to_json(self):
        from .transforms import quat_to_matrix
        # store rpy of the pose rotation for the file format
        r = quat_to_matrix(self.pose.quat)
        pitch = -np.arcsin(np.clip(r[2, 0], -1.0, 1.0))
        roll = np.arctan2(r[2, 1], r[2, 2])
        yaw = np.arctan2(r[1, 0], r[0, 0])
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "position": self.pose.trans.tolist(),
            "rpy": [float(roll), float(pitch), float(yaw)],
        }

    @classmethod
    def from_json(cls, obj):
        pose = Transform.from_rpy(obj["position"], obj["rpy"])
        return cls(fx=obj["fx"], fy=obj["fy"], cx=obj["cx"], cy=obj["cy"],
                   width=int(obj["width"]), height=int(obj["height"]), pose=pose)


def save_camera(cam: CameraModel, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cam.to_json(), f, indent=2)


def load_camera(path) -> CameraModel:
    with open(path, encoding="utf-8") as f:
        return CameraModel.from_json(json.load(f))


@dataclass(frozen=True)
class ImagePolyline:
    points: np.ndarray      # (K, 2) pixel coordinates, chain order base -> EE
    visibility: np.ndarray  # (K,) bool: in front of camera and inside the frame


def project_point(cam: CameraModel, p_world):
    """Project one world point; returns ((u, v), True) or ((cx, cy), False) behind camera."""
    x, y, z = cam.to_camera(p_world)
    if z <= Z_MIN:
        return np.array([cam.cx, cam.cy], dtype=np.float64), False
    return np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy]), True


def _project_cam_points(cam, pts_cam):
    z = pts_cam[:, 2]
    uv = np.empty((len(pts_cam), 2))
    uv[:, 0] = cam.fx * pts_cam[:, 0] / np.maximum(z, Z_MIN) + cam.cx
    uv[:, 1] = cam.fy * pts_cam[:, 1] / np.maximum(z, Z_MIN) + cam.cy
    return uv


def project_chain(cam: CameraModel, segments) -> ImagePolyline:
    """Project world segments (n,2,3) into an image polyline.

    Segments crossing the z=Z_MIN camera plane are clipped at the plane;
    fully-behind endpoints are parked at the principal point and flagged
    invisible so the polyline keeps the chain's topology.
    """
    segments = np.asarray(segments, dtype=np.float64)
    pts, vis = [], []
    for seg in segments:
        a, b = cam.to_camera(seg)
        za, zb = a[2], b[2]
        if za <= Z_MIN and zb <= Z_MIN:
            for _ in range(2):
                pts.append(np.array([cam.cx, cam.cy], dtype=np.float64))
                vis.append(False)
            continue
        if za <= Z_MIN or zb <= Z_MIN:
            # line-plane intersection at z = Z_MIN
            t = (Z_MIN - za) / (zb - za)
            cross = a + t * (b - a)
            if za <= Z_MIN:
                a = cross
            else:
                b = cross
        uv = _project_cam_points(cam, np.stack([a, b]))
        for p, z in zip(uv, (a[2], b[2])):
            inside = (0 <= p[0] < cam.width) and (0 <= p[1] < cam.height)
            pts.append(p)
            vis.append(z > Z_MIN - 1e-15 and inside)
    return ImagePolyline(points=np.array(pts), visibility=np.array(vis, dtype=bool))
