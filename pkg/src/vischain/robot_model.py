"""Serial kinematic chains: description parsing and forward kinematics."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

import numpy as np

from .transforms import Transform

REVOLUTE = "revolute"
PRISMATIC = "prismatic"
FIXED = "fixed"
_JOINT_KINDS = (REVOLUTE, PRISMATIC, FIXED)

AXIS_UNIT_TOL = 1e-9


class ChainError(Exception):
    """Base error for chain descriptions."""


class ChainParseError(ChainError):
    """Malformed document syntax (carries line/column when known)."""


class ChainStructureError(ChainError):
    """Branching or otherwise non-serial chain layout."""


class ChainValidationError(ChainError):
    """Well-formed document with invalid field values."""


@dataclass(frozen=True)
class JointSpec:
    name: str
    kind: str
    axis: np.ndarray          # unit 3-vector in parent frame
    origin: Transform         # parent link frame -> joint frame
    limits: tuple             # (lo, hi); radians or meters
    origin_xyz: tuple = (0.0, 0.0, 0.0)
    origin_rpy: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in _JOINT_KINDS:
            raise ChainValidationError(f"unknown joint kind {self.kind!r}")
        if self.kind != FIXED:
            if abs(np.linalg.norm(self.axis) - 1.0) > AXIS_UNIT_TOL:
                raise ChainValidationError(
                    f"joint {self.name!r}: axis {self.axis.tolist()} is not unit length")
            lo, hi = self.limits
            if lo > hi:
                raise ChainValidationError(
                    f"joint {self.name!r}: inverted limits [{lo}, {hi}]")


@dataclass(frozen=True)
class LinkSpec:
    name: str
    segment: np.ndarray  # (2,3) endpoints in the link's own frame

    def __post_init__(self):
        if self.segment.shape != (2, 3) or not np.all(np.isfinite(self.segment)):
            raise ChainValidationError(
                f"link {self.name!r}: segment must be two finite 3D endpoints")


@dataclass(frozen=True)
class KinematicChain:
    joints: tuple  # of JointSpec
    links: tuple   # of LinkSpec, one per joint
    base_pose: Transform = field(default_factory=Transform.identity)

    def __post_init__(self):
        if len(self.joints) != len(self.links):
            raise ChainValidationError(
                f"{len(self.joints)} joints but {len(self.links)} links")

    @property
    def dof(self):
        return sum(1 for j in self.joints if j.kind != FIXED)

    def clamp_config(self, values):
        """Clamp joint values into limits; returns (clamped, was_clamped)."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.dof,):
            raise ValueError(f"config has shape {values.shape}, chain dof is {self.dof}")
        lo = np.array([j.limits[0] for j in self.joints if j.kind != FIXED])
        hi = np.array([j.limits[1] for j in self.joints if j.kind != FIXED])
        clamped = np.clip(values, lo, hi)
        return clamped, bool(np.any(clamped != values))


def _parse_floats(text, n, what, allow_none=False, default=None):
    if text is None:
        if allow_none:
            return default
        raise ChainParseError(f"missing attribute for {what}")
    parts = text.split()
    if len(parts) != n:
        raise ChainParseError(f"{what}: expected {n} numbers, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise ChainParseError(f"{what}: non-numeric value in {text!r}")


def parse_chain(doc: str) -> KinematicChain:
    """Parse a chain-description XML document into a KinematicChain.

    The document is a `robot` element with strictly alternating
    `joint`/`link` pairs in base-to-tip order; anything that breaks the
    alternation (the only way this grammar could express branching) is a
    structural error.
    """
    try:
        root = ET.fromstring(doc)
    except ET.ParseError as e:
        line, col = e.position
        raise ChainParseError(f"malformed XML at line {line}, column {col}: {e.msg}")
    if root.tag != "robot":
        raise ChainParseError(f"root element must be 'robot', got {root.tag!r}")

    children = list(root)
    if len(children) % 2 != 0:
        raise ChainStructureError(
            "document must contain joint/link pairs; found an unpaired element")
    joints, links = [], []
    for i, el in enumerate(children):
        expected = "joint" if i % 2 == 0 else "link"
        if el.tag != expected:
            raise ChainStructureError(
                f"non-serial structure: expected <{expected}> at element {i}, "
                f"found <{el.tag}>")
        if expected == "joint":
            joints.append(_parse_joint(el))
        else:
            links.append(_parse_link(el))
    return KinematicChain(tuple(joints), tuple(links))


def _parse_joint(el) -> JointSpec:
    name = el.get("name")
    kind = el.get("type")
    if name is None or kind is None:
        raise ChainParseError("joint element requires 'name' and 'type' attributes")
    if kind not in _JOINT_KINDS:
        raise ChainValidationError(f"joint {name!r}: unknown type {kind!r}")
    origin_el = el.find("origin")
    xyz = (0.0, 0.0, 0.0)
    rpy = (0.0, 0.0, 0.0)
    if origin_el is not None:
        xyz = _parse_floats(origin_el.get("xyz"), 3, f"joint {name!r} origin xyz",
                            allow_none=True, default=xyz)
        rpy = _parse_floats(origin_el.get("rpy"), 3, f"joint {name!r} origin rpy",
                            allow_none=True, default=rpy)
    axis = np.array([0.0, 0.0, 1.0])
    limits = (0.0, 0.0)
    if kind != FIXED:
        axis_el = el.find("axis")
        if axis_el is not None:
            axis = np.array(_parse_floats(axis_el.get("xyz"), 3, f"joint {name!r} axis"))
        limit_el = el.find("limit")
        if limit_el is None:
            raise ChainValidationError(f"joint {name!r}: non-fixed joint needs limits")
        lo = _parse_floats(limit_el.get("lower"), 1, f"joint {name!r} lower limit")[0]
        hi = _parse_floats(limit_el.get("upper"), 1, f"joint {name!r} upper limit")[0]
        limits = (lo, hi)
    return JointSpec(name=name, kind=kind, axis=axis,
                     origin=Transform.from_rpy(xyz, rpy), limits=limits,
                     origin_xyz=tuple(xyz), origin_rpy=tuple(rpy))


def _parse_link(el) -> LinkSpec:
    name = el.get("name")
    if name is None:
        raise ChainParseError("link element requires a 'name' attribute")
    seg_el = el.find("segment")
    if seg_el is None:
        raise ChainParseError(f"link {name!r}: missing segment element")
    a = _parse_floats(seg_el.get("from"), 3, f"link {name!r} segment from")
    b = _parse_floats(seg_el.get("to"), 3, f"link {name!r} segment to")
    return LinkSpec(name=name, segment=np.array([a, b], dtype=np.float64))


def serialize_chain(chain: KinematicChain) -> str:
    """Inverse of parse_chain (base pose is not serialized)."""
    def r(*xs):
        # repr of the python float keeps full precision round-trippable
        return " ".join(repr(float(x)) for x in xs)

    out = ["<robot>"]
    for j, l in zip(chain.joints, chain.links):
        out.append(f'  <joint name="{j.name}" type="{j.kind}">')
        out.append(f'    <origin xyz="{r(*j.origin_xyz)}" rpy="{r(*j.origin_rpy)}"/>')
        if j.kind != FIXED:
            out.append(f'    <axis xyz="{r(*j.axis)}"/>')
            out.append(f'    <limit lower="{r(j.limits[0])}" upper="{r(j.limits[1])}"/>')
        out.append("  </joint>")
        out.append(f'  <link name="{l.name}">')
        out.append(f'    <segment from="{r(*l.segment[0])}" to="{r(*l.segment[1])}"/>')
        out.append("  </link>")
    out.append("</robot>")
    return "\n".join(out)


def _joint_motion(joint: JointSpec, value: float) -> Transform:
    if joint.kind == REVOLUTE:
        return Transform.from_axis_angle(joint.axis, value)
    if joint.kind == PRISMATIC:
        return Transform(trans=joint.axis * value)
    return Transform.identity()


def frame_transforms(chain: KinematicChain, q) -> list:
    """World transform of every link frame, base to tip."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (chain.dof,):
        raise ValueError(f"config has shape {q.shape}, chain dof is {chain.dof}")
    frames = []
    x = chain.base_pose
    qi = 0
    for joint in chain.joints:
        x = x.compose(joint.origin)
        if joint.kind != FIXED:
            x = x.compose(_joint_motion(joint, q[qi]))
            qi += 1
        frames.append(x)
    return frames


def forward_kinematics(chain: KinematicChain, q) -> np.ndarray:
    """World-frame link segments, shape (n_links, 2, 3)."""
    frames = frame_transforms(chain, q)
    return np.stack([f.apply(l.segment) for f, l in zip(frames, chain.links)])


def end_effector(chain: KinematicChain, q) -> np.ndarray:
    """World position of the last segment's far endpoint."""
    return forward_kinematics(chain, q)[-1, 1]


def position_jacobian(chain: KinematicChain, q) -> np.ndarray:
    """3 x dof Jacobian of the end-effector position (analytic, revolute/prismatic)."""
    frames = frame_transforms(chain, q)
    ee = frames[-1].apply(chain.links[-1].segment[1])
    cols = []
    for joint, frame in zip(chain.joints, frames):
        if joint.kind == FIXED:
            continue
        axis_w = frame.matrix() @ joint.axis
        if joint.kind == REVOLUTE:
            cols.append(np.cross(axis_w, ee - frame.trans))
        else:
            cols.append(axis_w)
    return np.stack(cols, axis=1)
