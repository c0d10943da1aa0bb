"""Rigid transforms, kinematic chains, and point-cloud forward kinematics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .pcgeom import farthest_point_sample

_QUAT_TOL = 1e-9
_AXIS_TOL = 1e-9

DEFAULT_CLOUD_SIZE = 1024


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    """Unit quaternion (w,x,y,z) rotating by `angle` radians about a unit axis."""
    axis = np.asarray(axis, dtype=float)
    half = 0.5 * float(angle)
    return np.concatenate(([np.cos(half)], np.sin(half) * axis))


@dataclass(frozen=True)
class Pose:
    """SE(3) transform: rotation as a unit quaternion (w,x,y,z) plus translation in meters."""

    quat: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        quat = np.asarray(self.quat, dtype=float)
        trans = np.asarray(self.trans, dtype=float)
        if quat.shape != (4,) or trans.shape != (3,):
            raise ValueError(f"Pose expects quat (4,) and trans (3,), got {quat.shape}, {trans.shape}")
        if not (np.all(np.isfinite(quat)) and np.all(np.isfinite(trans))):
            raise ValueError("Pose components must be finite")
        norm = float(np.linalg.norm(quat))
        if norm == 0.0:
            raise ValueError("zero quaternion")
        # Renormalize only when needed so exact inputs stay bit-exact.
        if abs(norm - 1.0) > 1e-12:
            quat = quat / norm
        object.__setattr__(self, "quat", quat)
        object.__setattr__(self, "trans", trans)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    def rotation_matrix(self) -> np.ndarray:
        return _quat_to_matrix(self.quat)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous transform."""
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.trans
        return m


def pose_compose(a: Pose, b: Pose) -> Pose:
    """Compose two poses; the result applies `b` first, then `a`."""
    quat = _quat_mul(a.quat, b.quat)
    trans = _quat_to_matrix(a.quat) @ b.trans + a.trans
    return Pose(quat, trans)


def pose_inverse(p: Pose) -> Pose:
    conj = p.quat * np.array([1.0, -1.0, -1.0, -1.0])
    return Pose(conj, -(_quat_to_matrix(conj) @ p.trans))


def pose_apply(p: Pose, pts: np.ndarray) -> np.ndarray:
    """Rotate then translate an (N,3) point set."""
    pts = np.asarray(pts, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N,3) point set, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point set contains non-finite coordinates")
    return pts @ _quat_to_matrix(p.quat).T + p.trans


@dataclass(frozen=True)
class Link:
    """Rigid link with a primitive surface: box (lx,ly,lz), cylinder (radius,height), or sphere (radius)."""

    name: str
    shape: str
    dims: tuple

    def __post_init__(self):
        expected = {"box": 3, "cylinder": 2, "sphere": 1}
        if self.shape not in expected:
            raise ValueError(f"unsupported geometry kind {self.shape!r}")
        dims = tuple(float(d) for d in self.dims)
        if len(dims) != expected[self.shape]:
            raise ValueError(f"{self.shape} expects {expected[self.shape]} dims, got {len(dims)}")
        if any(d <= 0 for d in dims):
            raise ValueError(f"link {self.name!r}: dimensions must be strictly positive")
        object.__setattr__(self, "dims", dims)


@dataclass(frozen=True)
class Joint:
    """Revolute or prismatic joint attaching a child link to `parent`."""

    kind: str
    axis: np.ndarray
    parent: int
    origin: Pose
    limits: tuple

    def __post_init__(self):
        if self.kind not in ("revolute", "prismatic"):
            raise ValueError(f"unknown joint type {self.kind!r}")
        axis = np.asarray(self.axis, dtype=float)
        if axis.shape != (3,) or abs(np.linalg.norm(axis) - 1.0) > _AXIS_TOL:
            raise ValueError("joint axis must be a unit 3-vector")
        lo, hi = (float(self.limits[0]), float(self.limits[1]))
        if lo > hi:
            raise ValueError("joint limits must satisfy lo <= hi")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "limits", (lo, hi))


@dataclass(frozen=True)
class KinematicChain:
    """Tree of links rooted at link 0; joint j drives link j+1."""

    links: tuple
    joints: tuple

    def __post_init__(self):
        links = tuple(self.links)
        joints = tuple(self.joints)
        if len(joints) != len(links) - 1:
            raise ValueError(f"expected {len(links) - 1} joints for {len(links)} links, got {len(joints)}")
        for j, joint in enumerate(joints):
            if not 0 <= joint.parent <= j:
                raise ValueError(f"joint {j}: parent {joint.parent} does not precede child link {j + 1}")
        object.__setattr__(self, "links", links)
        object.__setattr__(self, "joints", joints)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_joints(self) -> int:
        return len(self.joints)


@dataclass(frozen=True)
class JointVector:
    """Joint positions clamped to chain limits; `clamped` flags which entries were clipped."""

    values: np.ndarray
    clamped: np.ndarray = field(default=None)

    @staticmethod
    def clamp(chain: KinematicChain, values) -> "JointVector":
        values = np.asarray(values, dtype=float)
        if values.shape != (chain.n_joints,):
            raise ValueError(f"expected {chain.n_joints} joint values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("joint values must be finite")
        lo = np.array([j.limits[0] for j in chain.joints])
        hi = np.array([j.limits[1] for j in chain.joints])
        clipped = np.clip(values, lo, hi)
        return JointVector(clipped, clamped=clipped != values)

    @property
    def any_clamped(self) -> bool:
        return bool(np.any(self.clamped))


def sample_link_surface(link: Link, n: int, seed: int) -> np.ndarray:
    """Sample n area-weighted uniform points on the link surface, in the link frame."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if link.shape == "sphere":
        (radius,) = link.dims
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return radius * v
    if link.shape == "box":
        lx, ly, lz = link.dims
        # Face order: +x, -x, +y, -y, +z, -z.
        areas = np.array([ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        u = rng.uniform(-0.5, 0.5, size=(n, 2))
        pts = np.empty((n, 3))
        for f, (fixed_axis, sign) in enumerate([(0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)]):
            mask = face == f
            free = [a for a in range(3) if a != fixed_axis]
            half = np.array([lx, ly, lz]) * 0.5
            pts[mask, fixed_axis] = sign * half[fixed_axis]
            pts[mask, free[0]] = u[mask, 0] * 2 * half[free[0]]
            pts[mask, free[1]] = u[mask, 1] * 2 * half[free[1]]
        return pts
    if link.shape == "cylinder":
        radius, height = link.dims
        lateral = 2 * np.pi * radius * height
        cap = np.pi * radius**2
        part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
        theta = rng.uniform(0.0, 2 * np.pi, size=n)
        z = rng.uniform(-0.5 * height, 0.5 * height, size=n)
        r_cap = radius * np.sqrt(rng.uniform(0.0, 1.0, size=n))
        pts = np.empty((n, 3))
        side = part == 0
        pts[side] = np.column_stack(
            (radius * np.cos(theta[side]), radius * np.sin(theta[side]), z[side])
        )
        for p, zsign in ((1, 0.5), (2, -0.5)):
            mask = part == p
            pts[mask] = np.column_stack(
                (
                    r_cap[mask] * np.cos(theta[mask]),
                    r_cap[mask] * np.sin(theta[mask]),
                    np.full(mask.sum(), zsign * height),
                )
            )
        return pts
    raise ValueError(f"unsupported geometry kind {link.shape!r}")


def chain_fk(chain: KinematicChain, q: JointVector) -> list:
    """Forward kinematics: one pose per link, link 0 fixed at identity."""
    values = np.asarray(q.values, dtype=float)
    if values.shape != (chain.n_joints,):
        raise ValueError(f"joint vector length {values.shape} does not match chain ({chain.n_joints})")
    poses = [Pose.identity()]
    for j, joint in enumerate(chain.joints):
        if joint.kind == "revolute":
            motion = Pose(quat_from_axis_angle(joint.axis, values[j]), np.zeros(3))
        else:
            motion = Pose(np.array([1.0, 0.0, 0.0, 0.0]), joint.axis * values[j])
        poses.append(pose_compose(poses[joint.parent], pose_compose(joint.origin, motion)))
    return poses


def fk_pointcloud(
    chain: KinematicChain,
    q: JointVector,
    link_samples: list,
    subset=None,
    n_points: int = DEFAULT_CLOUD_SIZE,
) -> np.ndarray:
    """Pose each link's surface samples, concatenate, and downsample to n_points by FPS.

    `subset` restricts to the listed link indices (e.g. hand links only). When the
    concatenated cloud already has <= n_points points it is returned unchanged.
    """
    if len(link_samples) != chain.n_links:
        raise ValueError(f"expected one sample set per link ({chain.n_links}), got {len(link_samples)}")
    indices = list(range(chain.n_links)) if subset is None else list(subset)
    if not indices:
        raise ValueError("empty link selection")
    for i in indices:
        if not 0 <= i < chain.n_links:
            raise ValueError(f"link index {i} out of range")
    poses = chain_fk(chain, q)
    cloud = np.concatenate([pose_apply(poses[i], link_samples[i]) for i in indices], axis=0)
    if cloud.shape[0] <= n_points:
        return cloud
    return cloud[farthest_point_sample(cloud, n_points, start=0)]


def parse_chain(doc: dict) -> KinematicChain:
    """Build a chain from its JSON document form (see load_chain)."""
    links = tuple(
        Link(entry["name"], entry["geometry"]["kind"], tuple(entry["geometry"]["dims"]))
        for entry in doc["links"]
    )
    joints = []
    for entry in doc["joints"]:
        origin = entry["origin"]
        joints.append(
            Joint(
                kind=entry["type"],
                axis=np.asarray(entry["axis"], dtype=float),
                parent=int(entry["parent"]),
                origin=Pose(np.asarray(origin["quat_wxyz"], dtype=float), np.asarray(origin["xyz"], dtype=float)),
                limits=tuple(entry["limits"]),
            )
        )
    return KinematicChain(links, tuple(joints))


def load_chain(path) -> KinematicChain:
    """Load a chain description file: JSON with `links` and `joints` arrays, meters/radians."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_chain(json.load(fh))


def chain_to_doc(chain: KinematicChain) -> dict:
    """Inverse of parse_chain, for writing chain description files."""
    return {
        "links": [
            {"name": l.name, "geometry": {"kind": l.shape, "dims": list(l.dims)}} for l in chain.links
        ],
        "joints": [
            {
                "type": j.kind,
                "axis": list(j.axis),
                "parent": j.parent,
                "origin": {"quat_wxyz": list(j.origin.quat), "xyz": list(j.origin.trans)},
                "limits": list(j.limits),
            }
            for j in chain.joints
        ],
    }
