"""Observation assembly, [-1,1] min-max normalization, and episode pack files."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .se3kin import Pose, fk_pointcloud, pose_apply

MAGIC = b"CVIP"
VERSION = 1

# Stream layout of an episode pack; tail dims are filled in from the header.
STREAM_ORDER = ("object_pc", "hand_pc", "arm_state", "hand_state", "arm_action", "hand_action", "object_pose")

# Streams with a fitted normalizer (object_pose is carried for bookkeeping only).
NORMALIZED_STREAMS = ("object_pc", "hand_pc", "arm_state", "hand_state", "arm_action", "hand_action")


class EpisodeError(Exception):
    """Base class for episode pack problems."""


class EpisodeFormatError(EpisodeError):
    """Bad magic, unsupported version, or unparseable header."""


class EpisodeTruncationError(EpisodeError):
    """File ends before the declared streams do."""


class EpisodeChecksumError(EpisodeError):
    """Stream payload does not match its CRC32."""


class EpisodeShapeError(EpisodeError):
    """Header dims and stream shapes disagree."""


@dataclass(frozen=True)
class Observation:
    """One policy observation: posed clouds plus proprioception."""

    obj_pc: np.ndarray
    hand_pc: np.ndarray
    arm_state: np.ndarray
    hand_state: np.ndarray


def build_observation(
    canonical_obj_pc: np.ndarray,
    obj_pose: Pose,
    chain,
    q,
    link_samples,
    hand_links,
    n_points: int,
) -> Observation:
    """Pose the canonical object cloud and render the hand cloud from kinematics.

    The canonical cloud must be centered at its own centroid; `hand_links`
    restricts the forward-kinematics cloud to the hand (arm links are skipped).
    `q` carries arm joints first, then hand joints.
    """
    centroid = canonical_obj_pc.mean(axis=0)
    if np.linalg.norm(centroid) > 1e-6:
        raise ValueError(f"canonical object cloud not centered (centroid norm {np.linalg.norm(centroid):.2e})")
    obj_pc = pose_apply(obj_pose, canonical_obj_pc)
    hand_pc = fk_pointcloud(chain, q, link_samples, subset=hand_links, n_points=n_points)
    hand_joints = sorted(link - 1 for link in hand_links)  # joint j drives link j+1
    arm_joints = [j for j in range(chain.n_joints) if j not in set(hand_joints)]
    return Observation(obj_pc, hand_pc, q.values[arm_joints].copy(), q.values[hand_joints].copy())


@dataclass(frozen=True)
class Normalizer:
    """Per-dimension extrema for each named stream; point clouds share per-axis extrema."""

    lo: dict
    hi: dict

    def __post_init__(self):
        for name in self.lo:
            if np.any(self.lo[name] > self.hi[name]):
                raise ValueError(f"normalizer stream {name!r}: min > max")

    def degenerate(self, stream: str) -> np.ndarray:
        return self.lo[stream] == self.hi[stream]

    def as_arrays(self) -> dict:
        out = {}
        for name in self.lo:
            out[f"normalizer/{name}/lo"] = self.lo[name].astype(np.float32)
            out[f"normalizer/{name}/hi"] = self.hi[name].astype(np.float32)
        return out

    @staticmethod
    def from_arrays(arrays: dict) -> "Normalizer":
        lo, hi = {}, {}
        for key, value in arrays.items():
            if not key.startswith("normalizer/"):
                continue
            _, stream, kind = key.split("/")
            (lo if kind == "lo" else hi)[stream] = value.astype(np.float64)
        if not lo:
            raise ValueError("no normalizer entries found")
        return Normalizer(lo, hi)


def _stream_matrix(pack: "EpisodePack", stream: str) -> np.ndarray:
    data = pack.streams[stream]
    return data.reshape(-1, data.shape[-1])


_CLOUD_STREAMS = ("object_pc", "hand_pc")


def fit_normalizer(packs) -> Normalizer:
    """Extrema over every training step of every episode.

    State and action streams use plain per-dimension min/max. The two cloud
    streams share one isotropic map: a per-axis center with a common half-span
    (the largest axis extent over the union of both clouds). Stretching cloud
    axes independently distorts the cross-cloud metric that correspondence
    features rely on; the isotropic map preserves it while keeping every
    normalized coordinate inside [-1, 1].
    """
    packs = list(packs)
    if not packs:
        raise ValueError("fit_normalizer needs at least one episode")
    lo, hi = {}, {}
    for stream in NORMALIZED_STREAMS:
        mats = np.concatenate([_stream_matrix(p, stream) for p in packs], axis=0)
        lo[stream] = mats.min(axis=0).astype(np.float64)
        hi[stream] = mats.max(axis=0).astype(np.float64)
    cloud_lo = np.minimum(lo["object_pc"], lo["hand_pc"])
    cloud_hi = np.maximum(hi["object_pc"], hi["hand_pc"])
    center = 0.5 * (cloud_lo + cloud_hi)
    half = np.full(3, max((cloud_hi - cloud_lo).max() / 2.0, 0.0))
    for stream in _CLOUD_STREAMS:
        lo[stream] = center - half
        hi[stream] = center + half
    return Normalizer(lo, hi)


def normalize(x: np.ndarray, normalizer: Normalizer, stream: str) -> np.ndarray:
    """Linear map of each dimension to [-1,1]; constant dimensions map to 0."""
    if stream not in normalizer.lo:
        raise KeyError(f"unknown stream {stream!r}")
    lo, hi = normalizer.lo[stream], normalizer.hi[stream]
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != lo.shape[0]:
        raise ValueError(f"stream {stream!r}: last dim {x.shape[-1]} != {lo.shape[0]}")
    span = hi - lo
    safe = np.where(span == 0, 1.0, span)
    out = 2.0 * (x - lo) / safe - 1.0
    return np.where(span == 0, 0.0, out)


def denormalize(x: np.ndarray, normalizer: Normalizer, stream: str) -> np.ndarray:
    """Inverse of normalize; constant dimensions recover their constant."""
    if stream not in normalizer.lo:
        raise KeyError(f"unknown stream {stream!r}")
    lo, hi = normalizer.lo[stream], normalizer.hi[stream]
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != lo.shape[0]:
        raise ValueError(f"stream {stream!r}: last dim {x.shape[-1]} != {lo.shape[0]}")
    return (x + 1.0) / 2.0 * (hi - lo) + lo


@dataclass
class EpisodePack:
    """One serialized demonstration: header metadata plus fixed-order float32 streams."""

    task: str
    dt: float
    n_points: int
    arm_dim: int
    hand_dim: int
    streams: dict = field(repr=False)

    def __post_init__(self):
        for name in STREAM_ORDER:
            if name not in self.streams:
                raise ValueError(f"missing stream {name!r}")
        steps = {name: arr.shape[0] for name, arr in self.streams.items()}
        if len(set(steps.values())) != 1:
            raise ValueError(f"streams disagree on step count: {steps}")
        expected = self._expected_shapes(self.n_points, self.arm_dim, self.hand_dim, self.steps)
        for name in STREAM_ORDER:
            got = self.streams[name].shape
            if got != expected[name]:
                raise ValueError(f"stream {name!r}: shape {got}, expected {expected[name]}")
            self.streams[name] = np.ascontiguousarray(self.streams[name], dtype=np.float32)
        quats = self.streams["object_pose"][:, :4].astype(np.float64)
        if np.any(np.abs(np.linalg.norm(quats, axis=1) - 1.0) > 1e-6):
            raise ValueError("object_pose quaternions must be unit norm within 1e-6")

    @property
    def steps(self) -> int:
        return self.streams["object_pose"].shape[0]

    @staticmethod
    def _expected_shapes(n_points, arm_dim, hand_dim, steps) -> dict:
        return {
            "object_pc": (steps, n_points, 3),
            "hand_pc": (steps, n_points, 3),
            "arm_state": (steps, arm_dim),
            "hand_state": (steps, hand_dim),
            "arm_action": (steps, arm_dim),
            "hand_action": (steps, hand_dim),
            "object_pose": (steps, 7),
        }


def _header_doc(pack: EpisodePack) -> dict:
    return {
        "version": VERSION,
        "task": pack.task,
        "dt": pack.dt,
        "n_points": pack.n_points,
        "arm_dim": pack.arm_dim,
        "hand_dim": pack.hand_dim,
        "steps": pack.steps,
        "streams": [[name, list(pack.streams[name].shape)] for name in STREAM_ORDER],
    }


def write_episode(pack: EpisodePack, path):
    """Serialize a pack; identical packs produce identical bytes."""
    header = json.dumps(_header_doc(pack), sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name in STREAM_ORDER:
            payload = pack.streams[name].astype("<f4", copy=False).tobytes()
            fh.write(payload)
            fh.write(struct.pack("<I", zlib.crc32(payload)))


def read_episode(path) -> EpisodePack:
    """Parse and validate an episode pack, reproducing every stream bitwise."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 10:
        raise EpisodeTruncationError("file shorter than fixed prelude")
    if buf[:4] != MAGIC:
        raise EpisodeFormatError("not an episode pack (bad magic)")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise EpisodeFormatError(f"unsupported episode format version {version}")
    (hlen,) = struct.unpack_from("<I", buf, 6)
    if 10 + hlen > len(buf):
        raise EpisodeTruncationError("header extends past end of file")
    try:
        header = json.loads(buf[10 : 10 + hlen].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise EpisodeFormatError(f"bad header: {exc}") from exc

    for key in ("task", "dt", "n_points", "arm_dim", "hand_dim", "steps", "streams"):
        if key not in header:
            raise EpisodeFormatError(f"header missing {key!r}")
    declared = {name: tuple(shape) for name, shape in header["streams"]}
    if tuple(name for name, _ in header["streams"]) != STREAM_ORDER:
        raise EpisodeFormatError(f"unexpected stream order {list(declared)}")
    expected = EpisodePack._expected_shapes(
        header["n_points"], header["arm_dim"], header["hand_dim"], header["steps"]
    )
    for name in STREAM_ORDER:
        if declared[name] != expected[name]:
            raise EpisodeShapeError(
                f"stream {name!r}: header declares {declared[name]}, dims imply {expected[name]}"
            )

    pos = 10 + hlen
    streams = {}
    for name in STREAM_ORDER:
        shape = expected[name]
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if pos + nbytes + 4 > len(buf):
            raise EpisodeTruncationError(f"file truncated inside stream {name!r}")
        payload = buf[pos : pos + nbytes]
        (crc,) = struct.unpack_from("<I", buf, pos + nbytes)
        if zlib.crc32(payload) != crc:
            raise EpisodeChecksumError(f"checksum failure in stream {name!r}")
        streams[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        pos += nbytes + 4
    if pos != len(buf):
        raise EpisodeFormatError(f"{len(buf) - pos} trailing bytes after last stream")
    return EpisodePack(
        task=header["task"],
        dt=float(header["dt"]),
        n_points=int(header["n_points"]),
        arm_dim=int(header["arm_dim"]),
        hand_dim=int(header["hand_dim"]),
        streams=streams,
    )
