"""Pose sequences: synthetic motion capture, normalization, augmentation and the PSEQ file format.

Camera space is right-handed with X right, Y down and Z forward (mm). 3D
targets are root-relative; the absolute root trajectory is kept separately so
predictions can be projected back into the image.

PSEQ layout (little-endian)::

    b"PSEQ"  u8 version (=1)
    u32 T, u32 J, u32 D, u8 units, u8 flags
    payload: T*J*D reals, float32 (float64 when flags bit 2 is set)
    [flags bit 0] u32 length=48, camera: f64 fx, fy, cx, cy, skew, u32 width, height
    [flags bit 1] u32 length=T*24, root trajectory: T x 3 f64 (mm)
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor_core import Rng

UNITS = ("px", "normalized", "mm")
FLAG_CAMERA = 1
FLAG_ROOT = 2
FLAG_F64 = 4
PSEQ_MAGIC = b"PSEQ"
PSEQ_VERSION = 1
MANIFEST_VERSION = 1
Z_RANGE = (2000.0, 6000.0)


class PseqError(ValueError):
    """Malformed PSEQ file."""


class MagicError(PseqError):
    pass


class VersionError(PseqError):
    pass


class TruncatedError(PseqError):
    pass


class HeaderError(PseqError):
    pass


class GenerationError(RuntimeError):
    pass


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonSpec:
    parents: tuple[int, ...]
    offsets: tuple[tuple[float, float, float], ...]  # rest-pose offset from parent, mm
    mirror_pairs: tuple[tuple[int, int], ...]
    root: int = 0
    names: tuple[str, ...] = ()

    def __post_init__(self):
        j = len(self.parents)
        if len(self.offsets) != j:
            raise ValueError("one offset per joint required")
        if self.parents[self.root] != self.root:
            raise ValueError("root joint must be its own parent")
        for i, p in enumerate(self.parents):
            if i != self.root and not 0 <= p < j:
                raise ValueError(f"joint {i} has invalid parent {p}")
        for i in range(j):
            seen, k = set(), i
            while k != self.root:
                if k in seen:
                    raise ValueError("parent graph has a cycle")
                seen.add(k)
                k = self.parents[k]
        for i, length in enumerate(self.bone_lengths):
            if i != self.root and length <= 0:
                raise ValueError(f"bone {i} has nonpositive length")
        perm = self.mirror_permutation()
        if sorted(perm) != list(range(j)) or any(perm[perm[i]] != i for i in range(j)):
            raise ValueError("mirror pairs must form an involution")

    @property
    def joints(self) -> int:
        return len(self.parents)

    @property
    def bone_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.asarray(self.offsets, dtype=np.float64), axis=1)

    def mirror_permutation(self) -> list[int]:
        perm = list(range(len(self.parents)))
        for a, b in self.mirror_pairs:
            perm[a], perm[b] = b, a
        return perm

    def order(self) -> list[int]:
        """Joints sorted so every parent precedes its children."""
        depth = []
        for i in range(self.joints):
            d, k = 0, i
            while k != self.root:
                k = self.parents[k]
                d += 1
            depth.append(d)
        return sorted(range(self.joints), key=lambda i: (depth[i], i))

    def to_dict(self) -> dict:
        return {"parents": list(self.parents), "offsets": [list(o) for o in self.offsets],
                "mirror_pairs": [list(p) for p in self.mirror_pairs], "root": self.root,
                "names": list(self.names)}

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonSpec":
        return cls(parents=tuple(d["parents"]), offsets=tuple(tuple(o) for o in d["offsets"]),
                   mirror_pairs=tuple(tuple(p) for p in d["mirror_pairs"]), root=d.get("root", 0),
                   names=tuple(d.get("names", ())))


def h36m_skeleton() -> SkeletonSpec:
    """17-joint Human3.6M-style topology with fixed bone lengths, left side at +X."""
    return SkeletonSpec(
        names=("pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "spine",
               "thorax", "nose", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder",
               "r_elbow", "r_wrist"),
        parents=(0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15),
        offsets=(
            (0.0, 0.0, 0.0),
            (-130.0, 0.0, 0.0), (0.0, 450.0, 0.0), (0.0, 440.0, 0.0),
            (130.0, 0.0, 0.0), (0.0, 450.0, 0.0), (0.0, 440.0, 0.0),
            (0.0, -230.0, 0.0), (0.0, -250.0, 0.0), (0.0, -110.0, -80.0), (0.0, -115.0, 0.0),
            (150.0, 0.0, 0.0), (0.0, 280.0, 0.0), (0.0, 250.0, 0.0),
            (-150.0, 0.0, 0.0), (0.0, 280.0, 0.0), (0.0, 250.0, 0.0),
        ),
        mirror_pairs=((1, 4), (2, 5), (3, 6), (11, 14), (12, 15), (13, 16)),
    )


@dataclass(frozen=True)
class CameraModel:
    fx: float = 1145.0
    fy: float = 1145.0
    cx: float = 500.0
    cy: float = 500.0
    width: int = 1000
    height: int = 1000
    skew: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    def project(self, points: np.ndarray) -> np.ndarray:
        """Pinhole projection of (..., 3) camera-space mm points to (..., 2) pixels."""
        p = np.asarray(points, dtype=np.float64)
        z = p[..., 2]
        if np.any(z <= 0):
            bad = sorted({int(i) for i in np.argwhere(z <= 0)[:, -1]}) if z.ndim else []
            raise ProjectionError(f"nonpositive depth at joint(s) {bad}")
        u = self.fx * p[..., 0] / z + self.skew * p[..., 1] / z + self.cx
        v = self.fy * p[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PoseSeq:
    data: np.ndarray  # (T, J, D)
    units: str
    camera: CameraModel | None = None
    root: np.ndarray | None = None  # (T, 3) absolute root trajectory, mm

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[-1] not in (1, 2, 3):
            raise ValueError(f"PoseSeq data must be (T, J, D) with D in 1..3, got {self.data.shape}")
        if self.units not in UNITS:
            raise ValueError(f"units must be one of {UNITS}")
        if self.units in ("px", "normalized") and self.data.shape[-1] != 2:
            raise ValueError(f"{self.units} sequences are 2D")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("PoseSeq has non-finite entries")
        if self.root is not None:
            self.root = np.asarray(self.root, dtype=np.float64)
            if self.root.shape != (self.data.shape[0], 3):
                raise ValueError(f"root trajectory must be (T, 3), got {self.root.shape}")

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, PoseSeq):
            return NotImplemented
        same_root = (self.root is None and other.root is None) or (
            self.root is not None and other.root is not None and np.array_equal(self.root, other.root))
        return (self.units == other.units and self.camera == other.camera and same_root
                and self.data.shape == other.data.shape and np.array_equal(self.data, other.data))


# ---------------------------------------------------------------------------
# synthetic motion


def _rotation(angles: np.ndarray) -> np.ndarray:
    """(..., 3) XYZ Euler angles -> (..., 3, 3) rotation matrices Rz @ Ry @ Rx."""
    a, b, c = angles[..., 0], angles[..., 1], angles[..., 2]
    ca, sa, cb, sb, cc, sc = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(c), np.sin(c)
    one, zero = np.ones_like(a), np.zeros_like(a)
    rx = np.stack([one, zero, zero, zero, ca, -sa, zero, sa, ca], -1).reshape(*a.shape, 3, 3)
    ry = np.stack([cb, zero, sb, zero, one, zero, -sb, zero, cb], -1).reshape(*a.shape, 3, 3)
    rz = np.stack([cc, -sc, zero, sc, cc, zero, zero, zero, one], -1).reshape(*a.shape, 3, 3)
    return rz @ ry @ rx


def _sinusoids(rng: Rng, frames: int, count: int, amplitude: float, fps: float = 50.0) -> np.ndarray:
    """(frames, count) smooth signals, each a sum of 2-4 seeded sinusoids."""
    t = np.arange(frames) / fps
    out = np.zeros((frames, count))
    for i in range(count):
        k = int(rng.integers(2, 5))
        amps = rng.uniform(0.0, amplitude / k, (k,))
        freqs = rng.uniform(0.1, 1.5, (k,))
        phases = rng.uniform(0.0, 2 * math.pi, (k,))
        out[:, i] = (amps[None] * np.sin(2 * math.pi * freqs[None] * t[:, None] + phases[None])).sum(1)
    return out


def forward_kinematics(skeleton: SkeletonSpec, joint_angles: np.ndarray, root_angles: np.ndarray,
                       root_pos: np.ndarray) -> np.ndarray:
    """Absolute (T, J, 3) joint positions from per-joint local rotations."""
    frames = root_pos.shape[0]
    offsets = np.asarray(skeleton.offsets, dtype=np.float64)
    local = _rotation(joint_angles)  # (T, J, 3, 3)
    glob = np.zeros((frames, skeleton.joints, 3, 3))
    pos = np.zeros((frames, skeleton.joints, 3))
    for j in skeleton.order():
        if j == skeleton.root:
            glob[:, j] = _rotation(root_angles) @ local[:, j]
            pos[:, j] = root_pos
        else:
            p = skeleton.parents[j]
            pos[:, j] = pos[:, p] + np.einsum("tab,b->ta", glob[:, p], offsets[j])
            glob[:, j] = glob[:, p] @ local[:, j]
    return pos


def _in_frustum(points: np.ndarray, camera: CameraModel) -> bool:
    z = points[..., 2]
    if np.any(z < Z_RANGE[0]) or np.any(z > Z_RANGE[1]):
        return False
    uv = camera.project(points)
    return bool(np.all(uv[..., 0] >= 0) and np.all(uv[..., 0] <= camera.width)
                and np.all(uv[..., 1] >= 0) and np.all(uv[..., 1] <= camera.height))


def synthesize_sequence(seed: int, frames: int, skeleton: SkeletonSpec, camera: CameraModel,
                        max_attempts: int = 100):
    """One sequence: (2D px PoseSeq, root-relative 3D mm PoseSeq)."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    base = Rng(seed)
    for attempt in range(max_attempts):
        rng = base.child(f"attempt{attempt}")
        joint_angles = _sinusoids(rng.child("joints"), frames, skeleton.joints * 3, 0.6)
        joint_angles = joint_angles.reshape(frames, skeleton.joints, 3)
        joint_angles[:, skeleton.root] = 0.0
        root_angles = _sinusoids(rng.child("root_rot"), frames, 3, 0.15)
        root_angles[:, 1] += rng.uniform(-math.pi, math.pi)
        start = np.array([rng.uniform(-400, 400), rng.uniform(-150, 150), rng.uniform(3000, 5000)])
        root_pos = start + _sinusoids(rng.child("root_pos"), frames, 3, 400.0)
        pts = forward_kinematics(skeleton, joint_angles, root_angles, root_pos)
        if _in_frustum(pts, camera):
            root = pts[:, skeleton.root].copy()
            pose2d = PoseSeq(camera.project(pts), "px", camera=camera, root=root)
            pose3d = PoseSeq(pts - root[:, None], "mm", camera=camera, root=root)
            return pose2d, pose3d
    raise GenerationError(f"seed {seed}: no in-frustum sequence after {max_attempts} attempts")


def sequence_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in Rng(seed).child("sequences").integers(0, 2**63 - 1, (n,))]


def generate_synthetic(seed: int, n_sequences: int, frames: int, skeleton: SkeletonSpec | None = None,
                       camera: CameraModel | None = None):
    """List of (2D px, 3D mm, root trajectory) triples, fully determined by ``seed``."""
    skeleton = skeleton or h36m_skeleton()
    camera = camera or CameraModel()
    out = []
    for s in sequence_seeds(seed, n_sequences):
        p2, p3 = synthesize_sequence(s, frames, skeleton, camera)
        out.append((p2, p3, p3.root))
    return out


# ---------------------------------------------------------------------------
# preprocessing and augmentation


def normalize_2d(pose: PoseSeq, camera: CameraModel | None = None) -> PoseSeq:
    camera = camera or pose.camera
    if camera is None:
        raise ValueError("normalize_2d needs a camera")
    if pose.units != "px":
        raise ValueError(f"expected px units, got {pose.units}")
    return replace(pose, data=normalize_px(pose.data, camera), units="normalized", camera=camera)


def normalize_px(uv: np.ndarray, camera: CameraModel) -> np.ndarray:
    w, h = camera.width, camera.height
    out = np.empty_like(np.asarray(uv, dtype=np.float64))
    out[..., 0] = 2.0 * (uv[..., 0] - w / 2.0) / w
    out[..., 1] = 2.0 * (uv[..., 1] - h / 2.0) / w
    return out


def denormalize_2d(pose: PoseSeq, camera: CameraModel | None = None) -> PoseSeq:
    camera = camera or pose.camera
    if camera is None:
        raise ValueError("denormalize_2d needs a camera")
    w, h = camera.width, camera.height
    uv = np.empty_like(pose.data)
    uv[..., 0] = pose.data[..., 0] * w / 2.0 + w / 2.0
    uv[..., 1] = pose.data[..., 1] * w / 2.0 + h / 2.0
    return replace(pose, data=uv, units="px", camera=camera)


def horizontal_flip(pose: PoseSeq, skeleton: SkeletonSpec) -> PoseSeq:
    """Mirror about the image's vertical mid-line and swap left/right joints."""
    if not skeleton.mirror_pairs:
        raise ValueError("skeleton has no mirror pairs")
    if pose.shape[1] != skeleton.joints:
        raise ValueError("pose and skeleton joint counts differ")
    d = pose.data[:, skeleton.mirror_permutation()].copy()
    root = None if pose.root is None else pose.root * np.array([-1.0, 1.0, 1.0])
    if pose.units == "px":
        if pose.camera is None:
            raise ValueError("px flip needs the camera width")
        d[..., 0] = pose.camera.width - d[..., 0]
    else:
        d[..., 0] = -d[..., 0]
    return replace(pose, data=d, root=root)


def add_gaussian_noise(pose: PoseSeq, sigma_px: float, rng: Rng) -> PoseSeq:
    if sigma_px < 0:
        raise ValueError("sigma must be >= 0")
    if pose.units != "px":
        raise ValueError("noise is defined in pixels")
    if sigma_px == 0:
        return replace(pose, data=pose.data.copy())
    return replace(pose, data=pose.data + sigma_px * rng.normal(pose.shape))


# ---------------------------------------------------------------------------
# PSEQ files

_HEADER = struct.Struct("<4sBIIIBB")
_CAMERA = struct.Struct("<5d2I")


def pseq_bytes(pose: PoseSeq, float64: bool = False) -> bytes:
    t, j, d = pose.shape
    flags = (FLAG_CAMERA if pose.camera else 0) | (FLAG_ROOT if pose.root is not None else 0)
    flags |= FLAG_F64 if float64 else 0
    parts = [_HEADER.pack(PSEQ_MAGIC, PSEQ_VERSION, t, j, d, UNITS.index(pose.units), flags),
             pose.data.astype("<f8" if float64 else "<f4").tobytes()]
    if pose.camera:
        c = pose.camera
        parts += [struct.pack("<I", _CAMERA.size),
                  _CAMERA.pack(c.fx, c.fy, c.cx, c.cy, c.skew, c.width, c.height)]
    if pose.root is not None:
        parts += [struct.pack("<I", t * 24), pose.root.astype("<f8").tobytes()]
    return b"".join(parts)


def parse_pseq(buf: bytes) -> PoseSeq:
    if len(buf) < 4 or buf[:4] != PSEQ_MAGIC:
        raise MagicError("not a PSEQ file (bad magic)")
    if len(buf) < 5:
        raise TruncatedError("missing version byte")
    if buf[4] != PSEQ_VERSION:
        raise VersionError(f"unsupported PSEQ version {buf[4]}")
    if len(buf) < _HEADER.size:
        raise TruncatedError("truncated header")
    _, _, t, j, d, units, flags = _HEADER.unpack_from(buf)
    if units >= len(UNITS) or d not in (1, 2, 3) or flags & ~(FLAG_CAMERA | FLAG_ROOT | FLAG_F64):
        raise HeaderError(f"inconsistent header (D={d}, units={units}, flags={flags:#x})")
    width = 8 if flags & FLAG_F64 else 4
    pos = _HEADER.size
    n = t * j * d * width
    if len(buf) < pos + n:
        raise TruncatedError(f"payload needs {n} bytes for T*J*D={t}*{j}*{d}, found {len(buf) - pos}")
    data = np.frombuffer(buf, dtype="<f8" if flags & FLAG_F64 else "<f4", count=t * j * d, offset=pos)
    data = data.astype(np.float64).reshape(t, j, d)
    pos += n

    def block(expected: int, what: str) -> bytes:
        nonlocal pos
        if len(buf) < pos + 4:
            raise TruncatedError(f"missing {what} block length")
        (length,) = struct.unpack_from("<I", buf, pos)
        if length != expected:
            raise HeaderError(f"{what} block length {length}, expected {expected}")
        if len(buf) < pos + 4 + length:
            raise TruncatedError(f"truncated {what} block")
        raw = buf[pos + 4:pos + 4 + length]
        pos += 4 + length
        return raw

    camera = root = None
    if flags & FLAG_CAMERA:
        fx, fy, cx, cy, skew, w, h = _CAMERA.unpack(block(_CAMERA.size, "camera"))
        camera = CameraModel(fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h, skew=skew)
    if flags & FLAG_ROOT:
        root = np.frombuffer(block(t * 24, "root"), dtype="<f8").astype(np.float64).reshape(t, 3)
    if pos != len(buf):
        raise HeaderError(f"{len(buf) - pos} unexpected trailing bytes")
    try:
        return PoseSeq(data, UNITS[units], camera=camera, root=root)
    except ValueError as exc:
        raise HeaderError(str(exc)) from exc


def write_pseq(path, pose: PoseSeq, float64: bool = False) -> None:
    Path(path).write_bytes(pseq_bytes(pose, float64))


def read_pseq(path) -> PoseSeq:
    return parse_pseq(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# datasets on disk


@dataclass
class SequenceEntry:
    id: str
    seed: int
    split: str
    pose2d: str
    pose3d: str


@dataclass
class Manifest:
    skeleton: SkeletonSpec
    camera: CameraModel
    frames: int
    sequences: list[SequenceEntry] = field(default_factory=list)
    seed: int = 0
    version: int = MANIFEST_VERSION

    def to_dict(self) -> dict:
        return {"version": self.version, "seed": self.seed, "frames": self.frames,
                "skeleton": self.skeleton.to_dict(), "camera": self.camera.to_dict(),
                "sequences": [asdict(s) for s in self.sequences]}

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        if d.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {d.get('version')}")
        return cls(skeleton=SkeletonSpec.from_dict(d["skeleton"]), camera=CameraModel(**d["camera"]),
                   frames=d["frames"], sequences=[SequenceEntry(**s) for s in d["sequences"]],
                   seed=d.get("seed", 0))


def write_dataset(out_dir, seed: int, n_sequences: int, frames: int, val_fraction: float = 0.125,
                  skeleton: SkeletonSpec | None = None, camera: CameraModel | None = None) -> Manifest:
    skeleton = skeleton or h36m_skeleton()
    camera = camera or CameraModel()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_val = int(round(n_sequences * val_fraction))
    manifest = Manifest(skeleton=skeleton, camera=camera, frames=frames, seed=seed)
    for i, s in enumerate(sequence_seeds(seed, n_sequences)):
        p2, p3 = synthesize_sequence(s, frames, skeleton, camera)
        sid = f"seq{i:04d}"
        write_pseq(out / f"{sid}_2d.pseq", p2, float64=True)
        write_pseq(out / f"{sid}_3d.pseq", p3, float64=True)
        split = "val" if i >= n_sequences - n_val else "train"
        manifest.sequences.append(SequenceEntry(sid, s, split, f"{sid}_2d.pseq", f"{sid}_3d.pseq"))
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(path) -> Manifest:
    return Manifest.from_dict(json.loads(Path(path).read_text()))


@dataclass
class PoseDataset:
    """Stacked sequences: 2D pixels (N, T, J, 2), root-relative 3D mm (N, T, J, 3), roots (N, T, 3)."""

    pose2d_px: np.ndarray
    pose3d_mm: np.ndarray
    root_mm: np.ndarray
    camera: CameraModel
    skeleton: SkeletonSpec
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.pose2d_px.shape[0]

    @property
    def frames(self) -> int:
        return self.pose2d_px.shape[1]

    @property
    def joints(self) -> int:
        return self.pose2d_px.shape[2]

    def subset(self, idx: Sequence[int]) -> "PoseDataset":
        idx = list(idx)
        return replace(self, pose2d_px=self.pose2d_px[idx], pose3d_mm=self.pose3d_mm[idx],
                       root_mm=self.root_mm[idx], ids=[self.ids[i] for i in idx] if self.ids else [])

    def inputs(self, pose2d_px: np.ndarray | None = None) -> np.ndarray:
        return normalize_px(self.pose2d_px if pose2d_px is None else pose2d_px, self.camera)

    @classmethod
    def from_triples(cls, triples, skeleton: SkeletonSpec | None = None, ids=None) -> "PoseDataset":
        skeleton = skeleton or h36m_skeleton()
        p2 = np.stack([t[0].data for t in triples])
        p3 = np.stack([t[1].data for t in triples])
        root = np.stack([t[2] for t in triples])
        camera = triples[0][0].camera
        return cls(p2, p3, root, camera, skeleton, list(ids or [f"seq{i:04d}" for i in range(len(triples))]))


def load_dataset(manifest_path, split: str | None = None) -> PoseDataset:
    path = Path(manifest_path)
    manifest = read_manifest(path)
    base = path.parent
    entries = [s for s in manifest.sequences if split is None or s.split == split]
    triples = []
    for e in entries:
        p2 = read_pseq(base / e.pose2d)
        p3 = read_pseq(base / e.pose3d)
        if p3.root is None:
            raise HeaderError(f"{e.pose3d} lacks a root trajectory")
        triples.append((p2, p3, p3.root))
    if not triples:
        return PoseDataset(np.zeros((0, manifest.frames, manifest.skeleton.joints, 2)),
                           np.zeros((0, manifest.frames, manifest.skeleton.joints, 3)),
                           np.zeros((0, manifest.frames, 3)), manifest.camera, manifest.skeleton, [])
    ds = PoseDataset.from_triples(triples, manifest.skeleton, [e.id for e in entries])
    ds.camera = manifest.camera
    return ds


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

