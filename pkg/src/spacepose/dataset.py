"""Sequence storage, balanced Stage-1 resampling, augmentation and sliding windows."""

from __future__ import annotations

import hashlib
import json
import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from spacepose import geometry as geo
from spacepose.errors import ConfigError, FormatError, FrameCountMismatch

SEQ_MAGIC = b"CHSQ"
SEQ_VERSION = 1
PARTITION_CHOICES = (64.0, 128.0, 256.0, 512.0)


@dataclass
class Frame:
    index: int
    time: float
    image: np.ndarray
    pose: geo.Pose


@dataclass
class Sequence:
    """Frames are held as stacked arrays; :meth:`frame` gives a per-frame view."""

    seq_id: str
    intrinsics: geo.CameraIntrinsics
    fps: float
    times: np.ndarray        # [T]
    images: np.ndarray       # [T, 4, H, W] float32
    rotations: np.ndarray    # [T, 3, 3]
    positions: np.ndarray    # [T, 3]
    keypoints: np.ndarray    # [N, 3]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.times)
        if not (len(self.images) == len(self.rotations) == len(self.positions) == n):
            raise ConfigError("sequence arrays disagree on frame count")
        if self.images.ndim != 4 or self.images.shape[1] != 4:
            raise ConfigError(f"images must be [T, 4, H, W], got {self.images.shape}")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def height(self) -> int:
        return self.images.shape[2]

    @property
    def width(self) -> int:
        return self.images.shape[3]

    def pose(self, kappa: int) -> geo.Pose:
        return geo.Pose(self.rotations[kappa], self.positions[kappa])

    def frame(self, kappa: int) -> Frame:
        return Frame(kappa, float(self.times[kappa]), self.images[kappa], self.pose(kappa))

    @property
    def frames(self) -> list[Frame]:
        return [self.frame(k) for k in range(len(self))]


@dataclass
class Stage1Sample:
    image: np.ndarray
    cls: int
    num_classes: int
    position: np.ndarray
    rotation: np.ndarray

    @property
    def onehot(self) -> np.ndarray:
        a = np.zeros(self.num_classes, dtype=np.float32)
        a[self.cls] = 1.0
        return a


@dataclass(frozen=True)
class Window:
    seq_id: str
    start: int
    stop: int
    state_id: int                 # id of the state this window exports
    carry_in: int | None          # state id carried in, None for a fresh start
    export_step: int              # frames into the window after which the exported state is taken

    @property
    def indices(self) -> range:
        return range(self.start, self.stop)


# ---------------------------------------------------------------- storage

def _manifest(seq: Sequence) -> dict:
    frames = []
    for k in range(len(seq)):
        q = geo.rotation_to_quaternion(seq.rotations[k])
        frames.append({"q": [float(v) for v in q], "t": [float(v) for v in seq.positions[k]],
                       "tau": float(seq.times[k])})
    return {
        "id": seq.seq_id, "fps": float(seq.fps), "W": seq.width, "H": seq.height,
        "K": [float(v) for v in seq.intrinsics.matrix.ravel()],
        "keypoints": seq.keypoints.tolist(), "profile": seq.meta,
        "frame_count": len(seq), "frames": frames,
    }


def _frames_blob(seq: Sequence) -> bytes:
    head = SEQ_MAGIC + struct.pack("<HI", SEQ_VERSION, len(seq))
    return head + np.ascontiguousarray(seq.images, dtype="<f4").tobytes()


def sequence_hash(seq: Sequence) -> str:
    """SHA-256 over the serialised manifest and frame binary."""
    h = hashlib.sha256()
    h.update(json.dumps(_manifest(seq), sort_keys=True).encode("utf-8"))
    h.update(_frames_blob(seq))
    return h.hexdigest()


def write_sequence(seq: Sequence, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "manifest.json").write_text(json.dumps(_manifest(seq), indent=1), encoding="utf-8")
    (d / "frames.bin").write_bytes(_frames_blob(seq))
    return d


def read_sequence(directory) -> Sequence:
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    blob = (d / "frames.bin").read_bytes()
    if len(blob) < 10 or blob[:4] != SEQ_MAGIC:
        raise FormatError("frames.bin: bad magic")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != SEQ_VERSION:
        raise FormatError(f"frames.bin: unsupported version {version}")
    w, h = int(man["W"]), int(man["H"])
    if count != man["frame_count"] or len(man["frames"]) != count:
        raise FrameCountMismatch(f"manifest says {man['frame_count']} frames, binary header says {count}")
    per = 4 * h * w * 4
    payload = blob[10:]
    if len(payload) != per * count:
        raise FrameCountMismatch(f"binary holds {len(payload) / per:g} frames, expected {count}")
    images = np.frombuffer(payload, dtype="<f4").reshape(count, 4, h, w).astype(np.float32)

    rots = np.empty((count, 3, 3))
    pos = np.empty((count, 3))
    times = np.empty(count)
    for k, fr in enumerate(man["frames"]):
        q = np.asarray(fr["q"], dtype=np.float64)
        if abs(np.linalg.norm(q) - 1.0) > geo.QUAT_UNIT_TOL:
            raise FormatError(f"frame {k}: quaternion is not unit norm")
        rots[k] = geo.quaternion_to_rotation(q)
        pos[k] = fr["t"]
        times[k] = fr["tau"]
    return Sequence(seq_id=man["id"], intrinsics=geo.CameraIntrinsics.from_matrix(man["K"]), fps=man["fps"],
                    times=times, images=images, rotations=rots, positions=pos,
                    keypoints=np.asarray(man["keypoints"], dtype=np.float64), meta=man["profile"])


# ---------------------------------------------------------------- stage 1 resampling

def stage1_resample(sequences, grid: geo.ViewsphereGrid, k_t: int, n_s2: int, rng) -> list[Stage1Sample]:
    """Class-balanced sample of exactly ``n_s2`` frames per represented viewsphere class.

    Within a class, draws are spread evenly over the occupied depth bins,
    oversampling with replacement where a bin is too small.
    """
    if n_s2 < 1 or k_t < 1:
        raise ConfigError("n_s2 and k_t must be >= 1")
    refs, classes, ranges = [], [], []
    for si, seq in enumerate(sequences):
        for k in range(len(seq)):
            refs.append((si, k))
            classes.append(geo.viewsphere_class(seq.rotations[k], grid))
            ranges.append(float(np.linalg.norm(seq.positions[k])))
    if not refs:
        raise ConfigError("no observations to resample")
    classes = np.array(classes)
    edges = geo.depth_edges(ranges, k_t)
    bins = np.array([geo.depth_bin((0.0, 0.0, r), edges) for r in ranges])

    picked = []
    for c in np.unique(classes):
        members = np.flatnonzero(classes == c)
        occupied = np.unique(bins[members])
        per_bin = math.ceil(n_s2 / len(occupied))
        groups = []
        for b in occupied:
            pool = members[bins[members] == b]
            replace_ = len(pool) < per_bin
            groups.append(list(pool[rng.choice(len(pool), size=per_bin, replace=replace_)]))
        # Trim the excess one item per bin so bin counts stay within one of each other.
        excess = per_bin * len(occupied) - n_s2
        for g in rng.choice(len(groups), size=excess, replace=False):
            groups[g].pop(int(rng.integers(len(groups[g]))))
        for g in groups:
            picked.extend(g)

    out = []
    for i in rng.permutation(len(picked)):
        si, k = refs[picked[i]]
        seq = sequences[si]
        out.append(Stage1Sample(seq.images[k], int(classes[picked[i]]), grid.num_classes,
                                seq.positions[k].copy(), seq.rotations[k].copy()))
    return out


# ---------------------------------------------------------------- augmentation

_BLUR = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0


def warp_rotation(image: np.ndarray, k: geo.CameraIntrinsics, r_p: np.ndarray) -> np.ndarray:
    """Warp a [C, H, W] image by the homography ``K R_p K^-1`` (bilinear, border replicated)."""
    km = k.matrix
    h_inv = km @ r_p.T @ np.linalg.inv(km)
    c, hgt, wid = image.shape
    v, u = np.mgrid[0:hgt, 0:wid].astype(np.float64)
    src = h_inv @ np.stack([u.ravel(), v.ravel(), np.ones(u.size)])
    su, sv = src[0] / src[2], src[1] / src[2]
    out = np.empty_like(image)
    for ch in range(c):
        out[ch] = ndimage.map_coordinates(image[ch], [sv, su], order=1, mode="nearest").reshape(hgt, wid)
    return out


def augment(item, rng, strength: float, k: geo.CameraIntrinsics, photometric: bool = True,
            geometric: bool = True):
    """Randomly perturb a :class:`Frame` or :class:`Stage1Sample`; returns a new object of the same type.

    The pose is only changed by the geometric part, pixel positions only by
    the geometric part. Thermal gets noise and dropout but no brightness or
    contrast change. The Stage-1 class label is kept as is.
    """
    if not 0.0 <= strength <= 1.0:
        raise ConfigError("augmentation strength must lie in [0, 1]")
    image = np.array(item.image, dtype=np.float32, copy=True)
    if isinstance(item, Frame):
        rot, pos = item.pose.rotation, item.pose.position
    else:
        rot, pos = item.rotation, item.position
    if strength == 0.0:
        return _rebuild(item, image, rot, pos)

    if geometric:
        angles = np.radians(rng.uniform(-2.0, 2.0, size=3)) * strength
        r_p = geo.euler_xyz_to_rotation(*angles)
        image = warp_rotation(image, k, r_p)
        rot, pos = r_p @ rot, r_p @ pos

    if photometric:
        rgb = image[:3]
        rgb += np.float32(rng.uniform(-0.2, 0.2) * strength)
        mean = rgb.mean()
        rgb[:] = (rgb - mean) * np.float32(rng.uniform(0.8, 1.2) ** strength) + mean
        if rng.uniform() < 0.3 * strength:
            for ch in range(3):
                rgb[ch] = ndimage.convolve(rgb[ch], _BLUR, mode="nearest")
        sigma = 0.02 * strength
        image += rng.normal(0.0, sigma, size=image.shape, dtype=np.float32)
        keep = 1.0 - rng.bernoulli(0.05 * strength, size=image.shape[1:])
        image *= keep[None]
        np.clip(image, 0.0, 1.0, out=image)
    return _rebuild(item, image, rot, pos)


def _rebuild(item, image, rot, pos):
    if isinstance(item, Frame):
        return Frame(item.index, item.time, image, geo.Pose(rot, pos))
    return replace(item, image=image, rotation=np.array(rot), position=np.array(pos))


# ---------------------------------------------------------------- windows and partitions

def sliding_windows(length: int, window: int, stride: int, seq_id: str = "") -> list[Window]:
    if stride < 1 or window < 1:
        raise ConfigError("window and stride must be >= 1")
    if window > length:
        warnings.warn(f"window {window} longer than sequence {length}; no windows", stacklevel=2)
        return []
    out = []
    for i, start in enumerate(range(0, length - window + 1, stride)):
        out.append(Window(seq_id, start, start + window, state_id=i, carry_in=i - 1 if i else None,
                          export_step=min(stride, window)))
    return out


def sample_training_lengths(total: float, rng, choices=PARTITION_CHOICES) -> list[float]:
    """Split ``total`` seconds into randomly sized partitions drawn from ``choices``."""
    choices = sorted(choices)
    if total < choices[0]:
        return [total]
    parts, remaining = [], total
    while remaining >= choices[0]:
        allowed = [c for c in choices if c <= remaining]
        d = allowed[int(rng.integers(len(allowed)))]
        parts.append(d)
        remaining -= d
    if remaining > 0:
        parts[-1] += remaining
    return parts
