"""Procedural RGBT rendezvous sequences with exact ground-truth poses.

The target is a stylised bus-plus-solar-array model rendered with a flat-shaded
painter's rasteriser. Visible channels get Lambertian sun lighting, a Phong
glare lobe on the array and an optional Earth disk behind the target; the
thermal channel depends only on per-face radiance and viewing angle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from spacepose import geometry as geo
from spacepose.dataset import Sequence
from spacepose.diff.rng import Rng, derive_seed
from spacepose.errors import ConfigError

PHONG_EXPONENT = 32
LATERAL_AMPLITUDE = 0.02


@dataclass
class TargetModel:
    vertices: np.ndarray      # [V, 3] target frame, metres
    faces: np.ndarray         # [F, 3] vertex indices, counter-clockwise seen from outside
    albedo: np.ndarray        # [F]
    specular: np.ndarray      # [F]
    thermal: np.ndarray       # [F]
    tint: np.ndarray          # [F, 3] RGB colour multiplying the albedo
    keypoints: np.ndarray     # [N, 3]
    keypoint_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.keypoints) < 6:
            raise ConfigError("need at least 6 keypoints")
        centred = self.keypoints - self.keypoints.mean(axis=0)
        if np.linalg.matrix_rank(centred, tol=1e-9) < 3:
            raise ConfigError("keypoints are coplanar")

    @property
    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.vertices, axis=1).max())

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)


def _box(center, half):
    c, h = np.asarray(center, float), np.asarray(half, float)
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
    verts = c + corners * h
    # (axis, sign) -> quad in corner indices; winding fixed below by the outward normal.
    quads = {
        (0, 1): (4, 5, 7, 6), (0, -1): (0, 2, 3, 1),
        (1, 1): (2, 6, 7, 3), (1, -1): (0, 1, 5, 4),
        (2, 1): (1, 3, 7, 5), (2, -1): (0, 4, 6, 2),
    }
    tris, tags = [], []
    for (axis, sign), (a, b, cc, d) in quads.items():
        for tri in ((a, b, cc), (a, cc, d)):
            p = verts[list(tri)]
            n = np.cross(p[1] - p[0], p[2] - p[0])
            if n[axis] * sign < 0:
                tri = (tri[0], tri[2], tri[1])
            tris.append(tri)
            tags.append((axis, sign))
    return verts, np.array(tris), tags


def make_default_target() -> TargetModel:
    """1 m cubic bus with a 2 m x 1 m solar panel on a short boom along +y."""
    parts = [
        ("bus", (0, 0, 0), (0.5, 0.5, 0.5)),
        ("boom", (0, 0.525, 0), (0.03, 0.025, 0.03)),
        ("panel", (0, 1.55, 0), (0.5, 1.0, 0.01)),
    ]
    bus_albedo = {(0, 1): 0.85, (0, -1): 0.55, (1, 1): 0.7, (1, -1): 0.45, (2, 1): 0.95, (2, -1): 0.35}
    bus_thermal = {(0, 1): 0.9, (0, -1): 0.7, (1, 1): 0.8, (1, -1): 0.75, (2, 1): 0.95, (2, -1): 0.6}
    verts, faces, alb, spec, therm, tint = [], [], [], [], [], []
    offset = 0
    for name, center, half in parts:
        v, f, tags = _box(center, half)
        verts.append(v)
        faces.append(f + offset)
        offset += len(v)
        for axis, sign in tags:
            if name == "bus":
                alb.append(bus_albedo[(axis, sign)])
                spec.append(0.0)
                therm.append(bus_thermal[(axis, sign)])
                tint.append((1.0, 0.85, 0.45))  # gold MLI
            elif name == "boom":
                alb.append(0.5)
                spec.append(0.0)
                therm.append(0.4)
                tint.append((0.8, 0.8, 0.8))
            elif axis == 2 and sign > 0:  # cell side
                alb.append(0.25)
                spec.append(1.0)
                therm.append(0.25)
                tint.append((0.35, 0.45, 1.0))
            elif axis == 2:
                alb.append(0.6)
                spec.append(0.6)
                therm.append(0.35)
                tint.append((0.9, 0.9, 0.9))
            else:
                alb.append(0.5)
                spec.append(0.0)
                therm.append(0.3)
                tint.append((0.7, 0.7, 0.7))
    bus_corners = np.array([[sx, sy, sz] for sx in (-0.5, 0.5) for sy in (-0.5, 0.5) for sz in (-0.5, 0.5)])
    tips = np.array([[-0.5, 2.55, 0.0], [0.5, 2.55, 0.0]])
    names = [f"bus_{i}" for i in range(8)] + ["panel_tip_neg_x", "panel_tip_pos_x"]
    return TargetModel(
        vertices=np.vstack(verts), faces=np.vstack(faces), albedo=np.array(alb), specular=np.array(spec),
        thermal=np.array(therm), tint=np.array(tint), keypoints=np.vstack([bus_corners, tips]),
        keypoint_names=names,
    )


# ---------------------------------------------------------------- motion profiles

@dataclass(frozen=True)
class GuidanceProfile:
    kind: str = "fixed-range"          # or "forced-translation"
    range: float = 10.0
    start: float = 14.0
    end: float = 7.0
    duration: float = 60.0
    approach: str = "v-bar"            # or "r-bar"
    lateral_periods: tuple[float, float] = (37.0, 53.0)

    def __post_init__(self):
        if self.kind not in ("fixed-range", "forced-translation"):
            raise ConfigError(f"unknown guidance kind {self.kind!r}")
        if self.approach not in ("v-bar", "r-bar"):
            raise ConfigError(f"unknown approach {self.approach!r}")
        if self.kind == "fixed-range" and self.range <= 0:
            raise ConfigError("range must be positive")
        if self.kind == "forced-translation" and not (self.start > self.end > 0):
            raise ConfigError("forced translation needs start > end > 0")
        if self.duration <= 0:
            raise ConfigError("duration must be positive")

    def range_at(self, tau: float) -> float:
        if self.kind == "fixed-range":
            return self.range
        return self.start + (self.end - self.start) * tau / self.duration

    def tags(self) -> dict:
        return {"kind": self.kind, "range": self.range, "start": self.start, "end": self.end,
                "duration": self.duration, "approach": self.approach,
                "lateral_periods": list(self.lateral_periods)}


@dataclass(frozen=True)
class TumblingProfile:
    kind: str = "single-axis"          # "two-axis" or "precession"
    axis: tuple[float, float, float] = (0.0, 1.0, 0.0)
    rate: float = 6.0                  # deg/s
    axis2: tuple[float, float, float] = (1.0, 0.0, 0.0)
    rate2: float = 2.0                 # deg/s
    tilt: float = 45.0                 # deg, spin axis from the precession axis
    precession_rate: float = 30.0      # deg/min
    initial: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("single-axis", "two-axis", "precession"):
            raise ConfigError(f"unknown tumbling kind {self.kind!r}")
        if self.rate == 0 or (self.kind == "two-axis" and self.rate2 == 0):
            raise ConfigError("tumbling rates must be non-zero")
        if self.kind == "precession" and (not 0 < self.tilt < 90 or self.precession_rate == 0):
            raise ConfigError("precession needs tilt in (0, 90) deg and a non-zero rate")

    def rotation_at(self, tau: float) -> np.ndarray:
        r0 = geo.quaternion_to_rotation(np.asarray(self.initial) / np.linalg.norm(self.initial))
        if self.kind == "single-axis":
            return geo.axis_angle_to_rotation(self.axis, math.radians(self.rate * tau)) @ r0
        if self.kind == "two-axis":
            return (geo.axis_angle_to_rotation(self.axis, math.radians(self.rate * tau))
                    @ geo.axis_angle_to_rotation(self.axis2, math.radians(self.rate2 * tau)) @ r0)
        # Spin about a0, with a0 itself rotating about the boresight-orthogonal axis `axis`.
        ref = np.asarray(self.axis, float) / np.linalg.norm(self.axis)
        lever = np.cross(ref, (0.0, 0.0, 1.0))
        if np.linalg.norm(lever) < 1e-9:
            raise ConfigError("precession axis must be orthogonal-ish to the boresight")
        a0 = geo.axis_angle_to_rotation(lever, math.radians(self.tilt)) @ ref
        spin = geo.axis_angle_to_rotation(a0, math.radians(self.rate * tau))
        prec = geo.axis_angle_to_rotation(ref, math.radians(self.precession_rate / 60.0 * tau))
        return prec @ spin @ r0

    def tags(self) -> dict:
        return {"kind": self.kind, "axis": list(self.axis), "rate": self.rate, "axis2": list(self.axis2),
                "rate2": self.rate2, "tilt": self.tilt, "precession_rate": self.precession_rate,
                "initial": list(self.initial)}


def pose_at(gp: GuidanceProfile, tp: TumblingProfile, tau: float) -> geo.Pose:
    if not 0.0 <= tau <= gp.duration + 1e-9:
        raise ConfigError(f"time {tau} outside [0, {gp.duration}]")
    rho = gp.range_at(tau)
    px, py = gp.lateral_periods
    lateral = LATERAL_AMPLITUDE * rho
    t = np.array([lateral * math.sin(2 * math.pi * tau / px),
                  lateral * math.sin(2 * math.pi * tau / py + 1.0),
                  rho])
    return geo.Pose(tp.rotation_at(tau), t)


# ---------------------------------------------------------------- rendering

@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    intrinsics: geo.CameraIntrinsics = geo.CameraIntrinsics(64.0, 64.0, 31.5, 31.5)
    fps: float = 10.0
    duration: float = 60.0
    sun_direction: tuple[float, float, float] = (-0.4, -0.5, -1.0)   # camera frame, towards the sun
    glare: float = 1.0
    sigma_rgb: float = 0.01
    sigma_t: float = 0.01
    seed: int = 0
    supersample: int = 2
    earth_center: tuple[float, float] = (0.3, 1.45)   # fractions of (width, height)
    earth_radius: float = 0.8                          # fraction of height
    earth_rgb: tuple[float, float, float] = (0.45, 0.6, 0.85)
    bloom_sigma: float = 4.0                           # px

    def __post_init__(self):
        if self.fps <= 0:
            raise ConfigError("fps must be positive")
        if abs(self.duration * self.fps - round(self.duration * self.fps)) > 1e-9:
            raise ConfigError("duration * fps must be an integer")
        if self.supersample < 1:
            raise ConfigError("supersample must be >= 1")

    @property
    def num_frames(self) -> int:
        return int(round(self.duration * self.fps))


def _raster_triangle(img: np.ndarray, tri: np.ndarray, colour: np.ndarray) -> None:
    """Fill pixels whose centres fall inside the 2-D triangle ``tri`` ([3, 2], pixel units)."""
    h, w = img.shape[1:]
    x0, y0 = np.floor(tri.min(axis=0)).astype(int)
    x1, y1 = np.ceil(tri.max(axis=0)).astype(int)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w - 1), min(y1, h - 1)
    if x0 > x1 or y0 > y1:
        return
    xs, ys = np.meshgrid(np.arange(x0, x1 + 1, dtype=float), np.arange(y0, y1 + 1, dtype=float))
    (ax, ay), (bx, by), (cx, cy) = tri
    area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    if abs(area) < 1e-12:
        return
    e0 = (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)
    e1 = (cx - bx) * (ys - by) - (cy - by) * (xs - bx)
    e2 = (ax - cx) * (ys - cy) - (ay - cy) * (xs - cx)
    if area > 0:
        inside = (e0 >= 0) & (e1 >= 0) & (e2 >= 0)
    else:
        inside = (e0 <= 0) & (e1 <= 0) & (e2 <= 0)
    region = img[:, y0:y1 + 1, x0:x1 + 1]
    region[:, inside] = colour[:, None]


def render_frame(model: TargetModel, pose: geo.Pose, k: geo.CameraIntrinsics, config: SceneConfig,
                 seed: int, approach: str = "v-bar") -> np.ndarray:
    """Render a [4, H, W] float32 RGBT image with values in [0, 1]."""
    ss = config.supersample
    H, W = config.height * ss, config.width * ss
    img = np.zeros((4, H, W))
    if approach == "r-bar":
        yy, xx = np.mgrid[0:H, 0:W]
        cx, cy = config.earth_center[0] * W, config.earth_center[1] * H
        disk = (xx - cx) ** 2 + (yy - cy) ** 2 <= (config.earth_radius * H) ** 2
        img[:3, disk] = np.asarray(config.earth_rgb)[:, None]

    verts_c = pose.transform(model.vertices)
    normals_c = model.face_normals() @ pose.rotation.T
    centres = verts_c[model.faces].mean(axis=1)
    view = -centres / np.linalg.norm(centres, axis=1, keepdims=True)
    facing = (normals_c * view).sum(axis=1)
    sun = np.asarray(config.sun_direction, float)
    sun = sun / np.linalg.norm(sun)

    z = verts_c[:, 2]
    zs = np.where(z > geo.Z_MIN, z, np.nan)
    uv = np.stack([k.fx * verts_c[:, 0] / zs + k.cx, k.fy * verts_c[:, 1] / zs + k.cy], axis=1)
    uv_hr = uv * ss + (ss - 1) / 2.0   # low-res pixel centres sit between supersamples

    glare_sum = 0.0
    glare_uv = np.zeros(2)
    order = np.argsort(-centres[:, 2], kind="stable")   # far to near
    for f in order:
        if facing[f] <= 0:
            continue
        tri = uv_hr[model.faces[f]]
        if not np.isfinite(tri).all():
            continue
        n = normals_c[f]
        ndl = float(n @ sun)
        diffuse = model.albedo[f] * max(ndl, 0.0) * model.tint[f]
        spec = 0.0
        if ndl > 0 and model.specular[f] > 0:
            refl = 2 * ndl * n - sun
            spec = config.glare * model.specular[f] * max(float(refl @ view[f]), 0.0) ** PHONG_EXPONENT
        rgb = np.clip(diffuse + spec, 0.0, 1.0)
        thermal = model.thermal[f] * (0.75 + 0.25 * facing[f])
        _raster_triangle(img, tri, np.append(rgb, thermal))
        if spec > 0:
            glare_sum += spec
            glare_uv += spec * uv[model.faces[f]].mean(axis=0)

    if ss > 1:
        img = img.reshape(4, config.height, ss, config.width, ss).mean(axis=(2, 4))

    if glare_sum > 1e-3:
        # Lens bloom around the glinting array; visible channels only.
        cu, cv = glare_uv / glare_sum
        yy, xx = np.mgrid[0:config.height, 0:config.width]
        halo = np.exp(-((xx - cu) ** 2 + (yy - cv) ** 2) / (2 * config.bloom_sigma ** 2))
        img[:3] += min(glare_sum, 2.0) * halo

    rng = Rng(seed)
    img[:3] += rng.child(0).normal(0.0, config.sigma_rgb, size=img[:3].shape) if config.sigma_rgb > 0 else 0.0
    img[3] += rng.child(1).normal(0.0, config.sigma_t, size=img[3].shape) if config.sigma_t > 0 else 0.0
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_sequence(gp: GuidanceProfile, tp: TumblingProfile, model: TargetModel, config: SceneConfig,
                      seq_id: str = "seq") -> Sequence:
    if abs(gp.duration - config.duration) > 1e-9:
        raise ConfigError("guidance profile and scene durations differ")
    n = config.num_frames
    times = np.arange(n) / config.fps
    images = np.empty((n, 4, config.height, config.width), dtype=np.float32)
    rots = np.empty((n, 3, 3))
    pos = np.empty((n, 3))
    for kappa, tau in enumerate(times):
        pose = pose_at(gp, tp, float(tau))
        rots[kappa], pos[kappa] = pose.rotation, pose.position
        images[kappa] = render_frame(model, pose, config.intrinsics, config,
                                     derive_seed(config.seed, kappa), gp.approach)
    meta = {"guidance": gp.tags(), "tumbling": tp.tags(), "approach": gp.approach, "glare": config.glare}
    return Sequence(seq_id=seq_id, intrinsics=config.intrinsics, fps=config.fps, times=times, images=images,
                    rotations=rots, positions=pos, keypoints=model.keypoints.copy(), meta=meta)
