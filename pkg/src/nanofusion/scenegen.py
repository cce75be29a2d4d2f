"""
Procedural scenes, a CPU ray caster, and a multi-zone ToF simulator.

Frames and conventions
----------------------
World: z up, floor at z = 0. The subject stands at ``scene.subject_xy`` and
faces ``scene.subject_facing`` (world yaw of the direction the subject looks).

Drone/heading frame: x forward, y left, z up, gravity aligned. A label
``(x, y, z, theta)`` is the position of the subject's torso center in that
frame and the subject's yaw relative to the drone heading, with ``theta = 0``
when the subject faces the drone. Subjects left of the optical axis have
``y > 0`` and appear in the left half of the image.

Image rows run top to bottom and columns left to right; depth zones use the
same orientation, so mirroring an image and reversing depth columns are the
same geometric operation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .models import DEPTH_MAX_M, DEPTH_MIN_M, IMAGE_H, IMAGE_W, wrap_angle

N_SUBJECTS = 27
N_GAIT_POSES = 10
N_TEXTURES = 20
MAX_CLUTTER = 22
LIGHT_DIR = np.array([0.35, 0.25, 1.0]) / np.linalg.norm([0.35, 0.25, 1.0])
TORSO_HEIGHT_FRAC = 0.65


class PoseSamplingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# sensors
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraModel:
    hfov: float = math.radians(87.0)
    width: int = IMAGE_W
    height: int = IMAGE_H

    def __post_init__(self):
        if not 0.0 < self.hfov < math.pi:
            raise ValueError("camera FoV must lie in (0, pi)")

    @property
    def focal(self) -> float:
        return (self.width / 2.0) / math.tan(self.hfov / 2.0)

    @property
    def vfov(self) -> float:
        return 2.0 * math.atan((self.height / 2.0) / self.focal)

    def ray_dirs(self) -> np.ndarray:
        """Unit rays in the body frame, row-major over pixels, ``(H*W, 3)``."""
        f = self.focal
        u = np.arange(self.width) + 0.5 - self.width / 2.0
        v = np.arange(self.height) + 0.5 - self.height / 2.0
        uu, vv = np.meshgrid(u, v)
        d = np.stack([np.full(uu.shape, f), -uu, -vv], axis=-1).reshape(-1, 3)
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def project(self, p_body: np.ndarray) -> Tuple[float, float]:
        """Pixel coordinates (u, v) of a body-frame point in front of the camera."""
        x, y, z = p_body
        f = self.focal
        return self.width / 2.0 - f * y / x, self.height / 2.0 - f * z / x

    def in_frustum(self, p_body: np.ndarray, margin_px: float = 0.0) -> bool:
        if p_body[0] <= 1e-6:
            return False
        u, v = self.project(p_body)
        return (margin_px <= u <= self.width - margin_px
                and margin_px <= v <= self.height - margin_px)


@dataclass(frozen=True)
class ToFModel:
    zones: int = 8
    fov: float = math.radians(45.0)
    bundle: int = 4
    min_range: float = DEPTH_MIN_M
    max_range: float = DEPTH_MAX_M
    near_limit: float = 0.2
    near_accuracy: float = 0.015
    far_accuracy: float = 0.11
    sigmas_per_bound: float = 3.0

    @property
    def zone_fov(self) -> float:
        return self.fov / self.zones

    def zone_center_angles(self) -> Tuple[np.ndarray, np.ndarray]:
        """(azimuth per column, elevation per row); azimuth positive to the left."""
        c = (np.arange(self.zones) + 0.5) * self.zone_fov
        return self.fov / 2.0 - c, self.fov / 2.0 - c

    def ray_dirs(self) -> np.ndarray:
        """Unnormalized rays ``(zones, zones, bundle*bundle, 3)`` in the body frame."""
        sub = (np.arange(self.zones * self.bundle) + 0.5) * (self.zone_fov / self.bundle)
        ang = self.fov / 2.0 - sub
        az = ang.reshape(self.zones, self.bundle)      # columns
        el = ang.reshape(self.zones, self.bundle)      # rows
        t_az = np.tan(az)[None, :, None, :]            # (1, col, 1, bc)
        t_el = np.tan(el)[:, None, :, None]            # (row, 1, br, 1)
        shape = (self.zones, self.zones, self.bundle, self.bundle)
        d = np.stack([np.ones(shape), np.broadcast_to(t_az, shape),
                      np.broadcast_to(t_el, shape)], axis=-1)
        return d.reshape(self.zones, self.zones, self.bundle * self.bundle, 3)

    def sigma(self, d) -> np.ndarray:
        """Noise standard deviation at true range ``d`` (accuracy bounds taken as 3 sigma)."""
        d = np.asarray(d, dtype=float)
        near = self.near_accuracy / self.sigmas_per_bound
        far = self.far_accuracy * d / self.sigmas_per_bound
        return np.where(d < self.near_limit, near, far)

    def add_noise(self, d, rng: np.random.Generator) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        noisy = d + rng.standard_normal(d.shape) * self.sigma(np.nan_to_num(d, nan=0.0))
        return self.mask(noisy)

    def mask(self, d) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        ok = np.isfinite(d) & (d >= self.min_range) & (d <= self.max_range)
        return np.where(ok, d, np.nan)


# --------------------------------------------------------------------------
# scene description
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Subject:
    id: int
    height: float
    shoulder_half_width: float
    chest_half_depth: float
    limb_radius: float
    head_radius: float
    shirt: float
    pants: float
    skin: float
    hair: float
    shirt_texture: int
    gait_pose: int = 0

    @property
    def torso_height(self) -> float:
        return TORSO_HEIGHT_FRAC * self.height


def subject_library(subject_id: int, gait_pose: int = 0) -> Subject:
    """The fixed roster of 27 subjects, each with its own build and clothing."""
    if not 0 <= subject_id < N_SUBJECTS:
        raise ValueError(f"subject id must be in 0..{N_SUBJECTS - 1}")
    r = np.random.default_rng([7919, subject_id])
    height = 1.5 + 0.5 * subject_id / (N_SUBJECTS - 1)
    bulk = r.uniform(0.85, 1.25)
    skin = r.uniform(0.35, 0.85)
    return Subject(
        id=subject_id,
        height=height,
        shoulder_half_width=0.115 * height * bulk,
        chest_half_depth=0.065 * height * bulk,
        limb_radius=0.030 * height * bulk,
        head_radius=0.062 * height,
        shirt=float(r.uniform(0.1, 0.95)),
        pants=float(r.uniform(0.05, 0.7)),
        skin=float(skin),
        hair=float(np.clip(skin - r.uniform(0.25, 0.5), 0.02, 1.0)),
        shirt_texture=int(r.integers(N_TEXTURES)),
        gait_pose=gait_pose,
    )


@dataclass(frozen=True)
class Clutter:
    kind: str                      # "box" | "sphere"
    center: Tuple[float, float, float]
    size: Tuple[float, float, float]   # half extents; spheres use size[0] as radius
    yaw: float
    texture: int


@dataclass(frozen=True)
class Scene:
    subject: Optional[Subject]
    floor_texture: int
    wall_texture: int
    room_half: Tuple[float, float]
    clutter: Tuple[Clutter, ...] = ()
    subject_xy: Tuple[float, float] = (0.0, 0.0)
    subject_facing: float = 0.0

    def without_subject(self) -> "Scene":
        return replace(self, subject=None)

    def moved_subject(self, xy, facing) -> "Scene":
        return replace(self, subject_xy=(float(xy[0]), float(xy[1])), subject_facing=float(facing))

    def torso_world(self) -> np.ndarray:
        h = self.subject.torso_height if self.subject else 1.1
        return np.array([self.subject_xy[0], self.subject_xy[1], h])


def sample_scene(seed: int) -> Scene:
    """Domain-randomized scene: subject, gait pose, textures, room, clutter."""
    rng = np.random.default_rng([int(seed), 0])
    subject = subject_library(int(rng.integers(N_SUBJECTS)), int(rng.integers(N_GAIT_POSES)))
    floor_tex = int(rng.integers(N_TEXTURES))
    wall_tex = int(rng.integers(N_TEXTURES))
    room = (float(rng.uniform(4.5, 7.0)), float(rng.uniform(4.5, 7.0)))
    n = int(rng.integers(0, MAX_CLUTTER + 1))
    items = []
    for _ in range(n):
        kind = "box" if rng.random() < 0.6 else "sphere"
        if kind == "box":
            half = tuple(float(v) for v in rng.uniform(0.1, 0.5, size=3))
            zc = half[2]
        else:
            r = float(rng.uniform(0.1, 0.4))
            half = (r, r, r)
            zc = r + float(rng.uniform(0.0, 1.2))
        radius = float(np.hypot(half[0], half[1]))
        dist = float(rng.uniform(0.9 + radius, max(room) - 0.2))
        ang = float(rng.uniform(-np.pi, np.pi))
        cx = float(np.clip(dist * np.cos(ang), -room[0] + radius, room[0] - radius))
        cy = float(np.clip(dist * np.sin(ang), -room[1] + radius, room[1] - radius))
        items.append(Clutter(kind, (cx, cy, zc), half, float(rng.uniform(-np.pi, np.pi)),
                             int(rng.integers(N_TEXTURES))))
    return Scene(subject, floor_tex, wall_tex, room, tuple(items))


# --------------------------------------------------------------------------
# relative pose
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PoseBalance:
    """Label ranges; x is drawn flat, y and z flat within what the camera can see."""
    x: Tuple[float, float] = (0.5, 3.5)
    y: Tuple[float, float] = (-1.5, 1.5)
    z: Tuple[float, float] = (-0.5, 0.5)
    theta: Tuple[float, float] = (-math.pi, math.pi)
    attitude_jitter: float = math.radians(3.0)
    margin: float = math.radians(4.0)

    def __post_init__(self):
        for lo, hi in (self.x, self.y, self.z, self.theta):
            if not lo < hi:
                raise ValueError("pose range bounds must be increasing")
        if self.x[0] <= 0:
            raise ValueError("x range must be in front of the drone")


class RelativePose(NamedTuple):
    x: float
    y: float
    z: float
    theta: float
    roll: float = 0.0
    pitch: float = 0.0

    @property
    def label(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.theta])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def body_rotation(heading: float, roll: float = 0.0, pitch: float = 0.0) -> np.ndarray:
    """Body-to-world rotation for a drone with the given yaw, pitch and roll."""
    return rot_z(heading) @ rot_y(pitch) @ rot_x(roll)


def relative_pose(drone_xyz, drone_heading: float, torso_xyz, subject_facing: float) -> np.ndarray:
    """Label ``(x, y, z, theta)`` of a subject seen from a drone (heading frame)."""
    d = np.asarray(torso_xyz, dtype=float) - np.asarray(drone_xyz, dtype=float)
    c, s = math.cos(drone_heading), math.sin(drone_heading)
    x = c * d[0] + s * d[1]
    y = -s * d[0] + c * d[1]
    theta = wrap_angle(subject_facing - drone_heading - math.pi)
    return np.array([x, y, d[2], theta])


def drone_from_label(scene: Scene, pose) -> Tuple[np.ndarray, float]:
    """Inverse of :func:`relative_pose`: drone position and heading in the world."""
    heading = float(wrap_angle(scene.subject_facing - math.pi - pose[3]))
    offset = rot_z(heading) @ np.array([pose[0], pose[1], pose[2]])
    return scene.torso_world() - offset, heading


def sample_relative_pose(seed: int, balance: PoseBalance = PoseBalance(),
                         camera: CameraModel = CameraModel(), max_tries: int = 1000) -> RelativePose:
    """Draw a drone-relative subject pose whose torso center is visible."""
    rng = np.random.default_rng([int(seed), 1])
    half_h = camera.hfov / 2.0 - balance.margin
    half_v = camera.vfov / 2.0 - balance.margin
    for _ in range(max_tries):
        x = rng.uniform(*balance.x)
        ylim = x * math.tan(half_h)
        ylo, yhi = max(balance.y[0], -ylim), min(balance.y[1], ylim)
        zlim = x * math.tan(half_v)
        zlo, zhi = max(balance.z[0], -zlim), min(balance.z[1], zlim)
        if ylo >= yhi or zlo >= zhi:
            continue
        y = rng.uniform(ylo, yhi)
        z = rng.uniform(zlo, zhi)
        theta = float(wrap_angle(rng.uniform(*balance.theta)))
        roll, pitch = rng.uniform(-balance.attitude_jitter, balance.attitude_jitter, size=2)
        r = body_rotation(0.0, roll, pitch)
        if camera.in_frustum(r.T @ np.array([x, y, z]), margin_px=1.0):
            return RelativePose(float(x), float(y), float(z), theta, float(roll), float(pitch))
    raise PoseSamplingError(f"no visible pose after {max_tries} tries (seed {seed})")


# --------------------------------------------------------------------------
# ray casting primitives
# --------------------------------------------------------------------------

_EPS = 1e-6


def texture(tex_id: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Procedural grayscale texture in [0, 1] over surface coordinates (meters)."""
    r = np.random.default_rng([104729, int(tex_id)])
    kind = tex_id % 4
    base = r.uniform(0.25, 0.8)
    contrast = r.uniform(0.08, 0.35)
    scale = r.uniform(0.15, 0.9)
    if kind == 0:
        pat = ((np.floor(u / scale) + np.floor(v / scale)) % 2) * 2 - 1
    elif kind == 1:
        ang = r.uniform(0, np.pi)
        pat = np.sign(np.sin((u * np.cos(ang) + v * np.sin(ang)) * np.pi / scale))
    elif kind == 2:
        f = r.uniform(1.0, 9.0, size=(3, 2))
        ph = r.uniform(0, 2 * np.pi, size=3)
        pat = sum(np.sin(f[k, 0] * u + f[k, 1] * v + ph[k]) for k in range(3)) / 3.0
    else:
        pat = np.cos(2 * np.pi * u / scale) * np.cos(2 * np.pi * v / scale)
        pat = np.where(pat > 0.6, 1.0, -0.3)
    return np.clip(base + contrast * pat, 0.0, 1.0)


class Primitive:
    bound: Optional[Tuple[np.ndarray, float]] = None   # (center, radius) for culling

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def surface(self, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(normals, albedo) at hit points ``p``."""
        raise NotImplementedError


class Plane(Primitive):
    def __init__(self, point, normal, tex: int, u_axis, v_axis):
        self.p0 = np.asarray(point, float)
        self.n = np.asarray(normal, float)
        self.tex = tex
        self.u = np.asarray(u_axis, float)
        self.v = np.asarray(v_axis, float)

    def intersect(self, o, d):
        den = d @ self.n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.p0 - o) @ self.n) / den
        return np.where((den < -_EPS) & (t > _EPS), t, np.inf)

    def surface(self, p):
        rel = p - self.p0
        alb = texture(self.tex, rel @ self.u, rel @ self.v)
        return np.broadcast_to(self.n, p.shape), alb


class Ellipsoid(Primitive):
    """Axis-aligned in a frame rotated by ``yaw``; albedo from a callback."""

    def __init__(self, center, axes, yaw: float, albedo_fn):
        self.c = np.asarray(center, float)
        self.axes = np.asarray(axes, float)
        self.r = rot_z(yaw)
        self.albedo_fn = albedo_fn
        self.bound = (self.c, float(self.axes.max()))

    def intersect(self, o, d):
        ol = (self.r.T @ (o - self.c)) / self.axes
        dl = (d @ self.r) / self.axes
        a = np.einsum("ij,ij->i", dl, dl)
        b = dl @ ol
        c = ol @ ol - 1.0
        disc = b * b - a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / a
        t1 = (-b + sq) / a
        t = np.where(t0 > _EPS, t0, t1)
        return np.where(hit & (t > _EPS), t, np.inf)

    def surface(self, p):
        pl = (p - self.c) @ self.r
        nl = pl / (self.axes ** 2)
        nl /= np.linalg.norm(nl, axis=1, keepdims=True)
        return nl @ self.r.T, self.albedo_fn(pl / self.axes)


class Capsule(Primitive):
    def __init__(self, a, b, radius: float, albedo: float):
        self.a = np.asarray(a, float)
        self.b = np.asarray(b, float)
        self.rad = radius
        self.albedo = albedo
        self.bound = ((self.a + self.b) / 2.0,
                      float(np.linalg.norm(self.b - self.a)) / 2.0 + radius)

    def intersect(self, o, d):
        ba = self.b - self.a
        oa = o - self.a
        baba = ba @ ba
        bard = d @ ba
        baoa = ba @ oa
        rdoa = d @ oa
        oaoa = oa @ oa
        A = baba - bard * bard
        B = baba * rdoa - baoa * bard
        C = baba * oaoa - baoa * baoa - self.rad ** 2 * baba
        h = B * B - A * C
        with np.errstate(divide="ignore", invalid="ignore"):
            t_body = (-B - np.sqrt(np.maximum(h, 0.0))) / A
        y = baoa + t_body * bard
        body_ok = (h >= 0) & (np.abs(A) > 1e-12) & (y > 0) & (y < baba) & (t_body > _EPS)
        # end caps
        t_cap = np.full(d.shape[0], np.inf)
        for end in (self.a, self.b):
            oc = o - end
            bb = d @ oc
            cc = oc @ oc - self.rad ** 2
            hh = bb * bb - cc
            tc = -bb - np.sqrt(np.maximum(hh, 0.0))
            t_cap = np.where((hh >= 0) & (tc > _EPS) & (tc < t_cap), tc, t_cap)
        return np.where(body_ok, np.minimum(t_body, t_cap), t_cap)

    def surface(self, p):
        ba = self.b - self.a
        h = np.clip(((p - self.a) @ ba) / (ba @ ba), 0.0, 1.0)
        n = p - (self.a + h[:, None] * ba)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        return n, np.full(p.shape[0], self.albedo)


class Sphere(Ellipsoid):
    def __init__(self, center, radius: float, albedo_fn):
        super().__init__(center, (radius, radius, radius), 0.0, albedo_fn)


class Box(Primitive):
    def __init__(self, center, half, yaw: float, tex: int):
        self.c = np.asarray(center, float)
        self.h = np.asarray(half, float)
        self.r = rot_z(yaw)
        self.tex = tex
        self.bound = (self.c, float(np.linalg.norm(self.h)))

    def intersect(self, o, d):
        ol = self.r.T @ (o - self.c)
        dl = d @ self.r
        dl = np.where(np.abs(dl) < 1e-12, 1e-12, dl)
        inv = 1.0 / dl
        t1 = (-self.h - ol) * inv
        t2 = (self.h - ol) * inv
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        tmin = np.maximum(np.maximum(lo[:, 0], lo[:, 1]), lo[:, 2])
        tmax = np.minimum(np.minimum(hi[:, 0], hi[:, 1]), hi[:, 2])
        hit = (tmax >= tmin) & (tmin > _EPS)
        return np.where(hit, tmin, np.inf)

    def surface(self, p):
        pl = (p - self.c) @ self.r
        q = np.abs(pl) / self.h
        axis = np.argmax(q, axis=1)
        nl = np.zeros_like(pl)
        nl[np.arange(len(p)), axis] = np.sign(pl[np.arange(len(p)), axis])
        uv = np.where(axis[:, None] == 2, pl[:, :2], pl[:, 1:])
        uv = np.where(axis[:, None] == 1, pl[:, [0, 2]], uv)
        return nl @ self.r.T, texture(self.tex, uv[:, 0], uv[:, 1])


def _limb(root, length, swing, side_offset, facing_vec):
    """Capsule end points for a limb hanging from ``root`` swung fore/aft by ``swing``."""
    down = np.array([0.0, 0.0, -1.0])
    direction = math.cos(swing) * down + math.sin(swing) * facing_vec
    start = root + side_offset
    return start, start + length * direction


def subject_primitives(scene: Scene) -> List[Primitive]:
    s = scene.subject
    if s is None:
        return []
    h = s.height
    ox, oy = scene.subject_xy
    yaw = scene.subject_facing
    fwd = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    left = np.array([-math.sin(yaw), math.cos(yaw), 0.0])
    base = np.array([ox, oy, 0.0])
    phase = 2 * math.pi * s.gait_pose / N_GAIT_POSES
    leg_swing = math.radians(25.0) * math.sin(phase)
    arm_swing = -math.radians(20.0) * math.sin(phase)

    def torso_albedo(pl):
        # shirt pattern plus a brighter chest panel facing forward
        front = pl[:, 0] > 0.55
        pat = texture(s.shirt_texture, pl[:, 1] * 0.3, pl[:, 2] * 0.3) - 0.5
        alb = s.shirt + 0.3 * pat
        return np.clip(np.where(front, alb * 0.5 + 0.45, alb), 0.0, 1.0)

    def head_albedo(pl):
        return np.where(pl[:, 0] > -0.1, s.skin, s.hair)

    torso_c = base + np.array([0.0, 0.0, s.torso_height])
    prims: List[Primitive] = [
        Ellipsoid(torso_c, (s.chest_half_depth, s.shoulder_half_width, 0.17 * h), yaw, torso_albedo),
    ]
    head_c = base + np.array([0.0, 0.0, 0.915 * h])
    prims.append(Ellipsoid(head_c, (s.head_radius, 0.9 * s.head_radius, 1.15 * s.head_radius),
                           yaw, head_albedo))
    prims.append(Sphere(head_c + fwd * s.head_radius * 0.95, 0.2 * s.head_radius,
                        lambda pl: np.full(pl.shape[0], s.skin)))
    hip = base + np.array([0.0, 0.0, 0.49 * h])
    for side, sign in (("l", 1.0), ("r", -1.0)):
        sw = leg_swing * sign
        a, b = _limb(hip, 0.45 * h, sw, left * sign * 0.45 * s.shoulder_half_width, fwd)
        prims.append(Capsule(a, b, 1.25 * s.limb_radius, s.pants))
        shoulder = base + np.array([0.0, 0.0, 0.8 * h])
        aw = arm_swing * sign
        a, b = _limb(shoulder, 0.36 * h, aw, left * sign * (s.shoulder_half_width + s.limb_radius),
                     fwd)
        prims.append(Capsule(a, b, s.limb_radius, s.shirt))
    return prims


def environment_primitives(scene: Scene) -> List[Primitive]:
    ax, ay = scene.room_half
    ex, ey, ez = np.eye(3)
    prims: List[Primitive] = [
        Plane((0, 0, 0), ez, scene.floor_texture, ex, ey),
        Plane((ax, 0, 0), -ex, scene.wall_texture, ey, ez),
        Plane((-ax, 0, 0), ex, scene.wall_texture, ey, ez),
        Plane((0, ay, 0), -ey, scene.wall_texture, ex, ez),
        Plane((0, -ay, 0), ey, scene.wall_texture, ex, ez),
    ]
    for c in scene.clutter:
        if c.kind == "box":
            prims.append(Box(c.center, c.size, c.yaw, c.texture))
        else:
            tex = c.texture
            prims.append(Sphere(c.center, c.size[0],
                                lambda pl, tex=tex: texture(tex, pl[:, 0], pl[:, 1] + pl[:, 2])))
    return prims


def clear_line_of_sight(scene: Scene, eye: np.ndarray, target: np.ndarray,
                        clearance: float = 0.35) -> Scene:
    """Drop clutter that encloses the eye or sits near the eye-to-target segment."""
    seg = target - eye
    L2 = seg @ seg
    keep = []
    for c in scene.clutter:
        center = np.asarray(c.center)
        rad = float(np.linalg.norm(c.size))
        t = np.clip((center - eye) @ seg / L2, 0.0, 1.0)
        dist = np.linalg.norm(center - (eye + t * seg))
        if dist > rad + clearance:
            keep.append(c)
    return replace(scene, clutter=tuple(keep))


def cast(prims: Sequence[Primitive], o: np.ndarray, d: np.ndarray):
    """Nearest hit distance and primitive index per ray (``inf`` / -1 on miss)."""
    best = np.full(d.shape[0], np.inf)
    idx = np.full(d.shape[0], -1)
    for k, prim in enumerate(prims):
        if prim.bound is None:
            t = prim.intersect(o, d)
            closer = t < best
            best[closer] = t[closer]
            idx[closer] = k
            continue
        c, r = prim.bound
        oc = c - o
        b = d @ oc
        cand = np.nonzero((oc @ oc - b * b <= r * r) & (b > -r))[0]
        if cand.size == 0:
            continue
        t = prim.intersect(o, d[cand])
        closer = t < best[cand]
        best[cand[closer]] = t[closer]
        idx[cand[closer]] = k
    return best, idx


def shade(prims, o, d, t, idx) -> np.ndarray:
    out = np.full(d.shape[0], 0.5)
    for k, prim in enumerate(prims):
        sel = np.nonzero(idx == k)[0]
        if sel.size == 0:
            continue
        p = o + t[sel, None] * d[sel]
        n, alb = prim.surface(p)
        lam = np.clip(n @ LIGHT_DIR, 0.0, 1.0)
        out[sel] = alb * (0.35 + 0.65 * lam)
    return out


# --------------------------------------------------------------------------
# sensors in the scene
# --------------------------------------------------------------------------

def _sensor_frame(scene: Scene, pose) -> Tuple[np.ndarray, np.ndarray]:
    roll = getattr(pose, "roll", 0.0)
    pitch = getattr(pose, "pitch", 0.0)
    eye, heading = drone_from_label(scene, pose)
    return eye, body_rotation(heading, roll, pitch)


_CAMERA_RAYS = {}


def _camera_rays(camera: CameraModel) -> np.ndarray:
    if camera not in _CAMERA_RAYS:
        _CAMERA_RAYS[camera] = camera.ray_dirs()
    return _CAMERA_RAYS[camera]


def scene_primitives(scene: Scene, eye: np.ndarray) -> List[Primitive]:
    if scene.subject is not None:
        scene = clear_line_of_sight(scene, eye, scene.torso_world())
    return subject_primitives(scene) + environment_primitives(scene)


def render_camera(scene: Scene, pose, camera: CameraModel = CameraModel()) -> np.ndarray:
    """Grayscale uint8 image ``(height, width)`` seen from the drone at ``pose``."""
    eye, rot = _sensor_frame(scene, pose)
    prims = scene_primitives(scene, eye)
    d = _camera_rays(camera) @ rot.T
    t, idx = cast(prims, eye, d)
    img = shade(prims, eye, d, t, idx)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).reshape(camera.height,
                                                                               camera.width)


def zone_ranges(prims, eye, rot, tof: ToFModel) -> np.ndarray:
    """Noise-free per-zone range: min radial distance over the zone's ray bundle."""
    raw = tof.ray_dirs()
    d = raw.reshape(-1, 3)
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    t, _ = cast(prims, eye, d @ rot.T)
    return t.reshape(tof.zones, tof.zones, -1).min(axis=2)


def render_depth(scene: Scene, pose, tof: ToFModel = ToFModel(),
                 rng_seed: Optional[int] = None) -> np.ndarray:
    """8x8 depth map in meters, NaN where invalid.

    With ``rng_seed=None`` the map is noise-free; otherwise Gaussian noise
    with the sensor's range-dependent sigma is added before range masking.
    """
    eye, rot = _sensor_frame(scene, pose)
    prims = scene_primitives(scene, eye)
    d = zone_ranges(prims, eye, rot, tof)
    if rng_seed is None:
        return tof.mask(d)
    d = np.where(np.isfinite(d), d, np.nan)
    return tof.add_noise(d, np.random.default_rng(rng_seed))


def render_pair(scene: Scene, pose, camera: CameraModel = CameraModel(),
                tof: ToFModel = ToFModel()) -> Tuple[np.ndarray, np.ndarray]:
    """Image and noise-free depth from a single primitive build (one ray batch)."""
    eye, rot = _sensor_frame(scene, pose)
    prims = scene_primitives(scene, eye)
    cam_d = _camera_rays(camera) @ rot.T
    tof_d = tof.ray_dirs().reshape(-1, 3)
    tof_d = (tof_d / np.linalg.norm(tof_d, axis=1, keepdims=True)) @ rot.T
    d = np.concatenate([cam_d, tof_d])
    t, idx = cast(prims, eye, d)
    n_cam = cam_d.shape[0]
    img = shade(prims, eye, d[:n_cam], t[:n_cam], idx[:n_cam])
    image = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).reshape(camera.height,
                                                                                 camera.width)
    depth = tof.mask(t[n_cam:].reshape(tof.zones, tof.zones, -1).min(axis=2))
    return image, depth


# --------------------------------------------------------------------------
# samples
# --------------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray          # (96, 160) uint8
    depth: np.ndarray          # (8, 8) float meters, NaN invalid
    label: np.ndarray          # (4,) x, y, z, theta
    seed: int = 0
    depth_clean: Optional[np.ndarray] = None


def sample_seed(master_seed: int, index: int) -> int:
    """Per-sample 32-bit seed; independent of generation order."""
    return int(np.random.SeedSequence([int(master_seed), 0x5EED, int(index)]).generate_state(1)[0])


def generate_sample(seed: int, balance: PoseBalance = PoseBalance(),
                    camera: CameraModel = CameraModel(), tof: ToFModel = ToFModel(),
                    noisy_depth: bool = False) -> Sample:
    scene = sample_scene(seed)
    pose = sample_relative_pose(seed, balance, camera)
    image, depth = render_pair(scene, pose, camera, tof)
    clean = depth.copy()
    if noisy_depth:
        depth = tof.add_noise(depth, np.random.default_rng([seed, 2]))
    return Sample(image, depth, pose.label, seed, clean)


def generate_dataset(master_seed: int, count: int, start: int = 0, **kw) -> List[Sample]:
    return [generate_sample(sample_seed(master_seed, start + i), **kw) for i in range(count)]
