"""
Closed-loop tracking simulation.

A subject walks a scripted path through a rendered room while a kinematic
drone tries to hold a point 1.5 m in front of them. Each control tick the
sensing source (a pose model fed fresh renders, or the perfect "mocap"
oracle) estimates the subject's drone-relative pose; the controller turns
that into a saturated velocity and yaw-rate command. The camera refreshes
every tick, the depth sensor every ``depth_period`` ticks. An episode ends
when the path is finished or the subject's torso leaves the camera frustum.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .models import PoseEstimate, wrap_angle
from .scenegen import (CameraModel, RelativePose, Scene, ToFModel, relative_pose, render_camera,
                       render_pair, sample_scene)

FOLLOW_DISTANCE = 1.5


class PathError(ValueError):
    pass


class Waypoint(NamedTuple):
    t: float
    x: float
    y: float
    facing: float


@dataclass(frozen=True)
class SubjectPath:
    """Timed waypoints; linear position and shortest-arc facing in between."""
    waypoints: Tuple[Waypoint, ...]
    max_speed: float = 2.0

    def __post_init__(self):
        wps = tuple(Waypoint(*map(float, w)) for w in self.waypoints)
        object.__setattr__(self, "waypoints", wps)
        if len(wps) < 2:
            raise PathError("a path needs at least two waypoints")
        for a, b in zip(wps, wps[1:]):
            dt = b.t - a.t
            if dt <= 0:
                raise PathError(f"timestamps must strictly increase ({a.t} -> {b.t})")
            if math.hypot(b.x - a.x, b.y - a.y) / dt > self.max_speed + 1e-9:
                raise PathError(f"segment {a.t}-{b.t} s exceeds {self.max_speed} m/s")

    @property
    def duration(self) -> float:
        return self.waypoints[-1].t - self.waypoints[0].t

    def at(self, t: float) -> Tuple[float, float, float]:
        """Subject ``(x, y, facing)`` at time ``t`` (clamped to the path)."""
        wps = self.waypoints
        t = min(max(t, wps[0].t), wps[-1].t)
        i = max(0, min(np.searchsorted([w.t for w in wps], t, side="right") - 1, len(wps) - 2))
        a, b = wps[i], wps[i + 1]
        u = (t - a.t) / (b.t - a.t)
        dphi = float(wrap_angle(b.facing - a.facing))
        return (a.x + u * (b.x - a.x), a.y + u * (b.y - a.y),
                float(wrap_angle(a.facing + u * dphi)))


def default_path() -> SubjectPath:
    """Three segments of rising difficulty, 165 s in total.

    Straight approach, a lateral arc around a pivot (facing outward), then
    two slow 180 degree turns in place.
    """
    wps = [Waypoint(0.0, -2.5, 0.0, 0.0), Waypoint(10.0, -2.5, 0.0, 0.0),
           Waypoint(40.0, 0.0, 0.0, 0.0), Waypoint(45.0, 0.0, 0.0, 0.0)]
    # arc of radius 1.5 around (-1.5, 0): 0 -> +90 -> -90 -> 0 degrees over 70 s
    center, radius = (-1.5, 0.0), 1.5
    angles = np.concatenate([np.linspace(0, 90, 7)[1:], np.linspace(90, -90, 13)[1:],
                             np.linspace(-90, 0, 7)[1:]])
    times = 45.0 + 70.0 * np.arange(1, len(angles) + 1) / len(angles)
    for t, a in zip(times, np.radians(angles)):
        wps.append(Waypoint(float(t), center[0] + radius * math.cos(a),
                            center[1] + radius * math.sin(a), float(wrap_angle(a))))
    wps += [Waypoint(120.0, 0.0, 0.0, 0.0)]
    # turn in place, 180 degrees in 20 s (split so the shortest arc keeps the direction)
    wps += [Waypoint(130.0, 0.0, 0.0, math.pi / 2), Waypoint(140.0, 0.0, 0.0, math.pi),
            Waypoint(145.0, 0.0, 0.0, math.pi),
            Waypoint(155.0, 0.0, 0.0, -math.pi / 2), Waypoint(165.0, 0.0, 0.0, 0.0)]
    return SubjectPath(tuple(wps))


def straight_path(duration: float = 20.0, speed: float = 0.25) -> SubjectPath:
    """Short walk toward the drone and back, facing it throughout."""
    half = duration / 2
    return SubjectPath((Waypoint(0, -1.0, 0, 0), Waypoint(half, -1.0 + speed * half, 0, 0),
                        Waypoint(duration, -1.0, 0, 0)))


# --------------------------------------------------------------------------
# drone and controller
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    dt: float = 1.0 / 30.0
    k_pos: float = 1.0
    k_yaw: float = 2.0
    v_max: float = 1.5
    omega_max: float = 2.0
    depth_period: int = 2               # control ticks per depth frame (30 Hz / 15 Hz)
    distance: float = FOLLOW_DISTANCE
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0 or self.v_max <= 0 or self.omega_max <= 0:
            raise ValueError("dt, v_max and omega_max must be positive")
        if self.depth_period < 1:
            raise ValueError("depth_period must be >= 1")


@dataclass(frozen=True)
class DroneState:
    x: float
    y: float
    z: float
    heading: float
    vx: float = 0.0
    vy: float = 0.0
    yaw_rate: float = 0.0

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


class Command(NamedTuple):
    vx: float
    vy: float
    yaw_rate: float
    setpoint: Tuple[float, float]
    subject: Tuple[float, float]
    facing: float


def subject_in_world(state: DroneState, est: PoseEstimate) -> Tuple[np.ndarray, float]:
    """Drone-relative estimate -> subject ``(x, y)`` and facing in the world."""
    c, s = math.cos(state.heading), math.sin(state.heading)
    p = np.array([state.x + c * est.x - s * est.y, state.y + s * est.x + c * est.y])
    return p, float(wrap_angle(est.theta + state.heading + math.pi))


def desired_pose(subject_xy, facing: float, drone_xy=None,
                 distance: float = FOLLOW_DISTANCE) -> Tuple[np.ndarray, float]:
    """Setpoint in front of the subject and the heading that looks at them from there."""
    sp = np.asarray(subject_xy, dtype=float) + distance * np.array([math.cos(facing),
                                                                     math.sin(facing)])
    return sp, float(wrap_angle(facing + math.pi))


def control(state: DroneState, est: PoseEstimate, config: SimConfig = SimConfig()) -> Command:
    subj, facing = subject_in_world(state, est)
    sp, _ = desired_pose(subj, facing, distance=config.distance)
    v = config.k_pos * (sp - state.xy)
    speed = float(np.hypot(*v))
    if speed > config.v_max:
        v *= config.v_max / speed
    look = math.atan2(subj[1] - state.y, subj[0] - state.x)
    w = config.k_yaw * float(wrap_angle(look - state.heading))
    w = max(-config.omega_max, min(config.omega_max, w))
    return Command(float(v[0]), float(v[1]), w, (float(sp[0]), float(sp[1])),
                   (float(subj[0]), float(subj[1])), facing)


def step(state: DroneState, est: PoseEstimate, dt: float,
         config: SimConfig = SimConfig()) -> DroneState:
    """Advance the kinematic drone one tick toward the estimate-derived setpoint."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    cmd = control(state, est, config)
    return DroneState(state.x + cmd.vx * dt, state.y + cmd.vy * dt, state.z,
                      float(wrap_angle(state.heading + cmd.yaw_rate * dt)),
                      cmd.vx, cmd.vy, cmd.yaw_rate)


# --------------------------------------------------------------------------
# episodes
# --------------------------------------------------------------------------

TRAJECTORY_HEADER = ["t", "drone_x", "drone_y", "heading", "subj_x", "subj_y", "subj_facing",
                     "est_x", "est_y", "est_theta", "setpoint_x", "setpoint_y"]
RESULT_HEADER = ["model", "seed", "flight_time", "completed_path", "mae_x", "mae_y", "mae_theta",
                 "e_xy", "e_theta"]


@dataclass
class RunResult:
    flight_time: float
    completed_path: float
    mae_x: float
    mae_y: float
    mae_theta: float
    e_xy: float
    e_theta: float
    terminated: bool = False

    def row(self, model: str, seed: int) -> List:
        return [model, seed, self.flight_time, self.completed_path, self.mae_x, self.mae_y,
                self.mae_theta, self.e_xy, self.e_theta]


@dataclass
class Episode:
    result: RunResult
    rows: List[Tuple[float, ...]] = field(default_factory=list)
    depth_frames: List[int] = field(default_factory=list)   # depth frame id used at each tick
    image_frames: List[int] = field(default_factory=list)

    def trajectory_csv(self) -> str:
        return _csv([TRAJECTORY_HEADER] + [[repr(float(v)) for v in r] for r in self.rows])


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def results_csv(rows: Sequence[Tuple[str, int, RunResult]]) -> str:
    return _csv([RESULT_HEADER] + [r.row(m, s) for m, s, r in rows])


def control_errors(drone_xy, drone_heading, desired_xy, desired_heading) -> Tuple[float, float]:
    """Mean horizontal distance and mean absolute wrapped heading error."""
    a = np.asarray(drone_xy, dtype=float).reshape(-1, 2)
    d = np.asarray(desired_xy, dtype=float).reshape(-1, 2)
    if len(a) == 0:
        raise ValueError("empty trajectory log")
    e_xy = float(np.mean(np.hypot(*(a - d).T)))
    dh = wrap_angle(np.asarray(drone_heading, dtype=float) - np.asarray(desired_heading, dtype=float))
    return e_xy, float(np.mean(np.abs(dh)))


def errors_from_log(rows, distance: float = FOLLOW_DISTANCE) -> Tuple[float, float]:
    """``(e_xy, e_theta)`` from trajectory rows, against the true desired pose."""
    r = np.asarray(rows, dtype=float).reshape(-1, len(TRAJECTORY_HEADER))
    sp = r[:, 4:6] + distance * np.stack([np.cos(r[:, 6]), np.sin(r[:, 6])], axis=1)
    look = np.arctan2(r[:, 5] - r[:, 2], r[:, 4] - r[:, 1])
    return control_errors(r[:, 1:3], r[:, 3], sp, look)


class Mocap:
    """Perfect-pose oracle."""
    name = "mocap"
    needs_render = False


def tracking_scene(seed: int) -> Scene:
    """Randomized subject and textures in an uncluttered, roomy hall."""
    return replace(sample_scene(seed), clutter=(), room_half=(6.5, 6.5))


def start_state(path: SubjectPath, scene: Scene, distance: float = FOLLOW_DISTANCE) -> DroneState:
    x, y, facing = path.at(path.waypoints[0].t)
    sp, heading = desired_pose((x, y), facing, distance=distance)
    torso_z = float(scene.moved_subject((x, y), facing).torso_world()[2])
    return DroneState(float(sp[0]), float(sp[1]), torso_z, heading)


def torso_visible(state: DroneState, scene: Scene, camera: CameraModel) -> bool:
    torso = scene.torso_world()
    d = torso - np.array([state.x, state.y, state.z])
    c, s = math.cos(state.heading), math.sin(state.heading)
    body = np.array([c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]])
    return camera.in_frustum(body)


def run_episode(source, path: SubjectPath, config: SimConfig = SimConfig(),
                camera: CameraModel = CameraModel(), tof: ToFModel = ToFModel(),
                scene: Optional[Scene] = None) -> Episode:
    """Fly one episode with ``source`` (a model with ``predict`` or :class:`Mocap`)."""
    base = scene if scene is not None else tracking_scene(config.seed)
    mocap = isinstance(source, Mocap) or source == "mocap"
    state = start_state(path, base, config.distance)
    noise_rng = np.random.default_rng([int(config.seed), 0x51, 2])
    t0 = path.waypoints[0].t
    n_ticks = int(round(path.duration / config.dt))
    ep = Episode(RunResult(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0))
    est_err = []
    depth = None
    depth_id = -1
    terminated = False
    k = 0
    for k in range(n_ticks + 1):
        t = t0 + k * config.dt
        sx, sy, sf = path.at(t)
        sc = base.moved_subject((sx, sy), sf)
        if not torso_visible(state, sc, camera):
            terminated = True
            break
        truth = relative_pose((state.x, state.y, state.z), state.heading, sc.torso_world(), sf)
        if mocap:
            est = PoseEstimate.from_array(truth)
        else:
            pose = RelativePose(*truth)
            if k % config.depth_period == 0:
                image, clean = render_pair(sc, pose, camera, tof)
                depth = tof.mask(tof.add_noise(clean, noise_rng))
                depth_id += 1
            else:
                image = render_camera(sc, pose, camera)
            est = PoseEstimate.from_array(source.predict(image, depth))
            ep.depth_frames.append(depth_id)
            ep.image_frames.append(k)
        cmd = control(state, est, config)
        est_err.append((abs(est.x - truth[0]), abs(est.y - truth[1]),
                        abs(float(wrap_angle(est.theta - truth[3])))))
        ep.rows.append((t, state.x, state.y, state.heading, sx, sy, sf, cmd.subject[0],
                        cmd.subject[1], cmd.facing, cmd.setpoint[0], cmd.setpoint[1]))
        if k == n_ticks:
            break
        state = step(state, est, config.dt, config)
    flight = len(ep.rows) * config.dt if terminated else path.duration
    completed = 100.0 * min(1.0, (k * config.dt) / path.duration) if terminated else 100.0
    if ep.rows:
        e_xy, e_th = errors_from_log(ep.rows, config.distance)
        mx, my, mt = np.mean(est_err, axis=0)
    else:
        e_xy = e_th = mx = my = mt = 0.0
    ep.result = RunResult(float(flight), float(completed), float(mx), float(my), float(mt),
                          e_xy, e_th, terminated)
    return ep
