"""Deterministic synthetic driving world.

A scene is a ground-level road polyline with junctions plus spherical
landmarks. An episode drives a camera car along the road with a pure-pursuit
expert, stops at red lights, and records flat-shaded renderings, an oracle
gaze point, expert controls, the high-level command and a driving/traffic
label for every frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .attention import GazeRecord
from .commands import HighLevelCommand
from .geometry import CameraExtrinsics, CameraIntrinsics, WorldPoint, project_points, ProjectionStatus

KINDS = ("vehicle", "pedestrian", "light", "sign", "distractor")
TASK_KINDS = ("vehicle", "pedestrian", "light", "sign")

KIND_COLORS = {
    "vehicle": (0.15, 0.3, 0.9),
    "pedestrian": (0.95, 0.8, 0.1),
    "sign": (0.95, 0.95, 0.95),
}
LIGHT_COLORS = {"red": (0.95, 0.05, 0.05), "green": (0.05, 0.85, 0.2)}
KIND_HEIGHT = {"vehicle": 0.8, "pedestrian": 0.9, "light": 3.0, "sign": 2.0}
KIND_RADIUS = {"vehicle": 0.9, "pedestrian": 0.4, "light": 0.7, "sign": 0.45}

BACKGROUND = (0.55, 0.6, 0.55)
ROAD_COLOR = (0.25, 0.25, 0.28)

LABELS = ("driving", "traffic")


@dataclass(frozen=True)
class Landmark:
    center: tuple
    radius: float
    color: tuple
    kind: str


@dataclass(frozen=True)
class Junction:
    vertex: int
    arc: float
    command: HighLevelCommand
    light: int  # index into Scene.landmarks, -1 when the junction has no light


class Polyline:
    """Piecewise-linear path with arc-length parametrisation."""

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3 or len(v) < 2:
            raise ValueError("path needs at least two 3-D vertices")
        seg = np.diff(v, axis=0)
        lengths = np.linalg.norm(seg, axis=1)
        if np.any(lengths <= 0):
            raise ValueError("path has a zero-length segment")
        self.vertices = v
        self.lengths = lengths
        self.directions = seg / lengths[:, None]
        self.arc = np.concatenate([[0.0], np.cumsum(lengths)])

    @property
    def length(self) -> float:
        return float(self.arc[-1])

    def _segment(self, s: float) -> int:
        return int(np.clip(np.searchsorted(self.arc, s, side="right") - 1, 0, len(self.lengths) - 1))

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        i = self._segment(s)
        return self.vertices[i] + (s - self.arc[i]) * self.directions[i]

    def heading_at(self, s: float) -> float:
        d = self.directions[self._segment(min(max(s, 0.0), self.length))]
        return math.atan2(d[1], d[0])

    def turning(self, s0: float, s1: float) -> float:
        """Total absolute heading change at vertices strictly inside (s0, s1]."""
        total = 0.0
        for i in range(1, len(self.vertices) - 1):
            if s0 < self.arc[i] <= s1:
                a, b = self.directions[i - 1], self.directions[i]
                total += abs(math.atan2(a[0] * b[1] - a[1] * b[0], a[0] * b[0] + a[1] * b[1]))
        return total

    def closest(self, p, s_lo: float = 0.0, s_hi: float = math.inf) -> float:
        """Arc length of the path point nearest ``p`` (xy-plane) within ``[s_lo, s_hi]``."""
        p = np.asarray(p, dtype=np.float64)[:2]
        s_lo, s_hi = max(0.0, s_lo), min(self.length, s_hi)
        best_s, best_d = s_lo, math.inf
        for i in range(self._segment(s_lo), self._segment(s_hi) + 1):
            a = self.vertices[i, :2]
            d = self.directions[i, :2]
            u = float(np.clip(np.dot(p - a, d), 0.0, self.lengths[i]))
            s = min(max(self.arc[i] + u, s_lo), s_hi)
            q = self.vertices[i, :2] + (s - self.arc[i]) * d
            dist = float(np.hypot(*(p - q)))
            if dist < best_d:
                best_s, best_d = s, dist
        return best_s


@dataclass
class Scene:
    landmarks: List[Landmark]
    path: Polyline
    junctions: List[Junction]

    def task_landmarks(self):
        return [i for i, lm in enumerate(self.landmarks) if lm.kind != "distractor"]


@dataclass(frozen=True)
class SceneConfig:
    n_legs: int = 12
    leg_length: tuple = (25.0, 40.0)
    # "balanced": junction types drawn from shuffled (left, right, straight) blocks;
    # "random": independent draws with turn_probs
    turn_order: str = "balanced"
    turn_probs: tuple = (0.35, 0.35, 0.3)  # left, right, straight-through junction
    light_probability: float = 0.8
    n_vehicles: int = 20
    n_pedestrians: int = 20
    n_signs: int = 12
    n_distractors: int = 40
    task_offset: tuple = (4.5, 12.0)
    distractor_offset: tuple = (4.5, 20.0)
    light_offset: float = 4.0
    light_beyond: float = 2.0

    @classmethod
    def for_frames(cls, frames: int, fps: float = 25.0, v_max: float = 8.0, **kw) -> "SceneConfig":
        """Scale the path and landmark counts to cover an episode of ``frames`` frames."""
        legs = max(2, math.ceil(frames / fps * v_max / 30.0) + 2)
        return cls(
            n_legs=legs,
            n_vehicles=2 * legs,
            n_pedestrians=2 * legs,
            n_signs=legs,
            n_distractors=4 * legs,
            **kw,
        )


def _random_color(rng) -> tuple:
    return tuple(float(c) for c in rng.uniform(0.1, 1.0, size=3))


def gen_scene(seed: int, config: SceneConfig = SceneConfig()) -> Scene:
    if config.n_legs < 1 or config.leg_length[1] <= 0 or config.leg_length[0] <= 0:
        raise ValueError("scene path must have positive length")
    if config.turn_order not in ("balanced", "random"):
        raise ValueError(f"unknown turn order {config.turn_order!r}")
    rng = np.random.default_rng(seed)
    heading = 0.0
    vertices = [np.zeros(3)]
    turns = []
    bag: list = []
    for leg in range(config.n_legs):
        if leg > 0:
            if config.turn_order == "balanced":
                if not bag:
                    bag = list(rng.permutation(3))
                kind = int(bag.pop())
            else:
                kind = rng.choice(3, p=np.asarray(config.turn_probs) / np.sum(config.turn_probs))
            turns.append(kind)
            heading += (math.pi / 2, -math.pi / 2, 0.0)[kind]
        length = rng.uniform(*config.leg_length)
        step = length * np.array([math.cos(heading), math.sin(heading), 0.0])
        vertices.append(vertices[-1] + step)
    path = Polyline(vertices)

    landmarks: List[Landmark] = []
    junctions: List[Junction] = []
    for j, kind in enumerate(turns):
        vi = j + 1
        command = (HighLevelCommand.LEFT, HighLevelCommand.RIGHT, HighLevelCommand.STRAIGHT)[kind]
        light = -1
        if rng.uniform() < config.light_probability:
            d = path.directions[vi - 1]
            right = np.array([d[1], -d[0], 0.0])
            c = path.vertices[vi] + config.light_beyond * d + config.light_offset * right
            c[2] = KIND_HEIGHT["light"]
            light = len(landmarks)
            landmarks.append(Landmark(tuple(float(x) for x in c), KIND_RADIUS["light"], LIGHT_COLORS["red"], "light"))
        junctions.append(Junction(vi, float(path.arc[vi]), command, light))

    def place(kind: str, offset: tuple):
        s = rng.uniform(0.0, path.length)
        side = rng.choice((-1.0, 1.0))
        lateral = rng.uniform(*offset) * side
        i = path._segment(s)
        d = path.directions[i]
        normal = np.array([-d[1], d[0], 0.0])
        c = path.point_at(s) + lateral * normal
        if kind == "distractor":
            c[2] = rng.uniform(0.5, 2.5)
            radius = rng.uniform(0.3, 1.0)
            color = _random_color(rng)
        else:
            c[2] = KIND_HEIGHT[kind]
            radius = KIND_RADIUS[kind]
            color = KIND_COLORS[kind]
        landmarks.append(Landmark(tuple(float(x) for x in c), float(radius), color, kind))

    for kind, count in (
        ("vehicle", config.n_vehicles),
        ("pedestrian", config.n_pedestrians),
        ("sign", config.n_signs),
    ):
        for _ in range(count):
            place(kind, config.task_offset)
    for _ in range(config.n_distractors):
        place("distractor", config.distractor_offset)
    return Scene(landmarks, path, junctions)


# --------------------------------------------------------------------------- rendering


@dataclass(frozen=True)
class RenderConfig:
    road_width: float = 7.0
    near: float = 0.2
    far: float = 80.0


def _clip_near(poly: np.ndarray, near: float) -> np.ndarray:
    """Sutherland-Hodgman clip of a camera-space polygon against ``z >= near``."""
    out = []
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        ina, inb = a[2] >= near, b[2] >= near
        if ina:
            out.append(a)
        if ina != inb:
            u = (near - a[2]) / (b[2] - a[2])
            out.append(a + u * (b - a))
    return np.array(out)


def _fill_convex(img, poly_px: np.ndarray, color, xs, ys):
    n = len(poly_px)
    if n < 3:
        return
    x0, y0 = poly_px.min(axis=0)
    x1, y1 = poly_px.max(axis=0)
    H, W = img.shape[:2]
    c0, c1 = max(0, math.ceil(x0)), min(W - 1, math.floor(x1))
    r0, r1 = max(0, math.ceil(y0)), min(H - 1, math.floor(y1))
    if c0 > c1 or r0 > r1:
        return
    X = xs[r0 : r1 + 1, c0 : c1 + 1]
    Y = ys[r0 : r1 + 1, c0 : c1 + 1]
    # signed area decides which side of each edge is inside
    area = 0.0
    for i in range(n):
        a, b = poly_px[i], poly_px[(i + 1) % n]
        area += a[0] * b[1] - a[1] * b[0]
    sign = 1.0 if area >= 0 else -1.0
    inside = np.ones(X.shape, dtype=bool)
    for i in range(n):
        a, b = poly_px[i], poly_px[(i + 1) % n]
        cross = (b[0] - a[0]) * (Y - a[1]) - (b[1] - a[1]) * (X - a[0])
        inside &= sign * cross >= 0
    img[r0 : r1 + 1, c0 : c1 + 1][inside] = color


def disc_of(landmark: Landmark, ext: CameraExtrinsics, intr: CameraIntrinsics, near: float = 0.2):
    """Projected disc ``(x, y, radius_px, depth)`` of a landmark, or None if too close/behind."""
    c = ext.to_camera(np.asarray(landmark.center))
    if c[2] < near + landmark.radius:
        return None
    x = intr.f * c[0] / c[2] + intr.width / 2
    y = intr.f * c[1] / c[2] + intr.height / 2
    return x, y, intr.f * landmark.radius / c[2], c[2]


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap values to the 8-bit grid used on disk."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def render_frame(
    scene: Scene,
    ext: CameraExtrinsics,
    intr: CameraIntrinsics,
    light_states: Optional[dict] = None,
    cfg: RenderConfig = RenderConfig(),
) -> np.ndarray:
    """Flat-shaded (H, W, 3) rendering: background, road band, then landmark discs far to near."""
    H, W = intr.height, intr.width
    img = np.empty((H, W, 3))
    img[:] = BACKGROUND
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)

    path = scene.path
    cam_pos = ext.position
    half = cfg.road_width / 2
    for i in range(len(path.lengths)):
        a, b = path.vertices[i], path.vertices[i + 1]
        # skip segments far from the camera
        d = path.directions[i]
        u = float(np.clip(np.dot(cam_pos - a, d), 0.0, path.lengths[i]))
        if np.linalg.norm((a + u * d - cam_pos)[:2]) > cfg.far:
            continue
        n = np.array([-d[1], d[0], 0.0]) * half
        # extend by half the width so consecutive bands overlap at corners
        a_ext, b_ext = a - d * half, b + d * half
        quad = np.stack([a_ext + n, b_ext + n, b_ext - n, a_ext - n])
        cam = _clip_near(ext.to_camera(quad), cfg.near)
        if len(cam) < 3:
            continue
        px = np.stack([intr.f * cam[:, 0] / cam[:, 2] + W / 2, intr.f * cam[:, 1] / cam[:, 2] + H / 2], axis=1)
        _fill_convex(img, px, ROAD_COLOR, xs, ys)

    discs = []
    for idx, lm in enumerate(scene.landmarks):
        disc = disc_of(lm, ext, intr, cfg.near)
        if disc is None or disc[3] > cfg.far:
            continue
        x, y, rho, depth = disc
        if x + rho < 0 or x - rho > W or y + rho < 0 or y - rho > H:
            continue
        color = lm.color
        if lm.kind == "light" and light_states is not None and idx in light_states:
            color = LIGHT_COLORS[light_states[idx]]
        discs.append((depth, idx, x, y, rho, color))
    discs.sort(key=lambda d: (-d[0], d[1]))
    for _, _, x, y, rho, color in discs:
        c0, c1 = max(0, math.ceil(x - rho)), min(W - 1, math.floor(x + rho))
        r0, r1 = max(0, math.ceil(y - rho)), min(H - 1, math.floor(y + rho))
        if c0 > c1 or r0 > r1:
            continue
        X = xs[r0 : r1 + 1, c0 : c1 + 1]
        Y = ys[r0 : r1 + 1, c0 : c1 + 1]
        inside = (X - x) ** 2 + (Y - y) ** 2 <= rho * rho
        img[r0 : r1 + 1, c0 : c1 + 1][inside] = color
    return quantize(img)


# --------------------------------------------------------------------------- expert driver


@dataclass(frozen=True)
class ControllerConfig:
    v_max: float = 8.0
    lookahead: float = 5.0
    lookahead_gain: float = 0.4
    wheelbase: float = 2.5
    max_steer_angle: float = 0.6
    curvature_gain: float = 0.8
    preview: float = 12.0
    speed_gain: float = 1.5
    max_accel: float = 4.0
    max_decel: float = 8.0
    comfort_decel: float = 3.0


def lookahead_distance(speed: float, cfg: ControllerConfig) -> float:
    return cfg.lookahead + cfg.lookahead_gain * speed


def pure_pursuit_steer(path: Polyline, position, heading: float, speed: float, progress: float, cfg: ControllerConfig) -> float:
    """Normalised steering in [-1, 1] towards the lookahead point; positive steers right."""
    target = path.point_at(progress + lookahead_distance(speed, cfg))
    dx, dy = target[0] - position[0], target[1] - position[1]
    alpha = math.atan2(dy, dx) - heading
    alpha = math.atan2(math.sin(alpha), math.cos(alpha))
    ld = max(math.hypot(dx, dy), 1e-6)
    delta = math.atan2(2.0 * cfg.wheelbase * math.sin(alpha), ld)
    # world heading is counter-clockwise, so a left bend (alpha > 0) is negative steer
    return float(np.clip(-delta / cfg.max_steer_angle, -1.0, 1.0))


def speed_control(speed: float, target_speed: float, cfg: ControllerConfig):
    """``(throttle, brake)`` from the speed error."""
    a = cfg.speed_gain * (target_speed - speed)
    throttle = float(np.clip(a / cfg.max_accel, 0.0, 1.0))
    brake = float(np.clip(-a / cfg.max_decel, 0.0, 1.0))
    return throttle, brake


def oracle_control(path: Polyline, position, heading: float, speed: float, progress: float, target_speed: float, cfg: ControllerConfig):
    """Expert ``(steer, throttle, brake, speed)`` for a pose; ``target_speed < 0`` means holding at a stop."""
    steer = pure_pursuit_steer(path, position, heading, speed, progress, cfg)
    if target_speed < 0:
        return steer, 0.0, 1.0, speed
    throttle, brake = speed_control(speed, target_speed, cfg)
    return steer, throttle, brake, speed


def pose_of(ext: CameraExtrinsics, camera_height: float):
    """Ground position and heading of the car carrying this camera."""
    pos = ext.position
    fwd = ext.rotation[2]
    return np.array([pos[0], pos[1], pos[2] - camera_height]), math.atan2(fwd[1], fwd[0])


# --------------------------------------------------------------------------- gaze oracle


@dataclass(frozen=True)
class GazeConfig:
    side_bias: float = 0.8
    landmark_prob: float = 0.5
    light_prob: float = 0.5
    traffic_wander_prob: float = 0.6
    max_distance: float = 35.0
    blink_prob: float = 0.01
    gaze_lookahead: float = 8.0


def surface_point(lm: Landmark, eye) -> np.ndarray:
    c = np.asarray(lm.center)
    v = np.asarray(eye, dtype=np.float64) - c
    return c + lm.radius * v / np.linalg.norm(v)


def visible_landmarks(scene: Scene, ext: CameraExtrinsics, intr: CameraIntrinsics, max_distance: float):
    """Indices of task-relevant landmarks whose centre projects in-frame within range."""
    idx = scene.task_landmarks()
    if not idx:
        return [], np.zeros((0, 3))
    centers = np.array([scene.landmarks[i].center for i in idx])
    _, status = project_points(centers, ext, intr)
    cam = ext.to_camera(centers)
    keep = (status == ProjectionStatus.IN_FRAME) & (cam[:, 2] <= max_distance) & (cam[:, 2] > 1.0)
    return [i for i, k in zip(idx, keep) if k], cam[keep]


def oracle_gaze(
    scene: Scene,
    ext: CameraExtrinsics,
    intr: CameraIntrinsics,
    command: HighLevelCommand,
    rng: np.random.Generator,
    progress: float = 0.0,
    cfg: GazeConfig = GazeConfig(),
    focus: int = -1,
    waiting: bool = False,
) -> WorldPoint:
    """Where the oracle driver looks.

    ``focus`` is a control-relevant landmark (an upcoming light) that wins
    with probability ``light_prob``. With LEFT/RIGHT the gaze goes to the
    nearest landmark on that side with probability ``side_bias``; otherwise
    it falls back to the road lookahead point. Distractors are never chosen.
    """
    eye = ext.position
    idx, cam = visible_landmarks(scene, ext, intr, cfg.max_distance)
    lookahead = scene.path.point_at(progress + cfg.gaze_lookahead)
    if focus >= 0 and rng.uniform() < cfg.light_prob:
        return WorldPoint.of(surface_point(scene.landmarks[focus], eye))
    command = HighLevelCommand(command)
    if waiting and idx and rng.uniform() < cfg.traffic_wander_prob:
        pick = idx[int(rng.integers(len(idx)))]
        return WorldPoint.of(surface_point(scene.landmarks[pick], eye))
    if command in (HighLevelCommand.LEFT, HighLevelCommand.RIGHT):
        if rng.uniform() < cfg.side_bias:
            side = cam[:, 0] < 0 if command is HighLevelCommand.LEFT else cam[:, 0] > 0
            if np.any(side):
                dist = np.linalg.norm(cam, axis=1)
                dist[~side] = np.inf
                return WorldPoint.of(surface_point(scene.landmarks[idx[int(np.argmin(dist))]], eye))
        return WorldPoint.of(lookahead)
    if idx and rng.uniform() < cfg.landmark_prob:
        dist = np.linalg.norm(cam, axis=1)
        return WorldPoint.of(surface_point(scene.landmarks[idx[int(np.argmin(dist))]], eye))
    return WorldPoint.of(lookahead)


# --------------------------------------------------------------------------- episodes


@dataclass(frozen=True)
class EpisodeConfig:
    frames: int = 500
    fps: float = 25.0
    image_size: tuple = (64, 64)
    focal: float = 32.0
    camera_height: float = 1.5
    camera_pitch: float = 0.12
    start_speed: float = 4.0
    traffic_fraction: float = 0.25
    min_wait: int = 25
    max_wait: int = 400
    approach_distance: float = 30.0
    stop_distance: float = 10.0
    command_distance: float = 20.0
    command_after: float = 5.0
    destination_radius: float = 5.0
    noise_prob: float = 0.03
    noise_steer: float = 0.3
    noise_frames: int = 8
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    gaze: GazeConfig = field(default_factory=GazeConfig)
    render: RenderConfig = field(default_factory=RenderConfig)

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.image_size[0], self.image_size[1])


@dataclass
class Episode:
    intrinsics: CameraIntrinsics
    extrinsics: List[CameraExtrinsics]
    images: np.ndarray  # (T, H, W, 3) in [0, 1]
    gaze: List[GazeRecord]
    controls: np.ndarray  # (T, 4): steer, throttle, brake, speed
    commands: List[HighLevelCommand]
    labels: List[str]
    framerate: float = 25.0
    # expert bookkeeping: path arc length, target speed (-1 while held at a stop),
    # and the landmark that currently governs the controls (-1 if none)
    progress: Optional[np.ndarray] = None
    target_speed: Optional[np.ndarray] = None
    relevant: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.extrinsics)
        lens = {len(self.images), len(self.gaze), len(self.controls), len(self.commands), len(self.labels)}
        if lens != {n}:
            raise ValueError("per-frame sequences differ in length")
        bad = set(self.labels) - set(LABELS)
        if bad:
            raise ValueError(f"unknown activity labels {sorted(bad)}")
        if self.progress is None:
            self.progress = np.zeros(n)
        if self.target_speed is None:
            self.target_speed = np.zeros(n)
        if self.relevant is None:
            self.relevant = np.full(n, -1, dtype=np.int64)

    def __len__(self):
        return len(self.extrinsics)

    def control(self, t: int):
        from .metrics import ControlSignal

        return ControlSignal(*(float(v) for v in self.controls[t]))


def _command_at(scene: Scene, s: float, cfg: EpisodeConfig) -> HighLevelCommand:
    if s >= scene.path.length - cfg.destination_radius:
        return HighLevelCommand.NO_COMMAND
    for j in scene.junctions:
        if j.arc - cfg.command_distance <= s <= j.arc + cfg.command_after:
            return j.command
    return HighLevelCommand.FOLLOW


def gen_episode(scene: Scene, seed: int, config: EpisodeConfig = EpisodeConfig()) -> Episode:
    rng = np.random.default_rng(seed)
    ctl = config.controller
    intr = config.intrinsics()
    dt = 1.0 / config.fps
    path = scene.path

    pos = path.point_at(0.0).copy()
    heading = path.heading_at(0.0)
    speed = config.start_speed
    progress = 0.0

    light_state = {j.light: None for j in scene.junctions if j.light >= 0}
    stop_arc = {j.light: j.arc - config.stop_distance for j in scene.junctions if j.light >= 0}
    waiting_at, waited = -1, 0
    traffic_count = 0
    noise_left, noise_value = 0, 0.0

    T = config.frames
    out_ext, out_img, out_gaze = [], [], []

    def traffic_goal(t: int, after_arc: float) -> float:
        # traffic frames needed now so the running fraction is still on target
        # when the car next gets a chance to stop (or at the end of the episode)
        left = T - 1 - t
        later = [a for a in stop_arc.values() if a > after_arc]
        gap = left if not later else min(left, (min(later) - progress) / ctl.v_max * config.fps)
        return config.traffic_fraction * (t + 1 + gap)

    controls = np.zeros((T, 4))
    commands, labels = [], []
    progress_log, target_log, relevant_log = np.zeros(T), np.zeros(T), np.full(T, -1, dtype=np.int64)

    for t in range(T):
        progress = path.closest(pos, progress - 2.0, progress + 10.0)

        # decide light colours on approach
        focus = -1
        for j in scene.junctions:
            if j.light < 0:
                continue
            d = stop_arc[j.light] - progress
            if light_state[j.light] is None and d <= config.approach_distance:
                red = traffic_count < traffic_goal(t, stop_arc[j.light])
                light_state[j.light] = "red" if red else "green"
            if light_state[j.light] is not None and -config.stop_distance < d <= config.approach_distance:
                focus = j.light
                break

        waiting = waiting_at >= 0
        if waiting:
            waited += 1
            done = waited >= config.min_wait and traffic_count >= traffic_goal(t, stop_arc[waiting_at])
            if done or waited >= config.max_wait:
                light_state[waiting_at] = "green"
                waiting_at, waiting = -1, False

        # target speed from upcoming curvature and red lights
        turn = path.turning(progress, progress + ctl.preview)
        target = ctl.v_max / (1.0 + ctl.curvature_gain * turn)
        remaining = path.length - progress
        target = min(target, math.sqrt(2.0 * ctl.comfort_decel * max(0.0, remaining - 2.0)))
        if focus >= 0 and light_state[focus] == "red":
            d = stop_arc[focus] - progress
            if d >= -0.5:
                target = min(target, math.sqrt(2.0 * ctl.comfort_decel * max(0.0, d - 0.5)))
                if not waiting and d <= 0.5:
                    waiting_at, waited, waiting = focus, 0, True
        if waiting:
            speed = 0.0
            target = -1.0

        ext = CameraExtrinsics.from_pose(pos + np.array([0.0, 0.0, config.camera_height]), heading, config.camera_pitch)
        command = _command_at(scene, progress, config)
        control = oracle_control(path, pos, heading, speed, progress, target, ctl)
        controls[t] = control
        commands.append(command)
        label = "traffic" if waiting else "driving"
        labels.append(label)
        traffic_count += label == "traffic"
        progress_log[t], target_log[t], relevant_log[t] = progress, target, focus

        gp = oracle_gaze(scene, ext, intr, command, rng, progress, config.gaze, focus, waiting)
        valid = bool(rng.uniform() >= config.gaze.blink_prob)
        out_gaze.append(GazeRecord(t, gp, valid))
        out_ext.append(ext)
        states = {k: v for k, v in light_state.items() if v is not None}
        out_img.append(render_frame(scene, ext, intr, states, config.render))

        # integrate the car; action noise moves the car but is never recorded
        steer_exec = control[0]
        if noise_left > 0:
            steer_exec = float(np.clip(steer_exec + noise_value, -1.0, 1.0))
            noise_left -= 1
        elif config.noise_prob > 0 and rng.uniform() < config.noise_prob:
            noise_left, noise_value = config.noise_frames, rng.uniform(-config.noise_steer, config.noise_steer)
        if not waiting:
            delta = -steer_exec * ctl.max_steer_angle
            heading += speed * dt * math.tan(delta) / ctl.wheelbase
            heading = math.atan2(math.sin(heading), math.cos(heading))
            pos = pos + speed * dt * np.array([math.cos(heading), math.sin(heading), 0.0])
            speed = max(0.0, speed + (control[1] * ctl.max_accel - control[2] * ctl.max_decel) * dt)

    return Episode(
        intrinsics=intr,
        extrinsics=out_ext,
        images=np.stack(out_img),
        gaze=out_gaze,
        controls=controls,
        commands=commands,
        labels=labels,
        framerate=config.fps,
        progress=progress_log,
        target_speed=target_log,
        relevant=relevant_log,
    )


def generate(seed: int, frames: int, config: Optional[EpisodeConfig] = None, scene_config: Optional[SceneConfig] = None):
    """Scene and episode from one seed, with the path scaled to the episode length."""
    config = config or EpisodeConfig(frames=frames)
    if config.frames != frames:
        config = EpisodeConfig(**{**config.__dict__, "frames": frames})
    scene_config = scene_config or SceneConfig.for_frames(frames, config.fps, config.controller.v_max)
    ss = np.random.SeedSequence(seed)
    scene_seed, episode_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    scene = gen_scene(scene_seed, scene_config)
    return scene, gen_episode(scene, episode_seed, config)
