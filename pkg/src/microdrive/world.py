"""Seeded synthetic micro-driving world.

Lane graphs (straight roads and 4-way intersections), kinematic agents on
lane-following routes, an ego vehicle on a command-conditioned route, and
exact ground-truth futures. Everything is a pure function of (config, seed),
so dataset generation shards trivially by seed.
"""

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

WORLD_SCHEMA_VERSION = 1

AGENT_CLASSES = ["car", "truck", "bus", "pedestrian", "bicycle"]
AGENT_COLORS = ["red", "blue", "black", "white", "silver", "green", "yellow"]
COMMANDS = ["keep_forward", "turn_left", "turn_right"]

# footprint (length, width) per class, meters
AGENT_SIZES = {
    "car": (4.2, 1.8),
    "truck": (7.0, 2.4),
    "bus": (10.0, 2.8),
    "pedestrian": (0.6, 0.6),
    "bicycle": (1.8, 0.6),
}

KEYFRAME_DT_S = 0.5
FUTURE_STEPS = 6          # waypoints per future, 0.5 s apart
HISTORY_STEPS = 4         # past ego-frame positions, 0.5 s apart
MAX_YAW_RATE = 1.0        # rad/s steering clamp for the unicycle model
LANE_HALF_SPAN = 3.5      # road half-width (two 3.5 m lanes)
WHEELBASE = 2.8


def wrap_angle(a):
    """Wrap to [-pi, pi)."""
    return (a + math.pi) % (2 * math.pi) - math.pi


def to_ego_frame(pose, point):
    """World point -> frame of `pose` (X right, Y forward)."""
    x, y, yaw = pose
    dx, dy = point[0] - x, point[1] - y
    fx, fy = math.cos(yaw), math.sin(yaw)
    # right axis = forward rotated -90 degrees
    return (dx * fy - dy * fx, dx * fx + dy * fy)


def from_ego_frame(pose, point):
    x, y, yaw = pose
    px, py = point
    fx, fy = math.cos(yaw), math.sin(yaw)
    return (x + px * fy + py * fx, y - px * fx + py * fy)


@dataclass
class WorldConfig:
    map_extent_m: float = 40.0
    bev_resolution: int = 64
    bev_extent_m: float = 25.6
    n_agents_range: tuple = (2, 5)
    dt_s: float = 0.1
    horizon_steps: int = 100
    seed: int = 0
    intersection_prob: float = 0.5
    v_max: float = 10.0
    a_max: float = 3.0

    def __post_init__(self):
        if self.map_extent_m <= 0:
            raise ValueError("map_extent_m must be positive")
        if self.bev_resolution <= 0:
            raise ValueError("bev_resolution must be positive")
        lo, hi = self.n_agents_range
        if lo > hi or lo < 0:
            raise ValueError(f"bad n_agents_range: {self.n_agents_range}")
        if self.dt_s <= 0:
            raise ValueError("dt_s must be positive")
        if not 0.0 <= self.intersection_prob <= 1.0:
            raise ValueError("intersection_prob must be in [0, 1]")
        if self.horizon_steps < 5 * (8 + FUTURE_STEPS):
            raise ValueError("horizon_steps too small for 8 keyframes plus futures")

    def to_json(self):
        d = self.__dict__.copy()
        d["n_agents_range"] = list(self.n_agents_range)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["n_agents_range"] = tuple(d["n_agents_range"])
        return cls(**d)


@dataclass
class LaneGraph:
    lanes: list                 # list of (P, 2) float arrays, world meters
    lane_widths: list           # meters per lane
    crosswalks: list            # list of (K, 2) polygon vertex arrays
    drivable_area: list         # list of polygon vertex arrays
    boundaries: list            # list of polyline arrays
    is_intersection: bool = False

    def __post_init__(self):
        for lane in self.lanes:
            if len(lane) < 2:
                raise ValueError("lane polyline needs at least 2 points")
        for w in self.lane_widths:
            if w <= 0:
                raise ValueError("lane widths must be positive")

    def to_json(self):
        rnd = lambda arr: [[round(float(v), 4) for v in p] for p in arr]
        return {
            "lanes": [rnd(l) for l in self.lanes],
            "lane_widths": [round(float(w), 4) for w in self.lane_widths],
            "crosswalks": [rnd(c) for c in self.crosswalks],
            "drivable_area": [rnd(p) for p in self.drivable_area],
            "boundaries": [rnd(b) for b in self.boundaries],
            "is_intersection": self.is_intersection,
        }

    @classmethod
    def from_json(cls, d):
        arr = lambda a: np.asarray(a, dtype=float)
        return cls(
            lanes=[arr(l) for l in d["lanes"]],
            lane_widths=list(d["lane_widths"]),
            crosswalks=[arr(c) for c in d["crosswalks"]],
            drivable_area=[arr(p) for p in d["drivable_area"]],
            boundaries=[arr(b) for b in d["boundaries"]],
            is_intersection=d["is_intersection"],
        )


@dataclass
class AgentState:
    agent_id: int
    cls: str
    pose: tuple                 # (x, y, yaw) world frame
    speed: float
    size: tuple                 # (length, width)
    color: str
    yaw_rate: float = 0.0       # ground-truth turn rate, used by captions

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("speed must be nonnegative")
        if self.size[0] <= 0 or self.size[1] <= 0:
            raise ValueError("size must be positive")

    def to_json(self):
        return {
            "agent_id": self.agent_id,
            "cls": self.cls,
            "pose": [round(v, 4) for v in self.pose],
            "speed": round(self.speed, 4),
            "size": [round(v, 4) for v in self.size],
            "color": self.color,
            "yaw_rate": round(self.yaw_rate, 4),
        }

    @classmethod
    def from_json(cls, d):
        return cls(agent_id=d["agent_id"], cls=d["cls"], pose=tuple(d["pose"]),
                   speed=d["speed"], size=tuple(d["size"]), color=d["color"],
                   yaw_rate=d.get("yaw_rate", 0.0))


@dataclass
class EgoState:
    pose: tuple                 # (x, y, yaw) world frame
    velocity: tuple             # (vx, vy) ego frame
    yaw_rate: float
    acceleration: tuple         # (ax, ay) ego frame
    heading_speed: float
    steering: float
    history: list               # last 4 ego-frame positions at 0.5 s spacing

    def to_json(self):
        return {
            "pose": [round(v, 6) for v in self.pose],
            "velocity": [round(v, 4) for v in self.velocity],
            "yaw_rate": round(self.yaw_rate, 4),
            "acceleration": [round(v, 4) for v in self.acceleration],
            "heading_speed": round(self.heading_speed, 4),
            "steering": round(self.steering, 4),
            "history": [[round(v, 4) for v in p] for p in self.history],
        }

    @classmethod
    def from_json(cls, d):
        return cls(pose=tuple(d["pose"]), velocity=tuple(d["velocity"]),
                   yaw_rate=d["yaw_rate"], acceleration=tuple(d["acceleration"]),
                   heading_speed=d["heading_speed"], steering=d["steering"],
                   history=[tuple(p) for p in d["history"]])


@dataclass
class SceneFrame:
    timestamp_s: float
    ego: EgoState
    agents: list
    lane_graph: LaneGraph
    ambience: tuple             # (day|night, clear|rain)

    def __post_init__(self):
        ids = [a.agent_id for a in self.agents]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate agent ids in frame")

    def agent(self, agent_id):
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise MissingAgentError(f"agent {agent_id} not in frame")

    def to_json(self):
        return {
            "timestamp_s": round(self.timestamp_s, 4),
            "ego": self.ego.to_json(),
            "agents": [a.to_json() for a in self.agents],
            "ambience": list(self.ambience),
        }

    @classmethod
    def from_json(cls, d, lane_graph):
        return cls(timestamp_s=d["timestamp_s"], ego=EgoState.from_json(d["ego"]),
                   agents=[AgentState.from_json(a) for a in d["agents"]],
                   lane_graph=lane_graph, ambience=tuple(d["ambience"]))


class MissingAgentError(KeyError):
    pass


def validate_waypoints(points):
    pts = [(float(x), float(y)) for x, y in points]
    if len(pts) != FUTURE_STEPS:
        raise ValueError(f"waypoints must have {FUTURE_STEPS} points")
    for x, y in pts:
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ValueError("non-finite waypoint")
    return pts


@dataclass
class Episode:
    config: WorldConfig
    frames: list                # SceneFrame at 0.5 s keyframes
    ego_future: dict            # keyframe index -> waypoints (ego frame)
    agent_futures: dict         # keyframe index -> {agent_id: waypoints}
    command: str

    def to_json(self):
        return {
            "world_schema": WORLD_SCHEMA_VERSION,
            "config": self.config.to_json(),
            "lane_graph": self.frames[0].lane_graph.to_json(),
            "frames": [f.to_json() for f in self.frames],
            "ego_future": {str(k): [[round(x, 4), round(y, 4)] for x, y in w]
                           for k, w in self.ego_future.items()},
            "agent_futures": {str(k): {str(a): [[round(x, 4), round(y, 4)] for x, y in w]
                                       for a, w in d.items()}
                              for k, d in self.agent_futures.items()},
            "command": self.command,
        }

    @classmethod
    def from_json(cls, d):
        if d.get("world_schema") != WORLD_SCHEMA_VERSION:
            raise ValueError(f"unsupported world schema: {d.get('world_schema')}")
        lg = LaneGraph.from_json(d["lane_graph"])
        return cls(
            config=WorldConfig.from_json(d["config"]),
            frames=[SceneFrame.from_json(f, lg) for f in d["frames"]],
            ego_future={int(k): [tuple(p) for p in w] for k, w in d["ego_future"].items()},
            agent_futures={int(k): {int(a): [tuple(p) for p in w] for a, w in v.items()}
                           for k, v in d["agent_futures"].items()},
            command=d["command"],
        )


def write_episodes_jsonl(episodes, path):
    with open(path, "w", encoding="utf-8") as f:
        for ep in episodes:
            f.write(json.dumps(ep.to_json(), separators=(",", ":")) + "\n")


def read_episodes_jsonl(path):
    episodes = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                episodes.append(Episode.from_json(json.loads(line)))
    return episodes


# --- lane graph construction -------------------------------------------------

def _rect(x0, y0, x1, y1):
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)


def _straight_map(extent, rng):
    e = extent
    lanes = [
        np.array([[1.75, -e], [1.75, e]]),       # northbound
        np.array([[-1.75, e], [-1.75, -e]]),     # southbound
    ]
    boundaries = [np.array([[3.5, -e], [3.5, e]]),
                  np.array([[-3.5, -e], [-3.5, e]])]
    crosswalks = []
    if rng.random() < 0.5:
        cy = rng.uniform(-0.4 * e, 0.4 * e)
        crosswalks.append(_rect(-3.5, cy - 1.5, 3.5, cy + 1.5))
    return LaneGraph(
        lanes=lanes, lane_widths=[3.5, 3.5], crosswalks=crosswalks,
        drivable_area=[_rect(-3.5, -e, 3.5, e)], boundaries=boundaries,
        is_intersection=False)


def _intersection_map(extent, rng):
    e = extent
    lanes = [
        np.array([[1.75, -e], [1.75, e]]),       # northbound
        np.array([[-1.75, e], [-1.75, -e]]),     # southbound
        np.array([[-e, -1.75], [e, -1.75]]),     # eastbound
        np.array([[e, 1.75], [-e, 1.75]]),       # westbound
    ]
    boundaries = [
        np.array([[3.5, -e], [3.5, -3.5]]), np.array([[3.5, 3.5], [3.5, e]]),
        np.array([[-3.5, -e], [-3.5, -3.5]]), np.array([[-3.5, 3.5], [-3.5, e]]),
        np.array([[3.5, -3.5], [e, -3.5]]), np.array([[3.5, 3.5], [e, 3.5]]),
        np.array([[-e, -3.5], [-3.5, -3.5]]), np.array([[-e, 3.5], [-3.5, 3.5]]),
    ]
    crosswalks = []
    if rng.random() < 0.7:
        crosswalks.append(_rect(-3.5, -6.5, 3.5, -3.7))
    return LaneGraph(
        lanes=lanes, lane_widths=[3.5] * 4, crosswalks=crosswalks,
        drivable_area=[_rect(-3.5, -e, 3.5, e), _rect(-e, -3.5, e, 3.5)],
        boundaries=boundaries, is_intersection=True)


# --- routes ------------------------------------------------------------------

def _arc(center, radius, a0, a1, step=0.25):
    n = max(2, int(abs(a1 - a0) * radius / step))
    ang = np.linspace(a0, a1, n)
    return np.stack([center[0] + radius * np.cos(ang),
                     center[1] + radius * np.sin(ang)], axis=1)


def _ego_route(extent, maneuver):
    """Route polyline starting on the northbound lane heading +Y."""
    e = extent
    if maneuver == "straight":
        return np.array([[1.75, -e], [1.75, e]])
    if maneuver == "left":
        # quarter turn CCW exiting westbound (y = +1.75 heading -X)
        a, r = 4.0, 5.75
        entry = np.array([[1.75, -e], [1.75, -a]])
        arc = _arc((1.75 - r, -a), r, 0.0, math.pi / 2)
        exit_ = np.array([[1.75 - r, -a + r], [-e, 1.75]])
        return np.concatenate([entry, arc[1:], exit_[1:]])
    if maneuver == "right":
        # quarter turn CW exiting eastbound (y = -1.75 heading +X)
        a, r = 7.0, 5.25
        entry = np.array([[1.75, -e], [1.75, -a]])
        arc = _arc((1.75 + r, -a), r, math.pi, math.pi / 2)
        exit_ = np.array([[1.75 + r, -a + r], [e, -1.75]])
        return np.concatenate([entry, arc[1:], exit_[1:]])
    raise ValueError(f"unknown maneuver: {maneuver}")


def _cumlen(poly):
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _point_at(poly, cum, s):
    s = min(max(s, 0.0), cum[-1])
    i = int(np.searchsorted(cum, s, side="right")) - 1
    i = min(i, len(poly) - 2)
    seg = cum[i + 1] - cum[i]
    t = 0.0 if seg <= 0 else (s - cum[i]) / seg
    return poly[i] * (1 - t) + poly[i + 1] * t


def _tangent_at(poly, cum, s):
    i = int(np.searchsorted(cum, min(max(s, 0.0), cum[-1]), side="right")) - 1
    i = min(max(i, 0), len(poly) - 2)
    d = poly[i + 1] - poly[i]
    return math.atan2(d[1], d[0])


def _project_arclength(route, cum, p):
    """Arclength of the closest point on the polyline to p."""
    a = route[:-1]
    b = route[1:]
    ab = b - a
    seg_len2 = np.einsum("ij,ij->i", ab, ab)
    seg_len2 = np.where(seg_len2 <= 0, 1.0, seg_len2)
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / seg_len2, 0.0, 1.0)
    proj = a + t[:, None] * ab
    d2 = np.einsum("ij,ij->i", proj - p, proj - p)
    i = int(np.argmin(d2))
    return float(cum[i] + t[i] * (cum[i + 1] - cum[i]))


def follow_route(pose, speed, route, cum, dt, lookahead=2.0):
    """One unicycle step tracking a route polyline.

    Heading turns toward the tangent at the projected arclength plus a
    lookahead, with yaw rate clamped at MAX_YAW_RATE. Position advances
    speed*dt along the updated heading. Returns (pose, yaw_rate).
    """
    x, y, yaw = pose
    if speed <= 0:
        return pose, 0.0
    s = _project_arclength(route, cum, np.array([x, y]))
    target = _point_at(route, cum, s + lookahead)
    dx, dy = target[0] - x, target[1] - y
    if dx * dx + dy * dy < 1e-12:
        target_yaw = _tangent_at(route, cum, s + lookahead)
    else:
        target_yaw = math.atan2(dy, dx)
    dyaw = wrap_angle(target_yaw - yaw)
    max_d = MAX_YAW_RATE * dt
    dyaw = max(-max_d, min(max_d, dyaw))
    yaw = wrap_angle(yaw + dyaw)
    x += speed * dt * math.cos(yaw)
    y += speed * dt * math.sin(yaw)
    return (x, y, yaw), dyaw / dt


def step_agent(state, lane_graph, dt):
    """Advance an agent one step along its nearest lane (unicycle model)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if state.speed <= 0:
        return replace(state, yaw_rate=0.0)
    p = np.array(state.pose[:2])
    best = None
    for lane in lane_graph.lanes:
        cum = _cumlen(lane)
        d = lane - p
        dist = float(np.min(np.einsum("ij,ij->i", d, d)))
        if best is None or dist < best[0]:
            best = (dist, lane, cum)
    _, lane, cum = best
    pose, yaw_rate = follow_route(state.pose, state.speed, lane, cum, dt)
    return replace(state, pose=pose, yaw_rate=yaw_rate)


# --- episode generation ------------------------------------------------------

class _Mover:
    """Internal route follower used during simulation."""

    def __init__(self, route, s0, speed):
        self.route = np.asarray(route, dtype=float)
        self.cum = _cumlen(self.route)
        p = _point_at(self.route, self.cum, s0)
        yaw = _tangent_at(self.route, self.cum, s0)
        self.pose = (float(p[0]), float(p[1]), yaw)
        self.speed = speed
        self.yaw_rate = 0.0

    def at_end(self):
        p = np.array(self.pose[:2])
        return np.linalg.norm(self.route[-1] - p) < max(self.speed * 0.2, 0.3)

    def step(self, dt):
        if self.speed > 0 and self.at_end():
            self.speed = 0.0
        if self.speed <= 0:
            self.yaw_rate = 0.0
            return
        self.pose, self.yaw_rate = follow_route(
            self.pose, self.speed, self.route, self.cum, dt)


def _spawn_agents(config, lane_graph, extent, ego_start, rng):
    n = int(rng.integers(config.n_agents_range[0], config.n_agents_range[1] + 1))
    movers, states = [], []
    placed = []
    for i in range(n):
        cls = rng.choice(AGENT_CLASSES, p=[0.5, 0.15, 0.1, 0.15, 0.1])
        color = rng.choice(AGENT_COLORS)
        size = AGENT_SIZES[cls]
        if cls == "pedestrian":
            side = rng.choice([-1.0, 1.0])
            y0, y1 = sorted(rng.uniform(-0.6 * extent, 0.6 * extent, size=2))
            route = np.array([[side * 2.9, y0], [side * 2.9, max(y1, y0 + 5.0)]])
            speed = float(rng.uniform(0.8, 1.5))
        else:
            lane = lane_graph.lanes[int(rng.integers(len(lane_graph.lanes)))]
            route = lane
            speed = 0.0 if rng.random() < 0.3 else float(
                rng.uniform(2.0, min(7.0, 0.8 * config.v_max)))
            if cls == "bicycle":
                speed = min(speed, 4.0)
        cum = _cumlen(route)
        for _ in range(20):
            s0 = float(rng.uniform(0.1 * cum[-1], 0.75 * cum[-1]))
            p = _point_at(route, cum, s0)
            if np.linalg.norm(p - np.array(ego_start)) < 6.0:
                continue
            if all(np.linalg.norm(p - q) > 5.0 for q in placed):
                placed.append(p)
                break
        else:
            continue
        m = _Mover(route, s0, speed)
        movers.append(m)
        states.append(AgentState(agent_id=len(states), cls=str(cls),
                                 pose=m.pose, speed=m.speed, size=size,
                                 color=str(color)))
    return movers, states


def _ego_speed_profile(rng, n_steps, dt, config, turning):
    v = float(rng.uniform(3.0, 5.5))
    if turning:
        v = min(v, 4.0)
    a = 0.0
    speeds = []
    cap = min(0.8 * config.v_max, 4.2 if turning else 8.0)
    for t in range(n_steps):
        if t % 10 == 0:
            a = float(rng.uniform(-0.25 * config.a_max, 0.25 * config.a_max))
        v = min(max(v + a * dt, 1.5), cap)
        speeds.append(v)
    return speeds


def generate_episode(config, seed):
    """Generate one deterministic episode for (config, seed)."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, seed]))
    extent = config.map_extent_m
    intersection = rng.random() < config.intersection_prob
    if intersection:
        lane_graph = _intersection_map(extent, rng)
        maneuver = "left" if rng.random() < 0.5 else "right"
    else:
        lane_graph = _straight_map(extent, rng)
        maneuver = "straight"
    ambience = (str(rng.choice(["day", "night"], p=[0.7, 0.3])),
                str(rng.choice(["clear", "rain"], p=[0.75, 0.25])))

    dt = config.dt_s
    steps_per_kf = int(round(KEYFRAME_DT_S / dt))
    warmup = HISTORY_STEPS * steps_per_kf
    n_steps = warmup + config.horizon_steps
    n_keyframes = config.horizon_steps // steps_per_kf + 1

    route = _ego_route(extent, maneuver)
    cum = _cumlen(route)
    speeds = _ego_speed_profile(rng, n_steps + 1, dt, config, maneuver != "straight")
    # start so the maneuver plays out inside the horizon
    if maneuver == "straight":
        s0 = float(rng.uniform(0.08 * cum[-1], 0.25 * cum[-1]))
    else:
        approach = extent - 8.0   # arclength from route start to turn entry
        mean_v = sum(speeds) / len(speeds)
        s0 = max(2.0, approach - mean_v * (warmup + config.horizon_steps * 0.45) * dt)
    ego = _Mover(route, s0, speeds[0])

    movers, agent_protos = _spawn_agents(config, lane_graph, extent,
                                         ego.pose[:2], rng)

    # simulate; record every step for ego (history needs sub-keyframe trail)
    ego_trail = [ego.pose]
    agent_trails = [[m.pose] for m in movers]
    agent_speeds = [[m.speed] for m in movers]
    agent_yawrates = [[0.0] for m in movers]
    for t in range(n_steps):
        ego.speed = speeds[t + 1]
        ego.step(dt)
        ego_trail.append(ego.pose)
        for j, m in enumerate(movers):
            m.step(dt)
            agent_trails[j].append(m.pose)
            agent_speeds[j].append(m.speed)
            agent_yawrates[j].append(m.yaw_rate)

    frames = []
    for k in range(n_keyframes):
        t = warmup + k * steps_per_kf
        pose = ego_trail[t]
        prev = ego_trail[t - 1]
        vx_w = (pose[0] - prev[0]) / dt
        vy_w = (pose[1] - prev[1]) / dt
        vel = _world_vec_to_ego(pose[2], (vx_w, vy_w))
        yaw_rate = wrap_angle(pose[2] - prev[2]) / dt
        prev2 = ego_trail[t - 2]
        vprev = _world_vec_to_ego(pose[2], ((prev[0] - prev2[0]) / dt,
                                            (prev[1] - prev2[1]) / dt))
        acc = ((vel[0] - vprev[0]) / dt, (vel[1] - vprev[1]) / dt)
        speed = math.hypot(*vel)
        steering = math.atan2(yaw_rate * WHEELBASE, max(speed, 0.5))
        history = [to_ego_frame(pose, ego_trail[t - (HISTORY_STEPS - h) * steps_per_kf][:2])
                   for h in range(HISTORY_STEPS)]
        ego_state = EgoState(pose=pose, velocity=vel, yaw_rate=yaw_rate,
                             acceleration=acc, heading_speed=speed,
                             steering=steering, history=history)
        agents = []
        for j, proto in enumerate(agent_protos):
            agents.append(replace(
                proto, pose=agent_trails[j][t], speed=agent_speeds[j][t],
                yaw_rate=agent_yawrates[j][t]))
        frames.append(SceneFrame(timestamp_s=k * KEYFRAME_DT_S, ego=ego_state,
                                 agents=agents, lane_graph=lane_graph,
                                 ambience=ambience))

    episode = Episode(config=config, frames=frames, ego_future={},
                      agent_futures={}, command="keep_forward")
    for k in range(n_keyframes - FUTURE_STEPS):
        episode.ego_future[k] = ego_future(episode, k)
        episode.agent_futures[k] = {
            a.agent_id: agent_future(episode, k, a.agent_id)
            for a in frames[k].agents}

    dyaw = wrap_angle(frames[-1].ego.pose[2] - frames[0].ego.pose[2])
    if abs(dyaw) < math.radians(15.0):
        episode.command = "keep_forward"
    else:
        episode.command = "turn_left" if dyaw > 0 else "turn_right"
    return episode


def _world_vec_to_ego(yaw, vec):
    fx, fy = math.cos(yaw), math.sin(yaw)
    return (vec[0] * fy - vec[1] * fx, vec[0] * fx + vec[1] * fy)


def ego_future(episode, keyframe_index):
    """Future ego positions in the ego frame at the keyframe (X right, Y forward)."""
    frames = episode.frames
    if keyframe_index < 0 or keyframe_index + FUTURE_STEPS >= len(frames):
        raise IndexError(f"keyframe {keyframe_index} has no {FUTURE_STEPS}-step future")
    pose = frames[keyframe_index].ego.pose
    return [to_ego_frame(pose, frames[keyframe_index + 1 + t].ego.pose[:2])
            for t in range(FUTURE_STEPS)]


def agent_future(episode, keyframe_index, agent_id):
    """Future agent positions in the agent's own frame at the keyframe."""
    frames = episode.frames
    if keyframe_index < 0 or keyframe_index + FUTURE_STEPS >= len(frames):
        raise IndexError(f"keyframe {keyframe_index} has no {FUTURE_STEPS}-step future")
    pose = frames[keyframe_index].agent(agent_id).pose
    out = []
    for t in range(FUTURE_STEPS):
        fut = frames[keyframe_index + 1 + t].agent(agent_id)
        out.append(to_ego_frame(pose, fut.pose[:2]))
    return out
