"""Tracks, obstacles, observations, depth rendering and episode events."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .dynamics import rotation_from_r3
from .field import GateSpec

__all__ = [
    "Obstacle",
    "TrackSpec",
    "Observation",
    "ObsConfig",
    "EpisodeResult",
    "generate_track",
    "gate_bars",
    "observe",
    "observe_many",
    "yaw_toward",
    "render_depth",
    "camera_rays",
    "check_gate_pass",
    "check_collision",
    "nearest_points",
    "out_of_bounds",
    "FAR_CLAMP",
    "DEPTH_SHAPE",
]

FAR_CLAMP = 100.0
DEPTH_SHAPE = (24, 32)
DEPTH_MIN, DEPTH_MAX = 0.1, 10.0
MIN_GATE_SPACING = 3.0


@dataclass(frozen=True)
class Obstacle:
    """Solid sphere or vertical cylinder; ``center`` is the cylinder mid-point."""

    kind: str
    center: tuple
    radius: float
    height: float = 0.0

    def __post_init__(self):
        if self.kind not in ("sphere", "cylinder"):
            raise ValueError(f"unknown obstacle kind {self.kind!r}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))


@dataclass(frozen=True)
class TrackSpec:
    family: str
    gates: tuple
    obstacles: tuple = ()
    difficulty: int = 0
    seed: int = 0
    bounds: tuple = ((-5.0, 35.0), (-10.0, 10.0), (0.0, 6.0))
    start: tuple = (0.0, 0.0, 2.0)
    laps: int = 1

    @property
    def n_targets(self) -> int:
        return len(self.gates) * self.laps

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "difficulty": self.difficulty,
            "seed": self.seed,
            "laps": self.laps,
            "start": list(self.start),
            "bounds": [list(b) for b in self.bounds],
            "gates": [
                {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(g).items()} for g in self.gates
            ],
            "obstacles": [
                {"kind": o.kind, "center": list(o.center), "radius": o.radius, "height": o.height}
                for o in self.obstacles
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrackSpec":
        gates = tuple(GateSpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in g.items()}) for g in d["gates"])
        obstacles = tuple(Obstacle(**o) for o in d.get("obstacles", []))
        return cls(
            family=d["family"],
            gates=gates,
            obstacles=obstacles,
            difficulty=int(d.get("difficulty", 0)),
            seed=int(d.get("seed", 0)),
            bounds=tuple(tuple(float(x) for x in b) for b in d.get("bounds", cls.bounds)),
            start=tuple(float(x) for x in d.get("start", cls.start)),
            laps=int(d.get("laps", 1)),
        )


@dataclass
class ObsConfig:
    hfov_deg: float = 87.0
    vfov_deg: float = 58.0
    render_depth: bool = True


@dataclass
class Observation:
    v_body: np.ndarray
    r3: np.ndarray
    p_gate_body: np.ndarray
    prev_cmd: np.ndarray
    depth: np.ndarray | None
    rotation: np.ndarray
    yaw: np.ndarray

    @property
    def state_vector(self) -> np.ndarray:
        """The 12 state inputs ``(v_body, r3, p_gate_body, prev_cmd)``."""
        return np.concatenate([self.v_body, self.r3, self.p_gate_body, self.prev_cmd], axis=-1)


@dataclass
class EpisodeResult:
    gates_passed: int
    collided: bool
    success_cross: bool
    success: bool
    v_max: float
    steps: int
    reward: float = 0.0
    trajectory: object = None


# ---------------------------------------------------------------------------
# track generation


def _gate(center, direction, size: float, shape: str = "rect") -> GateSpec:
    d = np.asarray(direction, dtype=np.float64)
    d = np.array([d[0], d[1], 0.0])
    d /= np.linalg.norm(d)
    return GateSpec(center=tuple(center), normal=tuple(d), up=(0.0, 0.0, 1.0), width=size, height=size, shape=shape)


def _zigzag(n_gates, spacing, lateral, height, size, normal_mode):
    centers = [np.array([spacing * (i + 1), lateral * (1 if i % 2 == 0 else -1), height]) for i in range(n_gates)]
    start = np.array([0.0, 0.0, height])
    gates = []
    for i, c in enumerate(centers):
        if normal_mode == "axis":
            d = np.array([1.0, 0.0, 0.0])
        else:
            prev = start if i == 0 else centers[i - 1]
            nxt = centers[i + 1] if i + 1 < n_gates else c + (c - prev)
            d = (c - prev) / np.linalg.norm(c - prev) + (nxt - c) / np.linalg.norm(nxt - c)
        gates.append(_gate(c, d, size))
    bounds = ((-5.0, 35.0), (-10.0, 10.0), (0.0, 6.0))
    return gates, tuple(start), bounds


def _ellipse(n_gates, a, b, height, size, center=(15.0, 0.0)):
    th = -0.5 * np.pi + 2.0 * np.pi * np.arange(n_gates) / n_gates
    cx, cy = center
    gates = []
    for t in th:
        c = np.array([cx + a * np.cos(t), cy + b * np.sin(t), height])
        tangent = np.array([-a * np.sin(t), b * np.cos(t), 0.0])
        gates.append(_gate(c, tangent, size))
    # start a short arc before the first gate
    t0 = th[0] - 0.35 * (2.0 * np.pi / n_gates)
    start = (cx + a * np.cos(t0), cy + b * np.sin(t0), height)
    bounds = ((-5.0, 35.0), (-10.0, 10.0), (0.0, 6.0))
    return gates, start, bounds


def _obstacle_clear(ob: Obstacle, gates, start, margin: float) -> bool:
    c = np.asarray(ob.center)
    for g in gates:
        loc = g.to_local(c)
        # keep the approach/exit tunnel of every aperture free
        if ob.kind == "cylinder":
            hz = 0.5 * ob.height
            dz = max(0.0, abs(loc[2]) - hz - 0.5 * g.height)
        else:
            dz = max(0.0, abs(loc[2]) - 0.5 * g.height)
        dn = max(0.0, abs(loc[0]) - 2.0)
        dl = max(0.0, abs(loc[1]) - 0.5 * g.width)
        if math.sqrt(dn * dn + dl * dl + dz * dz) < ob.radius + margin:
            return False
    if np.linalg.norm((c - np.asarray(start))[:2]) < ob.radius + 2.0:
        return False
    return True


def generate_track(
    family: str = "zigzag",
    difficulty: int = 0,
    seed: int = 0,
    *,
    n_gates: int = 4,
    gate_size: float = 1.5,
    height: float = 2.0,
    spacing: float = 5.0,
    lateral: float = 1.5,
    zigzag_normals: str = "axis",
    radius: float = 6.0,
    semi_axes: tuple = (10.0, 6.0),
    laps: int = 1,
    obstacles_base: int = 0,
    obstacles_per_level: int = 2,
    obstacle_margin: float = 0.5,
) -> TrackSpec:
    """Deterministic track for ``(family, difficulty, seed)``.

    Obstacle count is ``obstacles_base + obstacles_per_level * difficulty``;
    obstacles are rejection-sampled away from every gate's approach tunnel
    and from the start point.
    """
    if not 0 <= difficulty <= 9:
        raise ValueError(f"difficulty must lie in [0, 9], got {difficulty}")
    if family == "zigzag":
        gates, start, bounds = _zigzag(n_gates, spacing, lateral, height, gate_size, zigzag_normals)
    elif family == "circular":
        gates, start, bounds = _ellipse(n_gates, radius, radius, height, gate_size)
    elif family == "ellipse":
        gates, start, bounds = _ellipse(n_gates, semi_axes[0], semi_axes[1], height, gate_size)
    else:
        raise ValueError(f"unknown track family {family!r}")

    centers = np.array([g.center for g in gates])
    for i in range(len(gates)):
        for j in range(i + 1, len(gates)):
            gap = np.linalg.norm(centers[i] - centers[j])
            if gap < MIN_GATE_SPACING:
                raise ValueError(
                    f"infeasible {family} track: gates {i} and {j} are {gap:.2f} m apart "
                    f"(minimum {MIN_GATE_SPACING} m); increase spacing/radius or reduce n_gates"
                )
    for (lo, hi), c in zip(bounds, centers.T):
        if np.any(c < lo) or np.any(c > hi):
            raise ValueError(f"infeasible {family} track: gate centres leave the arena {bounds}")

    rng = np.random.default_rng(seed)
    count = obstacles_base + obstacles_per_level * difficulty
    obstacles = []
    tries = 0
    (x0, x1), (y0, y1), (z0, z1) = bounds
    while len(obstacles) < count:
        tries += 1
        if tries > 1000 * max(count, 1):
            raise ValueError(f"could not place {count} obstacles clear of the gates after {tries} draws")
        if rng.random() < 0.5:
            r = rng.uniform(0.3, 0.7)
            c = (rng.uniform(x0 + 1, x1 - 1), rng.uniform(y0 + 1, y1 - 1), rng.uniform(z0 + 1.0, z1 - 2.0))
            ob = Obstacle("sphere", c, r)
        else:
            r = rng.uniform(0.2, 0.5)
            h = z1 - z0
            c = (rng.uniform(x0 + 1, x1 - 1), rng.uniform(y0 + 1, y1 - 1), z0 + 0.5 * h)
            ob = Obstacle("cylinder", c, r, h)
        if _obstacle_clear(ob, gates, start, obstacle_margin):
            obstacles.append(ob)
    return TrackSpec(family, tuple(gates), tuple(obstacles), difficulty, seed, bounds, tuple(start), laps)


# ---------------------------------------------------------------------------
# primitives


def gate_bars(gate: GateSpec):
    """Frame bars as oriented boxes ``(center, axes_rows, half_extents)``."""
    starts, ends = gate.segments
    n = gate.n
    boxes = []
    for r1, r2 in zip(starts, ends):
        e = r2 - r1
        length = np.linalg.norm(e)
        e = e / length
        o = np.cross(e, n)
        center = 0.5 * (r1 + r2) + 0.5 * gate.bar * o
        axes = np.stack([e, o, n])
        half = np.array([0.5 * length + gate.bar, 0.5 * gate.bar, 0.5 * gate.bar])
        boxes.append((center, axes, half))
    return boxes


class _Scene:
    """Packed primitive arrays for one track."""

    def __init__(self, track: TrackSpec):
        sph = [o for o in track.obstacles if o.kind == "sphere"]
        cyl = [o for o in track.obstacles if o.kind == "cylinder"]
        self.sph_c = np.array([o.center for o in sph]).reshape(-1, 3)
        self.sph_r = np.array([o.radius for o in sph])
        self.cyl_c = np.array([o.center for o in cyl]).reshape(-1, 3)
        self.cyl_r = np.array([o.radius for o in cyl])
        self.cyl_h = np.array([o.height for o in cyl])
        boxes = [b for g in track.gates for b in gate_bars(g)]
        self.box_c = np.array([b[0] for b in boxes]).reshape(-1, 3)
        self.box_a = np.array([b[1] for b in boxes]).reshape(-1, 3, 3)
        self.box_h = np.array([b[2] for b in boxes]).reshape(-1, 3)

    @property
    def empty(self) -> bool:
        return len(self.sph_r) + len(self.cyl_r) + len(self.box_h) == 0


_SCENES: dict[int, tuple[TrackSpec, _Scene]] = {}


def _scene(track: TrackSpec) -> _Scene:
    key = id(track)
    hit = _SCENES.get(key)
    if hit is None or hit[0] is not track:
        if len(_SCENES) > 256:
            _SCENES.clear()
        hit = (track, _Scene(track))
        _SCENES[key] = hit
    return hit[1]


def nearest_points(p, track: TrackSpec):
    """Nearest point on every solid primitive: ``(points (..., N, 3))``."""
    s = _scene(track)
    p = np.asarray(p, dtype=np.float64)[..., None, :]
    out = []
    if len(s.sph_r):
        rel = p - s.sph_c
        dist = np.linalg.norm(rel, axis=-1, keepdims=True)
        scale = np.minimum(1.0, s.sph_r[:, None] / np.where(dist > 0, dist, 1.0))
        out.append(s.sph_c + rel * scale)
    if len(s.cyl_r):
        rel = p - s.cyl_c
        rxy = rel[..., :2]
        dist = np.linalg.norm(rxy, axis=-1, keepdims=True)
        scale = np.minimum(1.0, s.cyl_r[:, None] / np.where(dist > 0, dist, 1.0))
        hz = 0.5 * s.cyl_h
        z = np.clip(rel[..., 2], -hz, hz)
        out.append(s.cyl_c + np.concatenate([rxy * scale, z[..., None]], axis=-1))
    if len(s.box_h):
        rel = p - s.box_c
        loc = np.einsum("nij,...nj->...ni", s.box_a, rel)
        loc = np.clip(loc, -s.box_h, s.box_h)
        out.append(s.box_c + np.einsum("nji,...nj->...ni", s.box_a, loc))
    if not out:
        return np.zeros(p.shape[:-2] + (0, 3))
    return np.concatenate(out, axis=-2)


def check_collision(p, track: TrackSpec, r_q: float, v=None):
    """Nearest-obstacle offset, collision flag and closing speed.

    Returns ``(collided, d, v_c)`` with ``d = nearest - p`` clamped to
    :data:`FAR_CLAMP` and ``v_c = max(0, v . d_hat)`` (zero when ``v`` is
    not given). Gate frame bars count as obstacles.
    """
    p = np.asarray(p, dtype=np.float64)
    pts = nearest_points(p, track)
    if pts.shape[-2] == 0:
        d = np.broadcast_to(np.array([FAR_CLAMP, 0.0, 0.0]), p.shape).copy()
    else:
        offs = pts - p[..., None, :]
        dist = np.linalg.norm(offs, axis=-1)
        k = np.argmin(dist, axis=-1)
        d = np.take_along_axis(offs, k[..., None, None], axis=-2)[..., 0, :]
        nd = np.linalg.norm(d, axis=-1, keepdims=True)
        far = nd > FAR_CLAMP
        d = np.where(far, d * FAR_CLAMP / np.where(far, nd, 1.0), d)
    nd = np.linalg.norm(d, axis=-1)
    collided = nd < r_q
    if v is None:
        v_c = np.zeros(nd.shape)
    else:
        dhat = d / np.where(nd > 0, nd, 1.0)[..., None]
        v_c = np.maximum(0.0, np.sum(np.asarray(v, dtype=np.float64) * dhat, axis=-1))
    return collided, d, v_c


def out_of_bounds(p, track: TrackSpec) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    lo = np.array([b[0] for b in track.bounds])
    hi = np.array([b[1] for b in track.bounds])
    return np.any((p < lo) | (p > hi), axis=-1)


def check_gate_pass(p_prev, p_next, gate: GateSpec, r_q: float = 0.0) -> np.ndarray:
    """Segment crosses the gate plane along ``+normal`` inside the shrunk aperture.

    The crossing condition is ``s_prev < 0 <= s_next`` with ``s`` the signed
    distance along the normal, so a traversal fires on exactly one step.
    """
    a = gate.to_local(p_prev)
    b = gate.to_local(p_next)
    s0, s1 = a[..., 0], b[..., 0]
    crossing = (s0 < 0.0) & (s1 >= 0.0)
    t = np.where(crossing, -s0 / np.where(crossing, s1 - s0, 1.0), 0.0)
    hit = a + t[..., None] * (b - a)
    if gate.shape == "rect":
        inside = (np.abs(hit[..., 1]) <= 0.5 * gate.width - r_q) & (np.abs(hit[..., 2]) <= 0.5 * gate.height - r_q)
    else:
        # inscribed radius of the polygon
        rin = gate.polygon_radius * math.cos(math.pi / gate.n_segments)
        inside = np.hypot(hit[..., 1], hit[..., 2]) <= rin - r_q
    return crossing & inside


# ---------------------------------------------------------------------------
# observation and depth


def yaw_toward(p, target) -> np.ndarray:
    rel = np.asarray(target, dtype=np.float64) - np.asarray(p, dtype=np.float64)
    return np.arctan2(rel[..., 1], rel[..., 0])


def camera_rays(cfg: ObsConfig) -> np.ndarray:
    """Body-frame ray directions ``(24, 32, 3)`` with unit forward component."""
    H, W = DEPTH_SHAPE
    tx = math.tan(math.radians(cfg.hfov_deg) / 2) * ((np.arange(W) + 0.5) / W * 2 - 1)
    ty = math.tan(math.radians(cfg.vfov_deg) / 2) * ((np.arange(H) + 0.5) / H * 2 - 1)
    TX, TY = np.meshgrid(tx, ty)
    return np.stack([np.ones_like(TX), -TX, -TY], axis=-1)


def _ray_sphere(o, d, c, r):
    # o (R,3), d (R,3), c (N,3) -> t (R,N), inf when missed
    oc = o[:, None, :] - c[None]
    a = np.sum(d * d, axis=-1)[:, None]
    b = 2.0 * np.sum(d[:, None, :] * oc, axis=-1)
    cc = np.sum(oc * oc, axis=-1) - r[None] ** 2
    disc = b * b - 4 * a * cc
    sq = np.sqrt(np.maximum(disc, 0.0))
    t1 = (-b - sq) / (2 * a)
    t2 = (-b + sq) / (2 * a)
    t = np.where(cc <= 0.0, 0.0, np.where(t1 > 0, t1, np.where(t2 > 0, t2, np.inf)))
    return np.where(disc >= 0.0, t, np.inf)


def _ray_cylinder(o, d, c, r, h):
    oc = o[:, None, :] - c[None]
    dxy = d[:, None, :2]
    a = np.sum(dxy * dxy, axis=-1)
    b = 2.0 * np.sum(dxy * oc[..., :2], axis=-1)
    cc = np.sum(oc[..., :2] ** 2, axis=-1) - r[None] ** 2
    disc = b * b - 4 * a * cc
    sq = np.sqrt(np.maximum(disc, 0.0))
    safe_a = np.where(a > 0, a, 1.0)
    hz = 0.5 * h[None]
    best = np.full(oc.shape[:2], np.inf)
    for sgn in (-1.0, 1.0):
        t = (-b + sgn * sq) / (2 * safe_a)
        z = oc[..., 2] + t * d[:, None, 2]
        ok = (disc >= 0) & (a > 0) & (t > 0) & (np.abs(z) <= hz)
        best = np.where(ok & (t < best), t, best)
    dz = d[:, None, 2]
    safe_dz = np.where(dz != 0, dz, 1.0)
    for sgn in (-1.0, 1.0):
        t = (sgn * hz - oc[..., 2]) / safe_dz
        xy = oc[..., :2] + t[..., None] * dxy
        ok = (dz != 0) & (t > 0) & (np.sum(xy * xy, axis=-1) <= r[None] ** 2)
        best = np.where(ok & (t < best), t, best)
    inside = (cc <= 0) & (np.abs(oc[..., 2]) <= hz)
    return np.where(inside, 0.0, best)


def _ray_box(o, d, c, axes, half):
    rel = o[:, None, :] - c[None]
    lo = np.einsum("nij,rnj->rni", axes, rel)
    ld = np.einsum("nij,rj->rni", axes, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half[None] - lo) / ld
        t2 = (half[None] - lo) / ld
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    par = ld == 0
    inside_slab = np.abs(lo) <= half[None]
    tmin = np.where(par, np.where(inside_slab, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside_slab, np.inf, -np.inf), tmax)
    tn = tmin.max(axis=-1)
    tf = tmax.min(axis=-1)
    hit = (tn <= tf) & (tf > 0)
    return np.where(hit, np.maximum(tn, 0.0), np.inf)


def render_depth(p, R, track: TrackSpec, cfg: ObsConfig | None = None, clamp: bool = True) -> np.ndarray:
    """Z-depth image ``(..., 24, 32)`` by analytic ray casting.

    ``R`` maps body to world; the camera looks along body x. Depth is the
    forward distance of the nearest hit, clamped to [0.1, 10].
    """
    cfg = cfg or ObsConfig()
    p = np.asarray(p, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    batch = p.shape[:-1]
    rays_b = camera_rays(cfg).reshape(-1, 3)
    P = p.reshape(-1, 3)
    Rs = R.reshape(-1, 3, 3)
    s = _scene(track)
    out = np.empty((P.shape[0], rays_b.shape[0]))
    for i in range(P.shape[0]):
        d = rays_b @ Rs[i].T
        o = np.broadcast_to(P[i], d.shape)
        t = np.full(d.shape[0], np.inf)
        if len(s.sph_r):
            t = np.minimum(t, _ray_sphere(o, d, s.sph_c, s.sph_r).min(axis=1))
        if len(s.cyl_r):
            t = np.minimum(t, _ray_cylinder(o, d, s.cyl_c, s.cyl_r, s.cyl_h).min(axis=1))
        if len(s.box_h):
            t = np.minimum(t, _ray_box(o, d, s.box_c, s.box_a, s.box_h).min(axis=1))
        out[i] = t
    if clamp:
        out = np.clip(out, DEPTH_MIN, DEPTH_MAX)
    return out.reshape(batch + DEPTH_SHAPE)


def observe(p, v, r3, prev_cmd, track: TrackSpec, target_gate, cfg: ObsConfig | None = None) -> Observation:
    """Assemble the policy observation from numeric state.

    ``target_gate`` is a gate index (or one per batch entry). The body
    frame points x toward the target gate's horizontal bearing.
    """
    cfg = cfg or ObsConfig()
    p = np.asarray(p, dtype=np.float64)
    centers = np.array([g.center for g in track.gates])
    idx = np.asarray(target_gate) % len(track.gates)
    g = centers[idx]
    yaw = yaw_toward(p, g)
    R = rotation_from_r3(r3, yaw)
    Rt = np.swapaxes(R, -1, -2)
    v_body = np.einsum("...ij,...j->...i", Rt, v)
    p_gate = np.einsum("...ij,...j->...i", Rt, g - p)
    depth = render_depth(p, R, track, cfg) if cfg.render_depth else None
    return Observation(v_body, np.asarray(r3, dtype=np.float64), p_gate, np.asarray(prev_cmd, dtype=np.float64),
                       depth, R, yaw)


@dataclass
class TrackConfig:
    """Track distribution: fixed geometry, per-draw obstacle seed."""

    family: str = "zigzag"
    difficulty: int = 0
    n_gates: int = 4
    gate_size: float = 1.5
    height: float = 2.0
    spacing: float = 5.0
    lateral: float = 1.5
    zigzag_normals: str = "axis"
    radius: float = 6.0
    semi_axes: tuple = (10.0, 6.0)
    laps: int = 1
    obstacles_base: int = 0
    obstacles_per_level: int = 2

    def __post_init__(self):
        self.semi_axes = tuple(self.semi_axes)

    def make(self, seed: int) -> TrackSpec:
        kw = asdict(self)
        family, difficulty = kw.pop("family"), kw.pop("difficulty")
        return generate_track(family, difficulty, seed, **kw)


def observe_many(p, v, r3, prev_cmd, tracks: Sequence[TrackSpec], targets, cfg: ObsConfig | None = None
                 ) -> Observation:
    """Batched :func:`observe` where every row has its own track and target."""
    cfg = cfg or ObsConfig()
    p = np.asarray(p, dtype=np.float64)
    g = np.array([tr.gates[int(i) % len(tr.gates)].center for tr, i in zip(tracks, targets)], dtype=np.float64)
    yaw = yaw_toward(p, g)
    R = rotation_from_r3(r3, yaw)
    Rt = np.swapaxes(R, -1, -2)
    v_body = np.einsum("...ij,...j->...i", Rt, v)
    p_gate = np.einsum("...ij,...j->...i", Rt, g - p)
    depth = None
    if cfg.render_depth:
        depth = np.stack([render_depth(p[e], R[e], tr, cfg) for e, tr in enumerate(tracks)])
    return Observation(v_body, np.asarray(r3, dtype=np.float64), p_gate, np.asarray(prev_cmd, dtype=np.float64),
                       depth, R, yaw)
