"""Gate-induced magnetic field and the attractive guidance field built on it.

Each gate edge is a straight current segment; the field of a segment is
the finite-wire Biot-Savart closed form, with ``d`` the perpendicular from
the query point to the segment's supporting line. All functions accept a
batch of points ``(..., 3)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "GateSpec",
    "FieldConfig",
    "SINGULAR_RADIUS",
    "segment_field",
    "polygon_field",
    "gate_field",
    "attractive_field",
    "dump_grid",
    "GRID_HEADER",
]

SINGULAR_RADIUS = 1e-9
GRID_HEADER = "x,y,z,bx,by,bz,ax,ay,az"


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class GateSpec:
    """A gate: centre, traversal normal, up vector and aperture size.

    ``shape`` is ``"rect"`` (four edges) or ``"circle"``: a regular polygon
    of ``n_segments`` edges with the same area as the circle of diameter
    ``width``.
    """

    center: tuple
    normal: tuple
    up: tuple = (0.0, 0.0, 1.0)
    width: float = 1.5
    height: float = 1.5
    shape: str = "rect"
    n_segments: int = 16
    bar: float = 0.1

    def __post_init__(self):
        n, u = _unit(self.normal), _unit(self.up)
        if abs(float(n @ u)) > 1e-9:
            raise ValueError("gate normal and up must be orthogonal")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("gate width and height must be positive")
        if self.shape not in ("rect", "circle"):
            raise ValueError(f"unknown gate shape {self.shape!r}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "normal", tuple(float(c) for c in n))
        object.__setattr__(self, "up", tuple(float(c) for c in u))

    @property
    def c(self) -> np.ndarray:
        return np.array(self.center)

    @property
    def n(self) -> np.ndarray:
        return np.array(self.normal)

    @property
    def u(self) -> np.ndarray:
        return np.array(self.up)

    @property
    def lateral(self) -> np.ndarray:
        return np.cross(self.u, self.n)

    @cached_property
    def frame(self) -> np.ndarray:
        """Rows are the gate axes (normal, lateral, up) in world coordinates."""
        out = np.stack([self.n, self.lateral, self.u])
        out.flags.writeable = False
        return out

    @cached_property
    def corners(self) -> np.ndarray:
        """Loop vertices ordered right-handed about ``+normal``."""
        c, l, u = self.c, self.lateral, self.u
        if self.shape == "rect":
            hw, hh = 0.5 * self.width, 0.5 * self.height
            out = np.stack([c - hw * l - hh * u, c + hw * l - hh * u, c + hw * l + hh * u, c - hw * l + hh * u])
        else:
            th = 2.0 * np.pi * np.arange(self.n_segments) / self.n_segments
            r = self.polygon_radius
            out = c + r * (np.cos(th)[:, None] * l + np.sin(th)[:, None] * u)
        out.flags.writeable = False
        return out

    @property
    def polygon_radius(self) -> float:
        """Vertex radius of the equal-area polygon for circular gates."""
        n = self.n_segments
        return 0.5 * self.width * float(np.sqrt(2.0 * np.pi / (n * np.sin(2.0 * np.pi / n))))

    @property
    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        starts = self.corners
        return starts, np.roll(starts, -1, axis=0)

    def to_local(self, p) -> np.ndarray:
        """World point(s) in gate coordinates (normal, lateral, up)."""
        return (np.asarray(p, dtype=np.float64) - self.c) @ self.frame.T


@dataclass(frozen=True)
class FieldConfig:
    c_i: float = 2e-5
    lambda_a: float = 0.3
    epsilon: float = 1e-5

    def __post_init__(self):
        if not 0.0 < self.lambda_a < 1.0:
            raise ValueError(f"lambda_a must lie in (0, 1), got {self.lambda_a}")
        if self.epsilon <= 0 or self.c_i <= 0:
            raise ValueError("c_i and epsilon must be positive")


def _cross(a, b):
    # np.cross carries heavy axis bookkeeping for tiny arrays
    a, b = np.broadcast_arrays(a, b)
    out = np.empty(a.shape)
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def segment_field(p, r1, r2, c_i: float, return_singular: bool = False):
    """Field of the straight segment ``r1 -> r2`` at points ``p``.

    ``C * [l . ((r1-p)/|r1-p| - (r2-p)/|r2-p|)] * (l x d) / |d|^2`` where
    ``d`` runs from ``p`` to its foot on the segment's line. Points within
    :data:`SINGULAR_RADIUS` of the line get a zero vector and are flagged.
    """
    p = np.asarray(p, dtype=np.float64)
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    seg = r2 - r1
    l = seg / np.linalg.norm(seg, axis=-1, keepdims=True)
    a = r1 - p
    b = r2 - p
    foot_t = -np.sum(a * l, axis=-1, keepdims=True)
    d = a + foot_t * l
    d2 = np.sum(d * d, axis=-1)
    singular = d2 <= SINGULAR_RADIUS**2
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        scalar = np.sum(l * (a / na - b / nb), axis=-1)
        B = (c_i * scalar / d2)[..., None] * _cross(l, d)
    B = np.where(singular[..., None], 0.0, B)
    if return_singular:
        return B, singular
    return B


def polygon_field(p, vertices: np.ndarray, c_i: float, return_singular: bool = False):
    """Superposition of the segment fields around a closed polygon.

    ``vertices`` is ``(n, 3)`` or batched ``(..., n, 3)`` matching ``p``'s
    leading axes.
    """
    p = np.asarray(p, dtype=np.float64)
    vertices = np.asarray(vertices, dtype=np.float64)
    starts = vertices
    ends = np.roll(vertices, -1, axis=-2)
    B, s = segment_field(p[..., None, :], starts, ends, c_i, return_singular=True)
    total = B[..., 0, :]
    for i in range(1, B.shape[-2]):
        total = total + B[..., i, :]
    singular = np.any(s, axis=-1)
    if return_singular:
        return total, singular
    return total


def gate_field(p, gate: GateSpec, cfg: FieldConfig, return_singular: bool = False):
    return polygon_field(p, gate.corners, cfg.c_i, return_singular)


def attractive_field_from_b(B, v, cfg: FieldConfig) -> np.ndarray:
    B = np.asarray(B, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nb = np.linalg.norm(B, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    atten = 1.0 - np.sum(v * B, axis=-1) / (nv * nb + cfg.epsilon)
    safe = np.where(nb > 0.0, nb, 1.0)
    scale = np.where(nb > 0.0, atten / safe**cfg.lambda_a, 0.0)
    return scale[..., None] * B


def attractive_field(p, v, gate: GateSpec, cfg: FieldConfig) -> np.ndarray:
    """Alignment-attenuated, magnitude-tempered gate field.

    ``(1 - v.B / (|v||B| + eps)) * B / |B|^lambda_a``; zero where ``B``
    vanishes.
    """
    return attractive_field_from_b(gate_field(p, gate, cfg), v, cfg)


def grid_points(bounds, resolution) -> np.ndarray:
    """Row-major sample points (x slowest, z fastest)."""
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
    if np.any(res < 2):
        raise ValueError(f"resolution must be >= 2 per axis, got {tuple(res)}")
    axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(bounds, res)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=-1)


def dump_grid(gates, cfg: FieldConfig, bounds, resolution) -> np.ndarray:
    """Rows ``(x, y, z, bx, by, bz, ax, ay, az)`` of the superposed field.

    The attractive components are evaluated at zero velocity.
    """
    pts = grid_points(bounds, resolution)
    B = np.zeros_like(pts)
    for gate in gates:
        B = B + gate_field(pts, gate, cfg)
    A = attractive_field_from_b(B, np.zeros_like(pts), cfg)
    return np.concatenate([pts, B, A], axis=1)
