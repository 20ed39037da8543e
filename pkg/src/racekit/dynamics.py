"""Point-mass quadrotor with first-order actuation lag and linear drag.

The command is a body-frame acceleration that excludes gravity (hover is
``u = 0``); the body z-axis follows from differential flatness as the
direction of ``a_act + g z``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tape import NodeRef, Tape

__all__ = [
    "DynamicsConfig",
    "DroneState",
    "StepOutput",
    "NonFiniteStateError",
    "rotation_from_r3",
    "smooth_clamp",
    "initial_state",
    "step",
]

Z_AXIS = np.array([0.0, 0.0, 1.0])


class NonFiniteStateError(FloatingPointError):
    pass


@dataclass
class DynamicsConfig:
    dt: float = 1.0 / 30.0
    tau_act: float = 0.05
    drag_coeff: float = 0.3
    gravity: float = 9.81
    a_max: float = 12.0
    clamp_sharpness: float = 2.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.tau_act <= 0:
            raise ValueError(f"tau_act must be positive, got {self.tau_act}")
        if self.drag_coeff < 0:
            raise ValueError(f"drag_coeff must be non-negative, got {self.drag_coeff}")
        if self.a_max <= 0:
            raise ValueError(f"a_max must be positive, got {self.a_max}")


@dataclass
class DroneState:
    """Tape handles for the differentiable state ``(p, v, a_act, r3)``."""

    p: NodeRef
    v: NodeRef
    a_act: NodeRef
    r3: NodeRef


@dataclass
class StepOutput:
    state: DroneState
    accel_world: NodeRef  # commanded world-frame acceleration after clamping


def _tilt(x, y, z):
    # Rodrigues for z -> (x, y, z) about the axis (-y, x, 0); needs z > -1
    k = 1.0 / (1.0 + z)
    tilt = np.empty(x.shape + (3, 3))
    tilt[..., 0, 0] = 1.0 - x * x * k
    tilt[..., 0, 1] = -x * y * k
    tilt[..., 0, 2] = x
    tilt[..., 1, 0] = -x * y * k
    tilt[..., 1, 1] = 1.0 - y * y * k
    tilt[..., 1, 2] = y
    tilt[..., 2, 0] = -x
    tilt[..., 2, 1] = -y
    tilt[..., 2, 2] = z
    return tilt


_FLIP = np.diag([1.0, -1.0, -1.0])


def rotation_from_r3(r3, yaw) -> np.ndarray:
    """Rotation whose third column is ``r3``, composed as tilt * Rz(yaw).

    The tilt is the minimal rotation taking ``z`` onto ``r3``. Works on
    batches (``r3`` shape ``(..., 3)``, ``yaw`` shape ``(...)``). On the
    lower hemisphere (``r3_z < -0.5``) the tilt is taken from the flipped
    frame ``diag(1, -1, -1)`` to stay well conditioned; at exactly
    ``r3 = -z`` the frame is that flip and the yaw is ignored.
    """
    r3 = np.asarray(r3, dtype=np.float64)
    yaw = np.asarray(yaw, dtype=np.float64)
    batch = np.broadcast_shapes(r3.shape[:-1], yaw.shape)
    r3 = np.broadcast_to(r3, batch + (3,))
    yaw = np.broadcast_to(yaw, batch)
    x, y, z = r3[..., 0], r3[..., 1], r3[..., 2]
    lower = z < -0.5
    # flipped vector F r3 = (x, -y, -z) lies on the upper hemisphere
    tilt_up = _tilt(x, y, np.where(lower, 0.0, z))
    tilt_lo = _FLIP @ _tilt(x, -y, np.where(lower, -z, 0.0))
    tilt = np.where(lower[..., None, None], tilt_lo, tilt_up)
    c, s = np.cos(yaw), np.sin(yaw)
    rz = np.zeros(batch + (3, 3))
    rz[..., 0, 0] = c
    rz[..., 0, 1] = -s
    rz[..., 1, 0] = s
    rz[..., 1, 1] = c
    rz[..., 2, 2] = 1.0
    R = tilt @ rz
    flip = (x == 0.0) & (y == 0.0) & (z < 0.0)
    if np.any(flip):
        R[flip] = _FLIP
    return R


def smooth_clamp(u: NodeRef, a_max: float, sharpness: float, tape: Tape) -> NodeRef:
    """``u * a_max / smax(a_max, |u|)`` with a softplus-smoothed max."""
    n = tape.norm(u)
    excess = tape.scale(tape.softplus(tape.scale(tape.shift(n, -a_max), sharpness)), 1.0 / sharpness)
    smax = tape.shift(excess, a_max)
    return tape.mul(u, tape.div(tape.constant(a_max), smax))


def initial_state(tape: Tape, p0, v0=None, a0=None, gravity: float = 9.81) -> DroneState:
    """Constant (non-differentiable) starting state; batch shape follows ``p0``."""
    p0 = np.asarray(p0, dtype=np.float64)
    v0 = np.zeros_like(p0) if v0 is None else np.broadcast_to(np.asarray(v0, float), p0.shape)
    a0 = np.zeros_like(p0) if a0 is None else np.broadcast_to(np.asarray(a0, float), p0.shape)
    thrust = a0 + gravity * Z_AXIS
    r3 = thrust / np.linalg.norm(thrust, axis=-1, keepdims=True)
    p = tape.tag(tape.constant(p0, core=1), "position")
    return DroneState(p, tape.constant(v0, core=1), tape.constant(a0, core=1), tape.constant(r3, core=1))


def step(
    state: DroneState,
    cmd: NodeRef,
    cfg: DynamicsConfig,
    tape: Tape,
    yaw=0.0,
    *,
    mass_scale: float = 1.0,
) -> StepOutput:
    """Advance one step of ``dt`` and start a new tape step.

    ``yaw`` sets the heading of the body frame (detached). ``mass_scale``
    rescales the realised thrust for perturbed plants; the nominal model
    uses 1.
    """
    r3_now = tape.read(state.r3)
    for name, node in (("p", state.p), ("v", state.v), ("a_act", state.a_act)):
        if not np.all(np.isfinite(tape.read(node))):
            raise NonFiniteStateError(f"non-finite {name} in state")
    if not np.all(np.isfinite(r3_now)):
        raise NonFiniteStateError("non-finite r3 in state")
    if not np.all(np.isfinite(tape.read(cmd))):
        raise NonFiniteStateError("non-finite command")

    tape.mark_step()
    p = tape.carry(state.p)
    v = tape.carry(state.v)
    a = tape.carry(state.a_act)

    u = smooth_clamp(cmd, cfg.a_max, cfg.clamp_sharpness, tape)
    R = tape.constant(rotation_from_r3(r3_now, yaw), core=2)
    a_w = tape.matvec(R, u)
    a_target = a_w
    if mass_scale != 1.0:
        g = tape.constant(cfg.gravity * Z_AXIS)
        a_target = tape.sub(tape.scale(tape.add(a_w, g), 1.0 / mass_scale), g)

    dt = cfg.dt
    a_new = tape.add(a, tape.scale(tape.sub(a_target, a), dt / cfg.tau_act))
    acc = tape.sub(a_new, tape.scale(v, cfg.drag_coeff)) if cfg.drag_coeff else a_new
    v_new = tape.add(v, tape.scale(acc, dt))
    p_new = tape.add(tape.add(p, tape.scale(v, dt)), tape.scale(acc, 0.5 * dt * dt))
    r3_new = tape.normalize(tape.add(a_new, tape.constant(cfg.gravity * Z_AXIS)))
    tape.tag(p_new, "position")
    return StepOutput(DroneState(p_new, v_new, a_new, r3_new), a_w)
