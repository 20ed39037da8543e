"""Differentiable per-step loss terms and the logging-only step reward.

Per-step terms return batched tape scalars; horizon averaging and
termination masking happen in the trainer, which divides every sum by the
full horizon length.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tape import NodeRef, Tape, TapeError

__all__ = [
    "LossWeights",
    "RewardWeights",
    "clearance_loss",
    "collide_loss",
    "smoothness_losses",
    "progress_loss",
    "progress_loss_normalized",
    "projection_loss",
    "total_loss",
    "step_reward",
    "PROGRESS_EPS",
]

PROGRESS_EPS = 1e-6


@dataclass
class LossWeights:
    lambda_c: float = 3.0
    lambda_a: float = 1e-2
    lambda_j: float = 1e-3
    lambda_p: float = 0.4
    beta_1: float = 1.0
    beta_2: float = 5.0
    r_q: float = 0.2
    lambda_proj: float = 3.0
    beta_3: float = 0.5
    lambda_p_norm: float = 1.6
    # "lp" or "lp_norm"
    progress: str = "lp"
    use_projection: bool = False
    # "repel" penalises proximity; "attract" keeps the softplus increasing in distance
    clearance_sign: str = "repel"

    def __post_init__(self):
        for name in ("lambda_c", "lambda_a", "lambda_j", "lambda_p", "beta_1", "beta_2",
                     "lambda_proj", "beta_3", "lambda_p_norm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.r_q <= 0:
            raise ValueError("r_q must be positive")
        if self.progress not in ("lp", "lp_norm"):
            raise ValueError(f"progress must be 'lp' or 'lp_norm', got {self.progress!r}")
        if self.clearance_sign not in ("repel", "attract"):
            raise ValueError("clearance_sign must be 'repel' or 'attract'")


@dataclass
class RewardWeights:
    lambda_1: float = -30.0
    lambda_2: float = -6.0
    lambda_3: float = -3.0
    lambda_4: float = -1e-2
    lambda_5: float = -1e-3
    lambda_6: float = 110.0
    lambda_7: float = 0.4
    # gate-pass radius; None means half the smaller aperture side
    r_th: float | None = None


def _softplus_arg_sign(w: LossWeights) -> float:
    return -1.0 if w.clearance_sign == "repel" else 1.0


def clearance_loss(d_norm: NodeRef, w: LossWeights, tape: Tape) -> NodeRef:
    """``beta_1 * softplus(-beta_2 (|d| - r_q))`` (sign per ``clearance_sign``)."""
    arg = tape.scale(tape.shift(d_norm, -w.r_q), _softplus_arg_sign(w) * w.beta_2)
    return tape.scale(tape.softplus(arg), w.beta_1)


def collide_loss(d_norm: NodeRef, v_c, w: LossWeights, tape: Tape) -> NodeRef:
    """``v_c * max(1 - (|d| - r_q), 0)^2`` with ``v_c`` detached."""
    if isinstance(v_c, NodeRef):
        v_c = tape.detach(v_c)
    else:
        v_c = tape.constant(np.asarray(v_c, dtype=np.float64), core=0)
    hinge = tape.relu(tape.shift(tape.scale(d_norm, -1.0), 1.0 + w.r_q))
    return tape.mul(v_c, tape.square(hinge))


def smoothness_losses(accels, dt: float, tape: Tape, masks=None):
    """Mean squared acceleration and mean squared finite-difference jerk.

    ``masks`` (optional, one per step, broadcastable to the batch) zero out
    terminated steps; the divisors stay ``T`` and ``T - 1``.
    """
    T = len(accels)
    if T < 2:
        raise TapeError(f"smoothness_losses: need at least 2 steps, got {T}")
    acc_sum = None
    jerk_sum = None
    for k, a in enumerate(accels):
        term = tape.sqnorm(a)
        if masks is not None:
            term = tape.mul(term, tape.constant(masks[k], core=0))
        acc_sum = term if acc_sum is None else tape.add(acc_sum, term)
        if k + 1 < T:
            diff = tape.scale(tape.sub(accels[k + 1], a), 1.0 / dt)
            jt = tape.sqnorm(diff)
            if masks is not None:
                jt = tape.mul(jt, tape.constant(masks[k + 1], core=0))
            jerk_sum = jt if jerk_sum is None else tape.add(jerk_sum, jt)
    return tape.scale(acc_sum, 1.0 / T), tape.scale(jerk_sum, 1.0 / (T - 1))


def progress_loss(v_body: NodeRef, p_gate_body: NodeRef, tape: Tape) -> NodeRef:
    """``-(v . p_gate) / |p_gate|``."""
    dist = tape.read(tape.norm(p_gate_body))
    if np.any(dist <= 0.0):
        raise TapeError("progress_loss: gate position is zero")
    return tape.scale(tape.div(tape.dot(v_body, p_gate_body), tape.norm(p_gate_body)), -1.0)


def progress_loss_normalized(v_body: NodeRef, p_gate_body: NodeRef, tape: Tape) -> NodeRef:
    """``-cos(v, p_gate)``; zero where ``|v| <= 1e-6``."""
    dist = tape.read(tape.norm(p_gate_body))
    if np.any(dist <= 0.0):
        raise TapeError("progress_loss_normalized: gate position is zero")
    nv = tape.norm(v_body)
    live = (tape.read(nv) > PROGRESS_EPS).astype(float)
    denom = tape.add(tape.mul(nv, tape.norm(p_gate_body)), tape.constant(1.0 - live, core=0))
    cos = tape.div(tape.dot(v_body, p_gate_body), denom)
    return tape.mul(tape.scale(cos, -1.0), tape.constant(live, core=0))


def projection_loss(p_gate_frame: NodeRef, d_gate, w: LossWeights, tape: Tape) -> NodeRef:
    """``|p_yz|^2 * exp(-beta_3 d_gate)``; ``p`` in gate axes (normal first)."""
    d = tape.read(d_gate) if isinstance(d_gate, NodeRef) else np.asarray(d_gate, dtype=np.float64)
    yz = tape.slice(p_gate_frame, 1, 3)
    return tape.mul(tape.sqnorm(yz), tape.constant(np.exp(-w.beta_3 * d), core=0))


def total_loss(terms: dict, w: LossWeights, tape: Tape) -> NodeRef:
    """Weighted sum of horizon-averaged terms.

    ``terms`` maps ``clearance``, ``collide``, ``acc``, ``jerk``,
    ``progress`` (and optionally ``progress_norm``, ``proj``) to tape
    scalars; missing entries count as zero. The progress weight is
    ``lambda_p`` for ``lp`` and ``lambda_p_norm`` for ``lp_norm``.
    """
    parts = []

    def add(name, weight):
        node = terms.get(name)
        if node is not None and weight != 0.0:
            parts.append(tape.scale(node, weight))

    if terms.get("clearance") is not None or terms.get("collide") is not None:
        c = [terms[k] for k in ("clearance", "collide") if terms.get(k) is not None]
        lc = c[0] if len(c) == 1 else tape.add(c[0], c[1])
        if w.lambda_c != 0.0:
            parts.append(tape.scale(lc, w.lambda_c))
    add("acc", w.lambda_a)
    add("jerk", w.lambda_j)
    if w.progress == "lp":
        add("progress", w.lambda_p)
    else:
        add("progress_norm", w.lambda_p_norm)
    if w.use_projection:
        add("proj", w.lambda_proj)
    if not parts:
        return tape.constant(0.0, core=0)
    out = parts[0]
    for p in parts[1:]:
        out = tape.add(out, p)
    return out


def step_reward(rec: dict, rw: RewardWeights, lw: LossWeights) -> dict:
    """Per-step reward components (numeric, for logging).

    ``rec`` holds ``d_norm``, ``v_c``, ``accel``, ``accel_prev``, ``dt``,
    ``v_body``, ``p_gate_body`` and ``r_th``; arrays may be batched.
    """
    d = np.asarray(rec["d_norm"], dtype=np.float64)
    v_c = np.asarray(rec["v_c"], dtype=np.float64)
    a = np.asarray(rec["accel"], dtype=np.float64)
    a_prev = np.asarray(rec["accel_prev"], dtype=np.float64)
    vb = np.asarray(rec["v_body"], dtype=np.float64)
    pg = np.asarray(rec["p_gate_body"], dtype=np.float64)
    r_th = rec["r_th"]
    dist = np.linalg.norm(pg, axis=-1)
    sign = _softplus_arg_sign(lw)
    r_collision = rw.lambda_1 * (d < lw.r_q)
    r_avoid = rw.lambda_2 * np.logaddexp(0.0, sign * lw.beta_2 * (d - lw.r_q)) + rw.lambda_3 * v_c * np.maximum(
        1.0 - d + lw.r_q, 0.0
    ) ** 2
    jerk = (a - a_prev) / rec["dt"]
    r_smooth = rw.lambda_4 * np.sum(a * a, axis=-1) + rw.lambda_5 * np.sum(jerk * jerk, axis=-1)
    r_pass = rw.lambda_6 * (dist < r_th)
    safe = np.where(dist > 0.0, dist, 1.0)
    r_progress = np.where(dist > 0.0, rw.lambda_7 * np.sum(vb * pg, axis=-1) / safe, 0.0)
    total = r_collision + r_avoid + r_smooth + r_pass + r_progress
    return {
        "collision": r_collision,
        "avoid": r_avoid,
        "smooth": r_smooth,
        "pass": r_pass,
        "progress": r_progress,
        "total": total,
    }
