"""Batched BPTT rollouts with attractive-field gradient injection.

A batch of ``envs`` rollouts shares one tape (leading batch axis). Each
step records the policy, the dynamics and the per-step losses; the
attractive field of the current target gate is evaluated at the numeric
position and velocity and queued as an injection on that step's position
node. :func:`update` runs the backward pass, clips the global gradient norm
and applies an Adam step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import losses as L
from .dynamics import DynamicsConfig, initial_state, step as dyn_step
from .field import FieldConfig, attractive_field_from_b, polygon_field
from .policy import (
    DeltaConfig,
    Params,
    PolicyConfig,
    bind,
    delta_forward,
    policy_forward,
)
from .tape import GradientInjection, NodeRef, Tape, decay_factor_for
from .world import (
    EpisodeResult,
    ObsConfig,
    TrackSpec,
    check_collision,
    check_gate_pass,
    observe_many,
    out_of_bounds,
)

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "Plant",
    "RolloutRecord",
    "RolloutResult",
    "Adam",
    "rollout",
    "update",
    "evaluate",
    "train",
    "TrainResult",
    "METRICS_COLUMNS",
    "substream",
    "start_states",
    "summarize",
    "eval_tracks",
]

METRICS_COLUMNS = (
    "iter", "loss_total", "loss_C", "loss_a", "loss_j", "loss_p",
    "grad_norm", "avf_norm", "success_rate", "success_cross", "v_max",
)

_STREAMS = {"track": 1, "init": 2, "rollout": 3, "eval": 4, "delta": 5, "collect": 6}


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Named, independent RNG stream derived from the root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAMS[name], *map(int, extra)]))


@dataclass
class TrainConfig:
    horizon: int = 150
    envs: int = 16
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha: float = 3.0
    avf_enabled: bool = True
    grad_clip: float = 5.0
    iterations: int = 200
    eval_every: int = 50
    eval_trials: int = 10
    eval_horizon: int = 300
    start_jitter: float = 0.5
    random_start_gate: bool = True
    start_back: float = 4.0

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError(f"horizon must be >= 2, got {self.horizon}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.envs < 1:
            raise ValueError("envs must be >= 1")


@dataclass
class Plant:
    """Dynamics actually executed: nominal config plus optional perturbation.

    The realised command is ``u - action_bias`` (body frame) and thrust is
    rescaled by ``1 / mass_scale``.
    """

    dynamics: DynamicsConfig
    action_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mass_scale: float = 1.0

    @property
    def nominal(self) -> bool:
        return not np.any(self.action_bias) and self.mass_scale == 1.0


@dataclass
class RolloutRecord:
    """Per-step numeric traces, arrays shaped ``(steps, envs, ...)``."""

    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a_act: np.ndarray
    r3: np.ndarray
    yaw: np.ndarray
    cmd: np.ndarray
    action: np.ndarray
    accel: np.ndarray
    u_a: np.ndarray
    target: np.ndarray
    passed: np.ndarray
    collided: np.ndarray
    alive: np.ndarray
    d_norm: np.ndarray
    v_c: np.ndarray
    losses: dict
    rewards: dict
    p0: np.ndarray
    v0: np.ndarray
    a0: np.ndarray
    n_targets: np.ndarray

    @property
    def steps(self) -> int:
        return self.p.shape[0]

    @property
    def envs(self) -> int:
        return self.p.shape[1]

    def episode_lengths(self) -> np.ndarray:
        return self.alive.sum(axis=0).astype(int)

    def results(self) -> list[EpisodeResult]:
        out = []
        for e in range(self.envs):
            n = int(self.alive[:, e].sum())
            gates = int(self.passed[:n, e].sum())
            collided = bool(self.collided[:n, e].any())
            speed = np.linalg.norm(self.v[:n, e], axis=-1)
            reward = float(self.rewards["total"][:n, e].sum()) if n else 0.0
            out.append(EpisodeResult(
                gates_passed=gates,
                collided=collided,
                success_cross=(not collided) and gates >= int(self.n_targets[e]),
                success=not collided,
                v_max=float(speed.max()) if n else 0.0,
                steps=n,
                reward=reward,
                trajectory=self.env_trace(e),
            ))
        return out

    def env_trace(self, e: int) -> dict:
        n = int(self.alive[:, e].sum())
        trace = {
            "t": self.t[:n],
            "p": self.p[:n, e],
            "v": self.v[:n, e],
            "a": self.a_act[:n, e],
            "gate_idx": self.target[:n, e],
            "collided": self.collided[:n, e],
            "reward": self.rewards["total"][:n, e],
        }
        for k, v in self.losses.items():
            trace[f"loss_{k}"] = v[:n, e]
        return trace


@dataclass
class RolloutResult:
    tape: Tape
    loss: NodeRef
    terms: dict
    injections: list
    record: RolloutRecord
    envs: int


class Adam:
    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return x - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def start_states(tracks: Sequence[TrackSpec], cfg: TrainConfig, rng: np.random.Generator, random_gate: bool):
    """Initial positions and first target per env.

    With ``random_gate`` an env starts ``start_back`` metres before a
    uniformly drawn gate (along the line from the previous gate or the
    start point); otherwise at the track's start point.
    """
    B = len(tracks)
    p0 = np.zeros((B, 3))
    target0 = np.zeros(B, dtype=int)
    for e, tr in enumerate(tracks):
        jitter = rng.uniform(-cfg.start_jitter, cfg.start_jitter, size=3) * np.array([1.0, 1.0, 0.5])
        if random_gate:
            i = int(rng.integers(len(tr.gates)))
            g = tr.gates[i]
            prev = np.asarray(tr.start) if i == 0 else tr.gates[i - 1].c
            back = g.c - prev
            dist = np.linalg.norm(back)
            back = back / dist if dist > 0 else g.n
            p0[e] = g.c - min(cfg.start_back, 0.8 * dist) * back + jitter
            target0[e] = i
        else:
            p0[e] = np.asarray(tr.start) + jitter
    return p0, target0


def rollout(
    policy: Params,
    tracks: Sequence[TrackSpec],
    run,
    tape: Tape,
    *,
    p0: np.ndarray,
    target0: np.ndarray | None = None,
    horizon: int | None = None,
    delta: Params | None = None,
    plant: Plant | None = None,
    frozen_policy: bool = False,
    avf: bool | None = None,
) -> RolloutResult:
    """Roll ``len(tracks)`` environments forward on one tape.

    ``run`` is a :class:`racekit.config.RunConfig` (or anything with the
    same sections). Environments terminate on collision, on leaving the
    arena bounds, or after their last target gate; later steps are masked
    out of every loss and injection.
    """
    dyn: DynamicsConfig = run.dynamics
    fcfg: FieldConfig = run.field
    w: L.LossWeights = run.loss
    pcfg: PolicyConfig = run.policy
    dcfg: DeltaConfig = run.delta
    ocfg: ObsConfig = run.obs
    T = int(horizon or run.train.horizon)
    avf = run.train.avf_enabled if avf is None else avf
    plant = plant or Plant(dyn)
    B = len(tracks)
    p0 = np.asarray(p0, dtype=np.float64).reshape(B, 3)
    target = np.zeros(B, dtype=int) if target0 is None else np.array(target0, dtype=int)
    n_targets = np.array([tr.n_targets for tr in tracks])

    if pcfg.arch == "mlp" and ocfg.render_depth:
        ocfg = ObsConfig(ocfg.hfov_deg, ocfg.vfov_deg, render_depth=False)

    pnodes = bind(policy, tape, frozen=frozen_policy)
    dnodes = bind(delta, tape, frozen=True) if delta is not None else None
    state = initial_state(tape, p0, gravity=dyn.gravity)
    h = hd = None
    prev_cmd = np.zeros((B, 3))
    alive = np.ones(B, dtype=bool)
    accel_prev = np.zeros((B, 3))

    keys = ("clearance", "collide", "progress", "progress_norm", "proj")
    sums = {k: None for k in keys}
    accels, masks, injections = [], [], []
    rec = {k: [] for k in ("p", "v", "a_act", "r3", "yaw", "cmd", "action", "accel", "u_a", "target",
                           "passed", "collided", "alive", "d_norm", "v_c")}
    step_losses = {k: [] for k in ("clearance", "collide", "progress", "proj", "acc")}
    step_rewards: dict[str, list] = {}
    need_progress = w.progress
    r_q = w.r_q

    def acc_sum(key, node, mask_node):
        term = tape.mul(node, mask_node)
        sums[key] = term if sums[key] is None else tape.add(sums[key], term)
        return term

    for k in range(T):
        p_num = tape.read(state.p)
        v_num = tape.read(state.v)
        r3_num = tape.read(state.r3)
        obs = observe_many(p_num, v_num, r3_num, prev_cmd, tracks, target, ocfg)
        cmd, h = policy_forward(obs, h, pnodes, pcfg, tape)
        cmd_num = tape.read(cmd)
        action = cmd
        if dnodes is not None:
            corr, hd = delta_forward(obs.v_body, obs.r3, cmd, hd, dnodes, dcfg, tape)
            action = tape.add(cmd, corr)
        executed = action
        if np.any(plant.action_bias):
            executed = tape.sub(action, tape.constant(plant.action_bias))
        out = dyn_step(state, executed, plant.dynamics, tape, obs.yaw, mass_scale=plant.mass_scale)
        state = out.state
        accels.append(out.accel_world)

        p_new = tape.read(state.p)
        v_new = tape.read(state.v)
        mask = alive.astype(float)
        masks.append(mask)
        mask_node = tape.constant(mask, core=0)

        # events
        target_before = target.copy()
        passed = np.zeros(B, dtype=bool)
        for e in range(B):
            if alive[e]:
                gate = tracks[e].gates[target[e] % len(tracks[e].gates)]
                passed[e] = bool(check_gate_pass(p_num[e], p_new[e], gate, r_q))
        target = target + passed
        collided = np.zeros(B, dtype=bool)
        d_vec = np.zeros((B, 3))
        v_c = np.zeros(B)
        for e in range(B):
            c, d, vc = check_collision(p_new[e], tracks[e], r_q, v_new[e])
            collided[e] = bool(c) or bool(out_of_bounds(p_new[e], tracks[e]))
            d_vec[e], v_c[e] = d, vc
        collided &= alive
        finished = target >= n_targets

        # losses
        nearest = tape.constant(p_new + d_vec, core=1)
        d_norm = tape.norm(tape.sub(nearest, state.p))
        lc = acc_sum("clearance", L.clearance_loss(d_norm, w, tape), mask_node)
        lcol = acc_sum("collide", L.collide_loss(d_norm, v_c, w, tape), mask_node)
        tgt_idx = np.minimum(target, n_targets - 1)
        centers = np.array([tracks[e].gates[tgt_idx[e] % len(tracks[e].gates)].center for e in range(B)])
        gap = centers - p_new
        tiny = np.linalg.norm(gap, axis=-1) < 1e-9
        if np.any(tiny):
            centers = centers + tiny[:, None] * np.array([1e-6, 0.0, 0.0])
        pg = tape.sub(tape.constant(centers, core=1), state.p)
        if need_progress == "lp":
            lp = acc_sum("progress", L.progress_loss(state.v, pg, tape), mask_node)
        else:
            lp = acc_sum("progress_norm", L.progress_loss_normalized(state.v, pg, tape), mask_node)
        if w.use_projection:
            frames = np.array([tracks[e].gates[tgt_idx[e] % len(tracks[e].gates)].frame for e in range(B)])
            p_local = tape.matvec(tape.constant(frames, core=2), pg)
            lproj = acc_sum("proj", L.projection_loss(tape.scale(p_local, -1.0), np.linalg.norm(gap, axis=-1), w, tape),
                            mask_node)
            step_losses["proj"].append(lproj.value.copy())
        else:
            step_losses["proj"].append(np.zeros(B))

        # attractive field for the current target
        u_a = np.zeros((B, 3))
        if avf:
            corners = np.array([tracks[e].gates[tgt_idx[e] % len(tracks[e].gates)].corners for e in range(B)])
            field_b = polygon_field(p_new, corners, fcfg.c_i)
            u_a = attractive_field_from_b(field_b, v_new, fcfg) * alive[:, None]
            injections.append(GradientInjection(state.p, u_a / B))

        accel_num = tape.read(out.accel_world)
        gap_before = np.array([tracks[e].gates[min(target_before[e], n_targets[e] - 1) % len(tracks[e].gates)].center
                               for e in range(B)]) - p_new
        r_th = np.array([
            run.reward.r_th if run.reward.r_th is not None else
            0.5 * min(tracks[e].gates[0].width, tracks[e].gates[0].height) for e in range(B)
        ])
        rw = L.step_reward(
            {"d_norm": np.linalg.norm(d_vec, axis=-1), "v_c": v_c, "accel": accel_num, "accel_prev": accel_prev,
             "dt": dyn.dt, "v_body": v_new, "p_gate_body": gap_before, "r_th": r_th},
            run.reward, w,
        )
        for key, val in rw.items():
            step_rewards.setdefault(key, []).append(val * mask)
        accel_prev = accel_num

        step_losses["clearance"].append(lc.value.copy())
        step_losses["collide"].append(lcol.value.copy())
        step_losses["progress"].append(lp.value.copy())
        step_losses["acc"].append(np.sum(accel_num**2, axis=-1) * mask)

        rec["p"].append(p_new)
        rec["v"].append(v_new)
        rec["a_act"].append(tape.read(state.a_act))
        rec["r3"].append(tape.read(state.r3))
        rec["yaw"].append(np.asarray(obs.yaw))
        rec["cmd"].append(cmd_num)
        rec["action"].append(tape.read(action))
        rec["accel"].append(accel_num)
        rec["u_a"].append(u_a)
        rec["target"].append(np.minimum(target, n_targets - 1) % np.array([len(t.gates) for t in tracks]))
        rec["passed"].append(passed)
        rec["collided"].append(collided)
        rec["alive"].append(alive.copy())
        rec["d_norm"].append(np.linalg.norm(d_vec, axis=-1))
        rec["v_c"].append(v_c)

        prev_cmd = cmd_num
        alive = alive & ~collided & ~finished
        if not alive.any():
            break

    T_div = float(T)
    terms = {k: (tape.scale(v, 1.0 / T_div) if v is not None else None) for k, v in sums.items()}
    if len(accels) >= 2:
        la, lj = L.smoothness_losses(accels, dyn.dt, tape, masks)
        # smoothness_losses divides by the realised length; rescale to the full horizon
        n = len(accels)
        terms["acc"] = tape.scale(la, n / T_div)
        terms["jerk"] = tape.scale(lj, (n - 1) / max(T_div - 1.0, 1.0))
    total = L.total_loss(terms, w, tape)
    loss = tape.mean(total) if total.value.shape else total

    arr = {k: np.array(v) for k, v in rec.items()}
    steps = arr["p"].shape[0]
    record = RolloutRecord(
        t=dyn.dt * (np.arange(steps) + 1),
        losses={k: np.array(v) for k, v in step_losses.items()},
        rewards={k: np.array(v) for k, v in step_rewards.items()},
        p0=p0, v0=np.zeros((B, 3)), a0=np.zeros((B, 3)), n_targets=n_targets,
        **arr,
    )
    return RolloutResult(tape, loss, terms, injections, record, B)


def _scalar(node) -> float:
    if node is None:
        return 0.0
    return float(np.mean(node.value))


def update(result: RolloutResult, params: Params, opt: Adam, cfg: TrainConfig, avf: bool | None = None,
           prefix: str = "") -> tuple[Params, dict]:
    """Backward with position injections, global-norm clip, Adam step.

    Returns the new parameters and a stats dict. A non-finite gradient
    skips the step (``stats['skipped'] = True``).
    """
    avf = cfg.avf_enabled if avf is None else avf
    tape = result.tape
    if avf and result.injections:
        table = tape.backward(result.loss, result.injections)
    else:
        table = tape.backward(result.loss)
    if prefix:
        table = {k[len(prefix):]: v for k, v in table.items() if k.startswith(prefix)}
    g = params.flatten(table)
    gnorm = float(np.linalg.norm(g))
    rec = result.record
    alive = rec.alive.astype(float)
    ua = np.linalg.norm(rec.u_a, axis=-1)
    stats = {
        "loss_total": float(result.loss.value),
        "loss_C": _scalar(result.terms.get("clearance")) + _scalar(result.terms.get("collide")),
        "loss_a": _scalar(result.terms.get("acc")),
        "loss_j": _scalar(result.terms.get("jerk")),
        "loss_p": _scalar(result.terms.get("progress")) + _scalar(result.terms.get("progress_norm")),
        "grad_norm": gnorm,
        "avf_norm": float((ua * alive).sum() / max(alive.sum(), 1.0)),
        "skipped": False,
    }
    if not np.isfinite(gnorm):
        log.warning("non-finite gradient; update skipped")
        stats["skipped"] = True
        return params, stats
    if cfg.grad_clip and gnorm > cfg.grad_clip:
        g = g * (cfg.grad_clip / gnorm)
    new = params.copy(opt.step(params.flat, g))
    return new, stats


def evaluate(
    policy: Params,
    run,
    tracks: Sequence[TrackSpec],
    *,
    seed: int,
    horizon: int | None = None,
    delta: Params | None = None,
    plant: Plant | None = None,
) -> tuple[list[EpisodeResult], RolloutRecord]:
    """Run one deterministic trial per track from its start point."""
    rng = substream(seed, "eval")
    p0, target0 = start_states(tracks, run.train, rng, random_gate=False)
    tape = Tape(decay_factor_for(run.train.alpha, run.dynamics.dt))
    res = rollout(policy, tracks, run, tape, p0=p0, target0=target0,
                  horizon=horizon or run.train.eval_horizon, delta=delta, plant=plant,
                  frozen_policy=True, avf=False)
    return res.record.results(), res.record


def summarize(results: Sequence[EpisodeResult]) -> dict:
    n = max(len(results), 1)
    return {
        "success_rate": sum(r.success for r in results) / n,
        "success_cross": sum(r.success_cross for r in results) / n,
        "v_max": max((r.v_max for r in results), default=0.0),
        "gates_per_episode": sum(r.gates_passed for r in results) / n,
        "mean_reward": sum(r.reward for r in results) / n,
    }


@dataclass
class TrainResult:
    params: Params
    metrics: list[dict]
    checkpoints: list[tuple[int, Params]]


def eval_tracks(run, count: int, seed: int) -> list[TrackSpec]:
    """Held-out tracks: obstacle seeds drawn from the eval stream."""
    rng = substream(seed, "eval", 1)
    seeds = rng.integers(0, 2**31 - 1, size=count)
    return [run.track.make(int(s)) for s in seeds]


def train(
    run,
    policy: Params,
    *,
    seed: int | None = None,
    delta: Params | None = None,
    plant: Plant | None = None,
    eval_plant: Plant | None = None,
    callback: Callable[[int, Params, dict], None] | None = None,
) -> TrainResult:
    """Iterate rollout and update; evaluate every ``eval_every`` iterations.

    ``delta`` (frozen) is added to the policy action during training;
    ``eval_plant`` selects the dynamics used for evaluation (defaults to
    the training plant, without the delta net).
    """
    cfg: TrainConfig = run.train
    seed = run.seed if seed is None else seed
    opt = Adam(policy.size, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    decay = decay_factor_for(cfg.alpha, run.dynamics.dt)
    track_rng = substream(seed, "track")
    start_rng = substream(seed, "rollout")
    held_out = eval_tracks(run, cfg.eval_trials, seed) if cfg.eval_every else []
    metrics: list[dict] = []
    checkpoints = [(0, policy.copy())]
    params = policy
    for it in range(1, cfg.iterations + 1):
        seeds = track_rng.integers(0, 2**31 - 1, size=cfg.envs)
        tracks = [run.track.make(int(s)) for s in seeds]
        p0, target0 = start_states(tracks, cfg, start_rng, cfg.random_start_gate)
        tape = Tape(decay)
        res = rollout(params, tracks, run, tape, p0=p0, target0=target0, delta=delta, plant=plant)
        params, stats = update(res, params, opt, cfg)
        row = {"iter": it, **{k: stats[k] for k in METRICS_COLUMNS[1:8]},
               "success_rate": None, "success_cross": None, "v_max": None}
        if cfg.eval_every and (it % cfg.eval_every == 0 or it == cfg.iterations):
            results, _ = evaluate(params, run, held_out, seed=seed, plant=eval_plant or plant)
            summ = summarize(results)
            row.update(success_rate=summ["success_rate"], success_cross=summ["success_cross"], v_max=summ["v_max"])
            checkpoints.append((it, params.copy()))
            log.info("iter %d loss %.4f SR %.2f SC %.2f vmax %.2f", it, stats["loss_total"], summ["success_rate"],
                     summ["success_cross"], summ["v_max"])
        metrics.append(row)
        if callback is not None:
            callback(it, params, row)
    return TrainResult(params, metrics, checkpoints)
