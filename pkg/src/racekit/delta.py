"""Residual action model: collect target-plant data, fit, fine-tune.

The target plant executes ``u - action_bias`` with rescaled thrust, extra
drag and extra actuator lag. The delta network learns a correction that,
added to the recorded command, makes the nominal dynamics reproduce the
recorded states.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dynamics import DynamicsConfig, DroneState, rotation_from_r3, step as dyn_step
from .policy import Params, bind, delta_forward, delta_manifest, init_params
from .tape import Tape
from .trainer import Adam, Plant, TrainResult, rollout, start_states, substream, train
from .world import TrackSpec

log = logging.getLogger(__name__)

__all__ = [
    "TargetDynamics",
    "TransitionDataset",
    "Episode",
    "FitResult",
    "DeltaDivergenceError",
    "collect",
    "fit_delta",
    "finetune_with_delta",
    "simulate_window",
    "DATASET_COLUMNS",
]

DATASET_COLUMNS = ("t", "px", "py", "pz", "vx", "vy", "vz", "ax", "ay", "az", "ux", "uy", "uz", "yaw")


class DeltaDivergenceError(FloatingPointError):
    pass


@dataclass
class TargetDynamics:
    base: DynamicsConfig = field(default_factory=DynamicsConfig)
    action_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mass_scale: float = 1.0
    extra_drag: float = 0.0
    extra_lag: float = 0.0

    def __post_init__(self):
        self.action_bias = np.asarray(self.action_bias, dtype=np.float64).reshape(3)
        if self.base.drag_coeff + self.extra_drag < 0:
            raise ValueError("perturbed drag must stay non-negative")
        if self.base.tau_act + self.extra_lag <= 0:
            raise ValueError("perturbed actuator lag must stay positive")
        if self.mass_scale <= 0:
            raise ValueError("mass_scale must be positive")

    @classmethod
    def from_config(cls, base: DynamicsConfig, target) -> "TargetDynamics":
        return cls(base, np.array(target.action_bias), target.mass_scale, target.extra_drag, target.extra_lag)

    @property
    def is_null(self) -> bool:
        return (not np.any(self.action_bias) and self.mass_scale == 1.0 and self.extra_drag == 0.0
                and self.extra_lag == 0.0)

    def plant(self) -> Plant:
        dyn = replace(self.base, drag_coeff=self.base.drag_coeff + self.extra_drag,
                      tau_act=self.base.tau_act + self.extra_lag)
        return Plant(dyn, self.action_bias.copy(), self.mass_scale)


@dataclass
class Episode:
    """States ``s_0..s_n`` and commands ``u_0..u_{n-1}`` (body frame)."""

    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    u: np.ndarray
    yaw: np.ndarray

    def __post_init__(self):
        n = self.u.shape[0]
        for name in ("t", "p", "v", "a"):
            if getattr(self, name).shape[0] != n + 1:
                raise ValueError(f"episode {name} needs {n + 1} entries, has {getattr(self, name).shape[0]}")
        if self.yaw.shape[0] != n:
            raise ValueError("episode yaw needs one entry per command")
        if n and np.any(np.diff(self.t) <= 0):
            raise ValueError("episode time stamps must increase")
        for name in ("p", "v", "a", "u"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"episode {name} has non-finite entries")

    def __len__(self) -> int:
        return self.u.shape[0]


@dataclass
class TransitionDataset:
    episodes: list[Episode]
    source: str = "target"

    def __len__(self) -> int:
        return sum(len(e) for e in self.episodes)

    def save(self, directory, header: str = "") -> Path:
        """One CSV per episode plus ``index.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for i, ep in enumerate(self.episodes):
            name = f"episode_{i:04d}.csv"
            with open(directory / name, "w", newline="") as fh:
                if header:
                    fh.write(header)
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(DATASET_COLUMNS)
                n = len(ep)
                for k in range(n + 1):
                    u = ep.u[k] if k < n else (None, None, None)
                    yaw = ep.yaw[k] if k < n else None
                    row = [ep.t[k], *ep.p[k], *ep.v[k], *ep.a[k], *u, yaw]
                    wr.writerow(["" if x is None else format(float(x), ".17g") for x in row])
            files.append({"file": name, "steps": len(ep)})
        index = {"source": self.source, "columns": list(DATASET_COLUMNS), "episodes": files}
        (directory / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
        return directory / "index.json"

    @classmethod
    def load(cls, directory) -> "TransitionDataset":
        directory = Path(directory)
        index = json.loads((directory / "index.json").read_text())
        episodes = []
        for entry in index["episodes"]:
            with open(directory / entry["file"]) as fh:
                rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
            if tuple(rows[0]) != DATASET_COLUMNS:
                raise ValueError(f"{entry['file']}: unexpected columns {rows[0]}")
            body = rows[1:]
            num = np.array([[float(x) if x else np.nan for x in r] for r in body]).reshape(len(body), len(DATASET_COLUMNS))
            episodes.append(Episode(num[:, 0], num[:, 1:4], num[:, 4:7], num[:, 7:10], num[:-1, 10:13], num[:-1, 13]))
        return cls(episodes, index.get("source", "target"))


def collect(
    policy: Params,
    target: TargetDynamics,
    tracks: Sequence[TrackSpec],
    n_episodes: int,
    seed: int,
    run,
    horizon: int | None = None,
) -> TransitionDataset:
    """Roll the frozen policy on the target plant, one episode per track draw."""
    if n_episodes <= 0:
        return TransitionDataset([])
    rng = substream(seed, "collect")
    chosen = [tracks[i % len(tracks)] for i in range(n_episodes)]
    p0, target0 = start_states(chosen, run.train, rng, random_gate=True)
    tape = Tape(1.0)
    res = rollout(policy, chosen, run, tape, p0=p0, target0=target0, horizon=horizon or run.fit.horizon,
                  plant=target.plant(), frozen_policy=True, avf=False)
    rec = res.record
    dt = run.dynamics.dt
    eps = []
    for e in range(n_episodes):
        n = int(rec.alive[:, e].sum())
        p = np.concatenate([p0[e][None], rec.p[:n, e]])
        v = np.concatenate([np.zeros((1, 3)), rec.v[:n, e]])
        a = np.concatenate([np.zeros((1, 3)), rec.a_act[:n, e]])
        eps.append(Episode(dt * np.arange(n + 1), p, v, a, rec.cmd[:n, e].copy(), rec.yaw[:n, e].copy()))
    return TransitionDataset(eps)


def _windows(dataset: TransitionDataset, length: int):
    """Split episodes into windows of ``length`` commands (last one padded + masked)."""
    out = []
    for ep in dataset.episodes:
        n = len(ep)
        for s in range(0, n, length):
            m = min(length, n - s)
            if m < 2:
                continue
            out.append((ep, s, m))
    if not out:
        return None
    B = len(out)
    W = max(m for _, _, m in out)
    s0 = {k: np.zeros((B, 3)) for k in ("p", "v", "a")}
    u = np.zeros((W, B, 3))
    yaw = np.zeros((W, B))
    p_ref = np.zeros((W, B, 3))
    v_ref = np.zeros((W, B, 3))
    mask = np.zeros((W, B))
    for b, (ep, s, m) in enumerate(out):
        s0["p"][b], s0["v"][b], s0["a"][b] = ep.p[s], ep.v[s], ep.a[s]
        idx = np.arange(W)
        src = s + np.minimum(idx, m - 1)
        u[:, b] = ep.u[src]
        yaw[:, b] = ep.yaw[src]
        p_ref[:, b] = ep.p[src + 1]
        v_ref[:, b] = ep.v[src + 1]
        mask[:m, b] = 1.0
    return s0, u, yaw, p_ref, v_ref, mask


def _initial(tape: Tape, s0: dict, gravity: float) -> DroneState:
    thrust = s0["a"] + gravity * np.array([0.0, 0.0, 1.0])
    r3 = thrust / np.linalg.norm(thrust, axis=-1, keepdims=True)
    p = tape.tag(tape.constant(s0["p"], core=1), "position")
    return DroneState(p, tape.constant(s0["v"], core=1), tape.constant(s0["a"], core=1), tape.constant(r3, core=1))


def simulate_window(delta: Params | None, run, s0: dict, u: np.ndarray, yaw: np.ndarray, tape: Tape,
                    frozen: bool = False):
    """Nominal dynamics under ``u + delta(s_sim, u)``; returns per-step nodes."""
    dyn = run.dynamics
    nodes = None if delta is None else bind(delta, tape, frozen=frozen)
    state = _initial(tape, s0, dyn.gravity)
    h = None
    ps, vs, corrections = [], [], []
    for k in range(u.shape[0]):
        cmd = tape.constant(u[k], core=1)
        if nodes is not None:
            r3 = tape.read(state.r3)
            R = rotation_from_r3(r3, yaw[k])
            v_body = np.einsum("...ji,...j->...i", R, tape.read(state.v))
            corr, h = delta_forward(v_body, r3, u[k], h, nodes, run.delta, tape)
            corrections.append(corr)
            cmd = tape.add(cmd, corr)
        state = dyn_step(state, cmd, dyn, tape, yaw[k]).state
        ps.append(state.p)
        vs.append(state.v)
    return ps, vs, corrections


def _fit_loss(ps, vs, p_ref, v_ref, mask, w_pos, w_vel, tape):
    total = None
    W = len(ps)
    for k in range(W):
        err = tape.concat(tape.scale(tape.sub(ps[k], tape.constant(p_ref[k], core=1)), w_pos),
                          tape.scale(tape.sub(vs[k], tape.constant(v_ref[k], core=1)), w_vel))
        term = tape.mul(tape.norm(err), tape.constant(mask[k], core=0))
        total = term if total is None else tape.add(total, term)
    return tape.mean(tape.scale(total, 1.0 / W))


@dataclass
class FitResult:
    params: Params
    losses: list[float]
    corrections: np.ndarray  # (steps, windows, 3) at the final parameters
    mask: np.ndarray
    velocity_rmse: float


def fit_delta(dataset: TransitionDataset, delta: Params, run, *, epochs: int | None = None) -> FitResult:
    """Full-batch Adam (cosine-decayed step) over all windows.

    Aborts if the loss exceeds 1e3 times its starting value.
    """
    fc = run.fit
    if len(dataset) == 0:
        raise ValueError("fit_delta: dataset is empty")
    epochs = fc.epochs if epochs is None else epochs
    s0, u, yaw, p_ref, v_ref, mask = _windows(dataset, fc.window)
    opt = Adam(delta.size, fc.lr, run.train.beta1, run.train.beta2, run.train.eps)
    params = delta
    losses: list[float] = []
    for ep in range(epochs + 1):
        tape = Tape(1.0)
        ps, vs, _ = simulate_window(params, run, s0, u, yaw, tape)
        loss = _fit_loss(ps, vs, p_ref, v_ref, mask, fc.pos_weight, fc.vel_weight, tape)
        value = float(loss.value)
        if not np.isfinite(value) or (losses and value > 1e3 * max(losses[0], 1e-12)):
            raise DeltaDivergenceError(
                f"delta fit diverged at epoch {ep}: loss {value:.4g} vs initial {losses[0] if losses else value:.4g}")
        losses.append(value)
        if ep == epochs:
            break
        g = params.flatten(tape.backward(loss))
        gn = float(np.linalg.norm(g))
        if not np.isfinite(gn):
            raise DeltaDivergenceError(f"non-finite delta gradient at epoch {ep}")
        if fc.grad_clip and gn > fc.grad_clip:
            g *= fc.grad_clip / gn
        opt.lr = fc.lr * 0.5 * (1.0 + np.cos(np.pi * ep / epochs))
        params = params.copy(opt.step(params.flat, g))
    tape = Tape(1.0)
    ps, vs, corr = simulate_window(params, run, s0, u, yaw, tape, frozen=True)
    corrections = np.array([c.value for c in corr]) if corr else np.zeros((0,) + mask.shape[1:] + (3,))
    v_sim = np.array([v.value for v in vs])
    sq = np.sum((v_sim - v_ref) ** 2, axis=-1) * mask
    rmse = float(np.sqrt(sq.sum() / max(3.0 * mask.sum(), 1.0)))
    return FitResult(params, losses, corrections, mask, rmse)


def velocity_rmse(dataset: TransitionDataset, delta: Params | None, run, window: int | None = None) -> float:
    """Open-loop velocity RMSE of nominal (+delta) replays against the data."""
    s0, u, yaw, p_ref, v_ref, mask = _windows(dataset, window or run.fit.window)
    tape = Tape(1.0)
    _, vs, _ = simulate_window(delta, run, s0, u, yaw, tape, frozen=True)
    v_sim = np.array([v.value for v in vs])
    sq = np.sum((v_sim - v_ref) ** 2, axis=-1) * mask
    return float(np.sqrt(sq.sum() / max(3.0 * mask.sum(), 1.0)))


def new_delta(run, seed: int) -> Params:
    """Delta net whose output layer starts at zero (exact null correction)."""
    return init_params(int(substream(seed, "delta").integers(2**31 - 1)), delta_manifest(run.delta), kind="delta",
                       config=run.delta, out_gain=0.0)


def finetune_with_delta(policy: Params, delta: Params | None, run, target: TargetDynamics, *,
                        iterations: int | None = None, avf: bool | None = None, seed: int | None = None,
                        callback=None) -> TrainResult:
    """Continue training with the frozen delta added to every action.

    Training steps the nominal model; evaluation runs the bare policy on
    the target plant. ``delta=None`` gives plain fine-tuning.
    """
    avf = run.fit.finetune_avf if avf is None else avf
    it = run.fit.finetune_iterations if iterations is None else iterations
    ft = replace(run, train=replace(run.train, iterations=it, avf_enabled=avf))
    return train(ft, policy, seed=seed, delta=delta, eval_plant=target.plant(), callback=callback)
