"""Command-line entry point: ``racekit train|eval|fit-delta|field-dump``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 input/output error. Every CSV starts with ``# config_sha256: ...``.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as C
from .delta import (
    DeltaDivergenceError,
    TargetDynamics,
    collect,
    fit_delta,
    new_delta,
    simulate_window,
    velocity_rmse,
)
from .dynamics import NonFiniteStateError
from .field import GRID_HEADER, dump_grid
from .policy import (
    CheckpointError,
    delta_manifest,
    init_params,
    load_checkpoint,
    policy_manifest,
    save_checkpoint,
)
from .tape import Tape, TapeError
from .trainer import METRICS_COLUMNS, evaluate, eval_tracks, summarize, substream, train
from .world import TrackSpec

log = logging.getLogger("racekit")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

TRIAL_COLUMNS = ("t", "px", "py", "pz", "vx", "vy", "vz", "ax", "ay", "az", "gate_idx", "collided", "reward")
REPORT_COLUMNS = ("trial", "seed", "gates_passed", "collided", "success_cross", "success", "v_max", "steps", "reward")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def header_lines(cfg: C.RunConfig, **extra) -> str:
    lines = [f"# config_sha256: {C.config_hash(cfg)}"]
    for k, v in extra.items():
        lines.append(f"# {k}: {v}")
    return "\n".join(lines) + "\n"


def write_table(path, columns: Sequence[str], rows, header: str = "") -> Path:
    path = Path(path)
    buf = io.StringIO()
    buf.write(header)
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    for r in rows:
        if isinstance(r, dict):
            r = [r.get(c) for c in columns]
        wr.writerow([_fmt(x) for x in r])
    path.write_text(buf.getvalue())
    return path


def read_table(path) -> tuple[list[str], list[list[str]], list[str]]:
    """Return ``(columns, rows, comments)`` of a file written by :func:`write_table`."""
    text = Path(path).read_text().splitlines()
    comments = [l for l in text if l.startswith("#")]
    body = [l for l in text if not l.startswith("#")]
    rows = list(csv.reader(body))
    if not rows:
        raise ValueError(f"{path}: no header row")
    return rows[0], rows[1:], comments


# ---------------------------------------------------------------------------
# config helpers


def _load_config(path, overrides) -> C.RunConfig:
    cfg = C.load(path) if path else C.RunConfig()
    if overrides:
        cfg = C.apply_overrides(cfg, overrides)
    return cfg


def _out_dir(cfg: C.RunConfig, out: str | None, name: str) -> Path:
    d = Path(out) if out else Path(cfg.io.out_dir) / name
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {d}: {exc}", EXIT_IO) from None
    return d


def _load_params(path, manifest, what: str):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} checkpoint not found: {p}", EXIT_IO)
    try:
        return load_checkpoint(p, manifest)
    except CheckpointError as exc:
        raise CliError(f"{what} checkpoint rejected: {exc}", EXIT_IO) from None


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.set)
    cfg = C.apply_ablation(cfg, args.ablation)
    out = _out_dir(cfg, args.out, f"train-{args.ablation}")
    (out / "config.toml").write_text(C.dumps(cfg))
    manifest = policy_manifest(cfg.policy)
    if args.init:
        params, _ = _load_params(args.init, manifest, "initial policy")
    else:
        seed = int(substream(cfg.seed, "init").integers(2**31 - 1))
        params = init_params(seed, manifest, config=cfg.policy)
    delta = eval_plant = None
    if args.delta:
        # fine-tuning stage: nominal model plus frozen delta, judged on the target plant
        delta, _ = _load_params(args.delta, delta_manifest(cfg.delta), "delta")
        eval_plant = TargetDynamics.from_config(cfg.dynamics, cfg.target).plant()
    res = train(cfg, params, delta=delta, eval_plant=eval_plant)
    hdr = header_lines(cfg, ablation=args.ablation)
    for it, p in res.checkpoints:
        save_checkpoint(out / f"policy_{it:06d}.ckpt", p, {"iter": it, "config_sha256": C.config_hash(cfg)})
    save_checkpoint(out / "policy_final.ckpt", res.params, {"iter": cfg.train.iterations,
                                                           "config_sha256": C.config_hash(cfg)})
    write_table(out / "metrics.csv", METRICS_COLUMNS, res.metrics, hdr)
    if cfg.io.figures and res.metrics:
        from . import plotting
        plotting.training_curves(res.metrics, out / "metrics.png")
    last = next((r for r in reversed(res.metrics) if r["success_rate"] is not None), None)
    print(f"train [{args.ablation}] iterations={cfg.train.iterations} out={out}")
    if last is not None:
        print(f"final eval: success_rate={last['success_rate']:.2f} success_cross={last['success_cross']:.2f} "
              f"v_max={last['v_max']:.2f}")
    return EXIT_OK


def _eval_report(results, seeds) -> list[dict]:
    rows = []
    for i, (r, s) in enumerate(zip(results, seeds)):
        rows.append({"trial": i, "seed": s, "gates_passed": r.gates_passed, "collided": r.collided,
                     "success_cross": r.success_cross, "success": r.success, "v_max": r.v_max,
                     "steps": r.steps, "reward": r.reward})
    return rows


def cmd_eval(args) -> int:
    cfg = _load_config(args.config, args.set)
    params, _ = _load_params(args.checkpoint, policy_manifest(cfg.policy), "policy")
    out = _out_dir(cfg, args.out, f"eval-{args.target}")
    tracks = eval_tracks(cfg, args.trials, cfg.seed)
    plant = None
    if args.target == "perturbed":
        plant = TargetDynamics.from_config(cfg.dynamics, cfg.target).plant()
    delta = None
    if args.delta:
        delta, _ = _load_params(args.delta, delta_manifest(cfg.delta), "delta")
    results, _ = evaluate(params, cfg, tracks, seed=cfg.seed, plant=plant, delta=delta)
    summ = summarize(results)
    hdr = header_lines(cfg, target=args.target, trials=args.trials)
    write_table(out / "report.csv", REPORT_COLUMNS, _eval_report(results, [t.seed for t in tracks]), hdr)
    for i, r in enumerate(results):
        tr = r.trajectory
        loss_cols = sorted(k for k in tr if k.startswith("loss_"))
        rows = [[tr["t"][k], *tr["p"][k], *tr["v"][k], *tr["a"][k], tr["gate_idx"][k], tr["collided"][k],
                 tr["reward"][k], *(tr[c][k] for c in loss_cols)] for k in range(len(tr["t"]))]
        write_table(out / f"trial_{i:03d}.csv", TRIAL_COLUMNS + tuple(loss_cols), rows, hdr)
    if cfg.io.figures and results:
        from . import plotting
        plotting.trajectories_top(tracks[0], [r.trajectory["p"] for r in results], out / "trajectories.png",
                                  f"{args.target} plant, {args.trials} trials")
    n = len(results)
    sc = sum(r.success_cross for r in results)
    sr = sum(r.success for r in results)
    print(f"trials: {n} target: {args.target}")
    print(f"success_cross: {sc}/{n} ({summ['success_cross']:.2f})")
    print(f"success_rate: {sr}/{n} ({summ['success_rate']:.2f})")
    print(f"v_max: {summ['v_max']:.3f} m/s")
    print(f"gates_per_episode: {summ['gates_per_episode']:.2f}")
    print(f"mean_reward: {summ['mean_reward']:.3f}")
    return EXIT_OK


def cmd_fit_delta(args) -> int:
    cfg = _load_config(args.config, args.set)
    policy, _ = _load_params(args.policy, policy_manifest(cfg.policy), "policy")
    out = _out_dir(cfg, args.out, "fit-delta")
    target = TargetDynamics.from_config(cfg.dynamics, cfg.target)
    rng = substream(cfg.seed, "track", 7)
    tracks = [cfg.track.make(int(s)) for s in rng.integers(0, 2**31 - 1, size=max(cfg.fit.episodes, 1))]
    data = collect(policy, target, tracks, cfg.fit.episodes, cfg.seed, cfg)
    if len(data) == 0:
        raise CliError("collected dataset is empty (fit.episodes must be > 0)", EXIT_CONFIG)
    hdr = header_lines(cfg)
    data.save(out / "dataset", hdr)
    delta0 = new_delta(cfg, cfg.seed)
    rmse_before = velocity_rmse(data, None, cfg)
    fit = fit_delta(data, delta0, cfg)
    save_checkpoint(out / "delta.ckpt", fit.params, {"config_sha256": C.config_hash(cfg)})
    write_table(out / "fit_loss.csv", ("epoch", "loss"), list(enumerate(fit.losses)), hdr)
    m = fit.mask.astype(bool)
    corr = fit.corrections[m]
    mean_corr = corr.mean(axis=0) if corr.size else np.zeros(3)
    bias = target.action_bias
    print(f"episodes: {len(data.episodes)} transitions: {len(data)}")
    print(f"fit loss: {fit.losses[0]:.6g} -> {fit.losses[-1]:.6g}")
    print(f"mean correction: ({mean_corr[0]:.4f}, {mean_corr[1]:.4f}, {mean_corr[2]:.4f}) m/s^2")
    if target.is_null:
        flag = "corrections ~ 0" if np.linalg.norm(mean_corr) < 0.05 else "corrections NOT ~ 0"
        print(f"null mismatch, {flag}")
    elif np.any(bias):
        err = np.linalg.norm(mean_corr + bias) / np.linalg.norm(bias)
        print(f"recovered bias: ({-mean_corr[0]:.4f}, {-mean_corr[1]:.4f}, {-mean_corr[2]:.4f}) "
              f"error {100 * err:.2f}%")
    print(f"velocity RMSE: nominal {rmse_before:.4f} m/s, with delta {fit.velocity_rmse:.4f} m/s")
    if cfg.io.figures:
        from . import plotting
        from .delta import _windows
        s0, u, yaw, _, v_ref, mask = _windows(data, cfg.fit.window)
        _, vn, _ = simulate_window(None, cfg, s0, u, yaw, Tape(1.0))
        _, vd, _ = simulate_window(fit.params, cfg, s0, u, yaw, Tape(1.0), frozen=True)
        n = int(mask[:, 0].sum())
        t = cfg.dynamics.dt * np.arange(1, n + 1)
        plotting.delta_fit(fit.losses, t, v_ref[:n, 0], np.array([v.value[0] for v in vn[:n]]),
                           np.array([v.value[0] for v in vd[:n]]), out / "fit.png")
    return EXIT_OK


def _parse_bounds(text: str):
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        raise CliError(f"--bounds expects 6 comma-separated numbers, got {text!r}", EXIT_CONFIG) from None
    if len(vals) != 6:
        raise CliError(f"--bounds expects 6 comma-separated numbers, got {len(vals)}", EXIT_CONFIG)
    b = ((vals[0], vals[1]), (vals[2], vals[3]), (vals[4], vals[5]))
    if any(hi <= lo for lo, hi in b):
        raise CliError("--bounds: every upper bound must exceed its lower bound", EXIT_CONFIG)
    return b


def read_grid(path) -> np.ndarray:
    cols, rows, _ = read_table(path)
    if ",".join(cols) != GRID_HEADER:
        raise ValueError(f"{path}: columns {cols} do not match {GRID_HEADER}")
    arr = np.array([[float(x) for x in r] for r in rows]).reshape(len(rows), 9)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: non-finite values")
    return arr


def cmd_field_dump(args) -> int:
    if args.lint:
        try:
            grid = read_grid(args.lint)
        except (OSError, ValueError) as exc:
            raise CliError(f"lint failed: {exc}", EXIT_IO) from None
        print(f"{args.lint}: {len(grid)} rows ok")
        return EXIT_OK
    cfg = _load_config(args.config, args.set)
    track: TrackSpec = cfg.track.make(cfg.seed)
    bounds = _parse_bounds(args.bounds) if args.bounds else track.bounds
    res = args.res
    try:
        grid = dump_grid(track.gates, cfg.field, bounds, res)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    out = Path(args.out) if args.out else _out_dir(cfg, None, "field") / "field.csv"
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_table(out, GRID_HEADER.split(","), grid, header_lines(cfg, bounds=bounds, res=res))
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc}", EXIT_IO) from None
    if cfg.io.figures:
        from . import plotting
        plotting.field_top(grid, out.with_suffix(".png"), track.gates[0].center[2], track)
    print(f"{out}: {len(grid)} rows")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="racekit", description="Differentiable drone-racing training toolkit.")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", "-c", required=config_required, help="TOML run configuration")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("--out", help="output directory (default: io.out_dir/<command>)")

    p = sub.add_parser("train", help="train a policy")
    common(p)
    p.add_argument("--ablation", choices=C.ABLATIONS, default="avf")
    p.add_argument("--init", help="start from this policy checkpoint")
    p.add_argument("--delta", help="frozen delta checkpoint added to every action; evaluation uses the target plant")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a policy checkpoint")
    p.add_argument("checkpoint")
    common(p)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--target", choices=("nominal", "perturbed"), default="nominal")
    p.add_argument("--delta", help="delta checkpoint added to the policy output (nominal plus delta mimics the target)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fit-delta", help="collect target-plant data and fit the delta model")
    common(p)
    p.add_argument("--policy", required=True, help="policy checkpoint used for data collection")
    p.set_defaults(func=cmd_fit_delta)

    p = sub.add_parser("field-dump", help="sample the gate field on a grid")
    common(p)
    p.add_argument("--bounds", help="x0,x1,y0,y1,z0,z1 (default: arena bounds)")
    p.add_argument("--res", type=int, default=10)
    p.add_argument("--lint", metavar="CSV", help="validate an existing dump instead of writing one")
    p.set_defaults(func=cmd_field_dump)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "trials", 1) is not None and getattr(args, "trials", 1) < 1:
            raise CliError("--trials must be >= 1", EXIT_CONFIG)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteStateError, DeltaDivergenceError, FloatingPointError, TapeError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # infeasible track or invalid parameter combination
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
