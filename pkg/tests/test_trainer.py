from dataclasses import replace

import numpy as np
import pytest

from racekit.config import RunConfig
from racekit.dynamics import DynamicsConfig, initial_state, step
from racekit.policy import PolicyConfig, init_params, policy_manifest
from racekit.tape import GradientInjection, Tape, decay_factor_for
from racekit.trainer import (
    Adam,
    Plant,
    TrainConfig,
    evaluate,
    rollout,
    start_states,
    substream,
    summarize,
    train,
    update,
)

from helpers import rel_err


def small_run(hidden=(16,), **train_kw):
    run = RunConfig(seed=0)
    kw = dict(horizon=20, envs=3, iterations=3, eval_every=0)
    kw.update(train_kw)
    return replace(run, policy=PolicyConfig(arch="mlp", mlp_hidden=hidden), train=replace(run.train, **kw))


def tracks_for(run, n, seed=0):
    return [run.track.make(seed + i) for i in range(n)]


def starts(run, tracks, seed=0):
    return start_states(tracks, run.train, substream(seed, "rollout"), True)


def fd_grad(params, f, idx, h=1e-6):
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        hi, lo = params.flat.copy(), params.flat.copy()
        hi[i] += h
        lo[i] -= h
        out[j] = (f(params.copy(hi)) - f(params.copy(lo))) / (2 * h)
    return out


# ---------------------------------------------------------------------------
# gradient correctness


@pytest.mark.parametrize("progress,proj", [("lp", False), ("lp_norm", True)])
def test_rollout_gradient_matches_fd_20_steps(progress, proj):
    run = small_run(horizon=20, envs=2, alpha=0.0)
    run = replace(run, loss=replace(run.loss, progress=progress, use_projection=proj))
    tracks = tracks_for(run, 2)
    p0, t0 = starts(run, tracks)
    params = init_params(1, policy_manifest(run.policy), config=run.policy, out_gain=1.0)

    ref = Tape()
    res = rollout(params, tracks, run, ref, p0=p0, target0=t0, avf=False)
    assert res.record.p.shape[0] == 20
    g = params.flatten(ref.backward(res.loss))

    def f(p):
        return float(rollout(p, tracks, run, Tape(replay=ref), p0=p0, target0=t0, avf=False).loss.value)

    idx = np.random.default_rng(0).choice(params.size, 40, replace=False)
    assert rel_err(g[idx], fd_grad(params, f, idx)) < 1e-4


def test_injected_gradient_matches_fd_of_linear_surrogate():
    # descending L - sum_k <u_k / B, p_k> with u frozen equals the injected update
    run = small_run(horizon=12, envs=2, alpha=0.0)
    run = replace(run, field=replace(run.field, c_i=2e-2))
    tracks = tracks_for(run, 2)
    p0, t0 = starts(run, tracks)
    params = init_params(2, policy_manifest(run.policy), config=run.policy, out_gain=1.0)
    ref = Tape()
    res = rollout(params, tracks, run, ref, p0=p0, target0=t0, avf=True)
    assert res.injections and np.abs(res.record.u_a).max() > 0
    g = params.flatten(ref.backward(res.loss, res.injections))

    def f(p):
        r = rollout(p, tracks, run, Tape(replay=ref), p0=p0, target0=t0, avf=True)
        lin = sum(float(np.sum(inj.vector * inj.node.value)) for inj in r.injections)
        return float(r.loss.value) - lin

    idx = np.random.default_rng(1).choice(params.size, 30, replace=False)
    assert rel_err(g[idx], fd_grad(params, f, idx)) < 1e-4


def test_pure_geometric_prior_update():
    run = small_run(hidden=(), horizon=4, envs=1, alpha=0.0, grad_clip=0.0, lr=1e-2)
    zero = dict(lambda_c=0.0, lambda_a=0.0, lambda_j=0.0, lambda_p=0.0)
    run = replace(run, loss=replace(run.loss, **zero), field=replace(run.field, c_i=2e-2))
    tracks = tracks_for(run, 1)
    p0, t0 = starts(run, tracks)
    params = init_params(3, policy_manifest(run.policy), config=run.policy, out_gain=1.0)
    ref = Tape()
    res = rollout(params, tracks, run, ref, p0=p0, target0=t0, avf=True)
    assert float(res.loss.value) == 0.0
    new, _ = update(res, params, Adam(params.size, 1e-2), run.train)

    def f(p):
        r = rollout(p, tracks, run, Tape(replay=ref), p0=p0, target0=t0, avf=True)
        return -sum(float(np.sum(inj.vector * inj.node.value)) for inj in r.injections)

    g = fd_grad(params, f, np.arange(params.size))
    # first Adam step: -lr * g / (|g| + eps)
    expect = -1e-2 * g / (np.abs(g) + 1e-8)
    big = np.abs(g) > 1e-7  # well above the difference-quotient noise
    assert big.sum() > 10
    assert np.allclose((new.flat - params.flat)[big], expect[big], rtol=1e-3)


# ---------------------------------------------------------------------------
# update semantics


def oracle_adam(x, g, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    return x - lr * mhat / (np.sqrt(vhat) + eps), m, v


def test_avf_disabled_update_is_plain_bptt_for_10_iterations():
    run = small_run(horizon=15, envs=2, iterations=10, avf_enabled=False, lr=1e-3)
    init = init_params(0, policy_manifest(run.policy), config=run.policy)
    got = train(run, init)

    cfg = run.train
    track_rng, start_rng = substream(run.seed, "track"), substream(run.seed, "rollout")
    x = init.flat.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for it in range(1, 11):
        seeds = track_rng.integers(0, 2**31 - 1, size=cfg.envs)
        tracks = [run.track.make(int(s)) for s in seeds]
        p0, t0 = start_states(tracks, cfg, start_rng, True)
        tape = Tape(decay_factor_for(cfg.alpha, run.dynamics.dt))
        res = rollout(init.copy(x), tracks, run, tape, p0=p0, target0=t0)
        g = init.flatten(tape.backward(res.loss))
        n = np.linalg.norm(g)
        if n > cfg.grad_clip:
            g = g * (cfg.grad_clip / n)
        x, m, v = oracle_adam(x, g, m, v, it, cfg.lr)
    assert got.params.flat.tobytes() == x.tobytes()


def test_avf_changes_the_update():
    base = small_run(horizon=15, envs=2, iterations=2)
    base = replace(base, field=replace(base.field, c_i=2e-2))
    init = init_params(0, policy_manifest(base.policy), config=base.policy)
    on = train(base, init).params.flat
    off = train(replace(base, train=replace(base.train, avf_enabled=False)), init).params.flat
    assert not np.array_equal(on, off)


def test_injection_isolation_on_velocity_path():
    cfg = DynamicsConfig()
    u = np.array([0.3, -0.2, 0.1])

    def build(inject):
        t = Tape()
        s = initial_state(t, np.zeros(3))
        cmd = t.input(np.array([1.0, 2.0, 0.5]), core=1, name="u")
        injs = []
        for _ in range(4):
            s = step(s, cmd, cfg, t).state
            injs.append(GradientInjection(s.p, u))
        loss = t.sqnorm(s.v)  # no position dependence
        t.backward(loss, injs if inject else ())
        return t, s, injs

    t0, s0, i0 = build(False)
    t1, s1, i1 = build(True)
    assert np.array_equal(t0.grad_of(s0.v), t1.grad_of(s1.v))
    assert np.array_equal(t0.grad_of(s0.r3), t1.grad_of(s1.r3))
    # p_k carries into every later position with identity Jacobian, so its
    # adjoint collects the injections of steps k..3
    for k, (a, b) in enumerate(zip(i0, i1)):
        assert np.allclose(t1.grad_of(b.node), t0.grad_of(a.node) - (4 - k) * u, rtol=0, atol=1e-14)


def test_update_skips_non_finite_gradient():
    run = small_run(horizon=3, envs=1)
    tracks = tracks_for(run, 1)
    p0, t0 = starts(run, tracks)
    params = init_params(0, policy_manifest(run.policy), config=run.policy)
    res = rollout(params, tracks, run, Tape(), p0=p0, target0=t0, avf=True)
    res.injections[0] = GradientInjection(res.injections[0].node, np.full((1, 3), np.nan))
    new, stats = update(res, params, Adam(params.size, 1e-3), run.train)
    assert stats["skipped"] and np.array_equal(new.flat, params.flat)


def test_grad_clip_bounds_step_input():
    run = small_run(horizon=10, envs=2, grad_clip=1e-6)
    tracks = tracks_for(run, 2)
    p0, t0 = starts(run, tracks)
    params = init_params(0, policy_manifest(run.policy), config=run.policy, out_gain=1.0)
    res = rollout(params, tracks, run, Tape(), p0=p0, target0=t0)
    opt = Adam(params.size, 1.0)
    _, stats = update(res, params, opt, run.train)
    assert stats["grad_norm"] > 1e-6
    assert np.linalg.norm(opt.m) <= (1 - 0.9) * 1e-6 * (1 + 1e-12)


def test_adam_first_step_is_sign_scaled():
    opt = Adam(3, 0.1)
    x = opt.step(np.zeros(3), np.array([2.0, -0.5, 0.0]))
    assert np.allclose(x, [-0.1, 0.1, 0.0], rtol=1e-7)


# ---------------------------------------------------------------------------
# rollout records and masking


def test_crashed_env_is_masked():
    run = small_run(horizon=30, envs=2)
    tracks = tracks_for(run, 2)
    p0 = np.array([[0.0, 0.0, -0.5], [0.0, 0.0, 2.0]])  # env 0 starts below the floor
    params = init_params(0, policy_manifest(run.policy), config=run.policy)
    res = rollout(params, tracks, run, Tape(), p0=p0, target0=np.zeros(2, int), avf=True)
    rec = res.record
    assert rec.collided[0, 0] and not rec.alive[1:, 0].any()
    assert np.all(rec.u_a[1:, 0] == 0)
    for k, v in rec.losses.items():
        assert np.all(v[1:, 0] == 0), k
    assert rec.alive[:, 1].all()
    out = rec.results()
    assert out[0].collided and not out[0].success and out[0].steps == 1


def test_dead_env_loss_scales_with_horizon_only():
    run = small_run(envs=1)
    tr = tracks_for(run, 1)
    p0 = np.array([[0.0, 0.0, -0.5]])
    params = init_params(0, policy_manifest(run.policy), config=run.policy)
    vals = []
    for T in (5, 40):
        res = rollout(params, tr, run, Tape(), p0=p0, target0=np.zeros(1, int), horizon=T)
        assert res.record.p.shape[0] == 1
        vals.append(T * float(res.loss.value))
    assert np.isclose(vals[0], vals[1], rtol=1e-13)


def test_single_step_record():
    run = small_run(envs=2)
    tracks = tracks_for(run, 2)
    p0, t0 = starts(run, tracks)
    params = init_params(0, policy_manifest(run.policy), config=run.policy)
    res = rollout(params, tracks, run, Tape(), p0=p0, target0=t0, horizon=1)
    rec = res.record
    assert rec.p.shape == (1, 2, 3) and rec.t.tolist() == [run.dynamics.dt]
    assert "jerk" not in res.terms
    trace = rec.env_trace(1)
    assert trace["p"].shape == (1, 3)


def test_zero_policy_hovers_and_is_safe():
    run = small_run(horizon=40)
    params = init_params(0, policy_manifest(run.policy), config=run.policy)
    params.flat[:] = 0.0
    tracks = tracks_for(run, 3)
    results, rec = evaluate(params, run, tracks, seed=0, horizon=40)
    assert np.allclose(rec.p, rec.p0[None], atol=1e-12)
    s = summarize(results)
    assert s["success_rate"] == 1.0 and s["success_cross"] == 0.0 and s["v_max"] < 1e-9


def test_gate_pass_advances_target():
    run = small_run(envs=1)
    tr = tracks_for(run, 1)
    g = tr[0].gates[0]
    params = init_params(0, policy_manifest(run.policy), config=run.policy)
    params.flat[:] = 0.0
    params["out.b"][:] = [0.5, 0.0, 0.0]  # constant forward push, body x faces the gate
    p0 = (g.c - 1.0 * g.n)[None]
    res = rollout(params, tr, run, Tape(), p0=p0, target0=np.zeros(1, int), horizon=60)
    rec = res.record
    k = int(np.flatnonzero(rec.passed[:, 0])[0])
    assert rec.target[k, 0] == 1 and rec.target[k - 1, 0] == 0
    assert rec.results()[0].gates_passed >= 1


# ---------------------------------------------------------------------------
# training loop


def test_zero_iterations_returns_initial_checkpoint():
    run = small_run(iterations=0)
    init = init_params(0, policy_manifest(run.policy), config=run.policy)
    out = train(run, init)
    assert out.metrics == []
    assert len(out.checkpoints) == 1 and out.checkpoints[0][0] == 0
    assert np.array_equal(out.checkpoints[0][1].flat, init.flat)
    assert np.array_equal(out.params.flat, init.flat)


def test_training_is_deterministic():
    run = small_run(horizon=10, envs=2, iterations=3, eval_every=2, eval_trials=2, eval_horizon=20)
    init = init_params(0, policy_manifest(run.policy), config=run.policy)
    a, b = train(run, init), train(run, init)
    assert a.params.flat.tobytes() == b.params.flat.tobytes()
    assert a.metrics == b.metrics
    assert [r["success_rate"] is not None for r in a.metrics] == [False, True, True]
    assert [c[0] for c in a.checkpoints] == [0, 2, 3]


def test_substreams_independent_and_reproducible():
    a = substream(0, "track").random(4)
    assert np.array_equal(a, substream(0, "track").random(4))
    assert not np.array_equal(a, substream(0, "eval").random(4))
    assert not np.array_equal(a, substream(1, "track").random(4))


def test_start_states_before_gate():
    run = small_run()
    tracks = tracks_for(run, 20)
    p0, t0 = start_states(tracks, replace(run.train, start_jitter=0.0), np.random.default_rng(0), True)
    for tr, p, i in zip(tracks, p0, t0):
        g = tr.gates[i]
        assert g.to_local(p)[0] < 0
    p0, t0 = start_states(tracks, replace(run.train, start_jitter=0.0), np.random.default_rng(0), False)
    assert np.allclose(p0, tracks[0].start) and not t0.any()


def test_plant_bias_shifts_acceleration():
    run = small_run(envs=1)
    tr = tracks_for(run, 1)
    params = init_params(0, policy_manifest(run.policy), config=run.policy)
    params.flat[:] = 0.0
    plant = Plant(run.dynamics, np.array([0.5, 0.0, 0.0]))
    assert not plant.nominal and Plant(run.dynamics).nominal
    res = rollout(params, tr, run, Tape(), p0=np.array([[2.0, 0.0, 2.0]]), target0=np.zeros(1, int), horizon=30,
                  plant=plant, frozen_policy=True, avf=False)
    # the executed command is u - bias; heading toward gate 0 along +x
    assert res.record.v[-1, 0, 0] < 0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(horizon=1)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
