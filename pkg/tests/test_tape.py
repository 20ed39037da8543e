import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from racekit.tape import GradientInjection, Tape, TapeError, decay_factor_for

from helpers import central_diff, rel_err


def scalar_of(build, x, core=1):
    t = Tape()
    xn = t.input(x, core=core, name="x")
    return t, xn, build(t, xn)


def tape_grad(build, x, core=1):
    t, xn, out = scalar_of(build, x, core)
    return t.backward(out)["x"]


def fd_grad(build, x, core=1):
    def f(z):
        return float(scalar_of(build, z, core)[2].value)

    return central_diff(f, x)


UNARY_CASES = {
    "norm": lambda t, x: t.norm(x),
    "normalize": lambda t, x: t.dot(t.normalize(x), t.constant([0.3, -1.2, 0.7])),
    "softplus": lambda t, x: t.sum(t.softplus(x)),
    "exp": lambda t, x: t.sum(t.exp(x)),
    "log": lambda t, x: t.sum(t.log(t.shift(t.square(x), 1.0))),
    "sigmoid": lambda t, x: t.sum(t.sigmoid(x)),
    "tanh": lambda t, x: t.sum(t.tanh(x)),
    "leaky": lambda t, x: t.sum(t.leaky_relu(x, 0.05)),
    "relu": lambda t, x: t.sum(t.square(t.relu(x))),
    "div": lambda t, x: t.dot(t.div(x, t.norm(x)), t.constant([1.0, 2.0, 3.0])),
    "mul": lambda t, x: t.sum(t.mul(x, x)),
    "concat": lambda t, x: t.sqnorm(t.concat(x, t.scale(x, 2.0))),
    "slice": lambda t, x: t.sqnorm(t.slice(x, 1, 3)),
    "component": lambda t, x: t.square(t.component(x, 2)),
    "matvec": lambda t, x: t.sqnorm(t.matvec(t.constant(np.arange(9.0).reshape(3, 3), core=2), x)),
}


@pytest.mark.parametrize("name", sorted(UNARY_CASES))
def test_primitive_gradients_match_finite_differences(name):
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.normal(size=3) + 0.1
        build = UNARY_CASES[name]
        assert rel_err(tape_grad(build, x), fd_grad(build, x)) < 1e-4


def test_add_identity():
    t = Tape()
    assert float(t.record("add", 2.0, 3.0).value) == 5.0


def test_norm_value_and_adjoint():
    t = Tape()
    v = t.input([3.0, 4.0, 0.0], name="v")
    n = t.norm(v)
    assert float(n.value) == 5.0
    g = t.backward(t.scale(n, 2.0))["v"]
    np.testing.assert_allclose(g, 2.0 * np.array([0.6, 0.8, 0.0]), atol=1e-15)


def test_detach_blocks_gradient():
    t = Tape()
    x = t.input([1.0, 2.0, 3.0], name="x")
    d = t.detach(x)
    np.testing.assert_array_equal(d.value, x.value)
    loss = t.add(t.sqnorm(d), t.sum(x))
    g = t.backward(loss)["x"]
    np.testing.assert_array_equal(g, np.ones(3))


def test_shape_mismatch_names_op_and_shapes():
    t = Tape()
    with pytest.raises(TapeError, match=r"add.*\(3,\).*\(4,\)"):
        t.add(t.constant(np.zeros(3)), t.constant(np.zeros(4)))
    with pytest.raises(TapeError, match="dot"):
        t.dot(t.constant(np.zeros(3)), t.constant(np.zeros(2)))
    with pytest.raises(TapeError, match="matvec"):
        t.matvec(t.constant(np.zeros((2, 3)), core=2), t.constant(np.zeros(2)))


def test_foreign_node_rejected():
    a, b = Tape(), Tape()
    x = a.constant([1.0, 2.0, 3.0])
    with pytest.raises(TapeError, match="different tape"):
        b.norm(x)


def test_unreachable_nodes_get_zero_adjoint():
    t = Tape()
    x = t.input([1.0, 2.0], name="x")
    y = t.input([3.0, 4.0], name="y")
    grads = t.backward(t.sqnorm(x))
    np.testing.assert_array_equal(grads["y"], 0.0)
    np.testing.assert_array_equal(t.grad_of(y), 0.0)


def _chain(t, s0, k):
    s = s0
    for _ in range(k):
        t.mark_step()
        s = t.scale(t.carry(s), 1.5)
    return t.sum(s)


def test_decay_one_is_identical_to_unmarked():
    x = np.array([0.3, -0.2, 1.1])
    t1 = Tape(decay_factor=1.0)
    g1 = t1.backward(_chain(t1, t1.input(x, name="x"), 4))["x"]
    t2 = Tape()
    s = t2.input(x, name="x")
    for _ in range(4):
        s = t2.scale(s, 1.5)
    g2 = t2.backward(t2.sum(s))["x"]
    np.testing.assert_array_equal(g1, g2)


def test_two_step_decay():
    x = np.array([0.3, -0.2, 1.1])
    plain = Tape(1.0)
    g_plain = plain.backward(_chain(plain, plain.input(x, name="x"), 1))["x"]
    t = Tape(0.9)
    g = t.backward(_chain(t, t.input(x, name="x"), 1))["x"]
    np.testing.assert_allclose(g, 0.9 * g_plain, rtol=1e-15)


@pytest.mark.parametrize("k", [1, 2, 5, 10])
def test_geometric_decay_over_k_steps(k):
    x = np.array([1.0, 2.0, 3.0])
    t = Tape(0.9)
    g = t.backward(_chain(t, t.input(x, name="x"), k))["x"]
    np.testing.assert_allclose(g, (0.9 * 1.5) ** k * np.ones(3), rtol=1e-13)


def test_carry_skipping_steps_counts_every_boundary():
    t = Tape(0.5)
    x = t.input([1.0, 1.0, 1.0], name="x")
    t.mark_step()
    t.mark_step()
    t.mark_step()
    g = t.backward(t.sum(t.carry(x)))["x"]
    np.testing.assert_allclose(g, 0.125)


def test_decay_factor_default():
    assert decay_factor_for(3.0, 1 / 30) == pytest.approx(np.exp(-0.1))
    with pytest.raises(TapeError):
        Tape(decay_factor=0.0)
    with pytest.raises(TapeError):
        Tape(decay_factor=1.2)


def _one_step_graph(t, theta):
    th = t.input(theta, name="theta")
    p = t.tag(t.matvec(t.constant(np.array([[1.0, 2.0], [0.0, 1.0], [3.0, -1.0]]), core=2), th), "position")
    return th, p


def test_injection_empty_is_plain_backward():
    t = Tape()
    th, p = _one_step_graph(t, [0.4, -0.3])
    loss = t.sqnorm(p)
    g1 = t.backward(loss)["theta"]
    g2 = t.backward(loss, [])["theta"]
    np.testing.assert_array_equal(g1, g2)


def test_injection_on_position_independent_loss():
    t = Tape()
    th, p = _one_step_graph(t, [0.4, -0.3])
    loss = t.sqnorm(th)  # does not depend on p
    v = np.array([0.5, -1.0, 2.0])
    J = np.array([[1.0, 2.0], [0.0, 1.0], [3.0, -1.0]])  # dp/dtheta
    g = t.backward(loss, [GradientInjection(p, v)])["theta"]
    np.testing.assert_allclose(g, 2 * np.array([0.4, -0.3]) - v @ J, atol=1e-14)


def test_injection_combines_with_position_adjoint():
    t = Tape()
    p = t.tag(t.input([1.0, -2.0, 0.5], name="p"), "position")
    v = np.array([0.1, 0.2, 0.3])
    t.backward(t.sqnorm(p), [GradientInjection(p, v)])
    np.testing.assert_allclose(t.grad_of(p), 2 * p.value - v)


def test_injection_rejects_non_position_and_non_vec3():
    t = Tape()
    x = t.input([1.0, 2.0, 3.0], name="x")
    s = t.input(1.0, core=0, name="s")
    loss = t.add(t.sum(x), s)
    with pytest.raises(TapeError, match="position"):
        t.backward(loss, [GradientInjection(x, np.ones(3))])
    t.tag(s, "position")
    with pytest.raises(TapeError, match="vec3"):
        t.backward(loss, [GradientInjection(s, np.ones(3))])


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.floats(-3, 3), min_size=3, max_size=3),
    st.lists(st.floats(-3, 3), min_size=3, max_size=3),
)
def test_injection_linearity(v1, v2):
    v1, v2 = np.array(v1), np.array(v2)

    def run(injs):
        t = Tape(0.9)
        th = t.input([0.2, -0.7, 0.4], name="theta")
        t.mark_step()
        p = t.tag(t.tanh(th), "position")
        t.mark_step()
        q = t.tag(t.scale(t.carry(p), 2.0), "position")
        loss = t.add(t.sqnorm(q), t.sum(t.exp(th)))
        return t.backward(loss, [GradientInjection(p, v) for v in injs])["theta"]

    lhs = run([v1 + v2])
    rhs = run([v1]) + run([v2]) - run([])
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_batched_param_gradient_sums_over_batch():
    rng = np.random.default_rng(3)
    W = rng.normal(size=(4, 3))
    b = rng.normal(size=4)
    X = rng.normal(size=(5, 3))

    def loss_of(Wf):
        t = Tape()
        w = t.input(Wf, core=2, name="W")
        y = t.linear(w, t.constant(b), t.constant(X, core=1))
        return t, t.mean(t.sqnorm(t.tanh(y)))

    t, loss = loss_of(W)
    g = t.backward(loss)["W"]
    fd = central_diff(lambda Wf: float(loss_of(Wf)[1].value), W)
    assert rel_err(g, fd) < 1e-6


def test_gru_cell_against_composite_primitives_and_fd():
    rng = np.random.default_rng(7)
    H, n = 4, 3
    Wx = rng.normal(size=(3 * H, n)) * 0.5
    Wh = rng.normal(size=(3 * H, H)) * 0.5
    bx = rng.normal(size=3 * H) * 0.1
    bh = rng.normal(size=3 * H) * 0.1
    x = rng.normal(size=(2, n))
    h = rng.normal(size=(2, H))

    def fused(flat):
        t = Tape()
        wx = t.input(flat[: Wx.size].reshape(Wx.shape), core=2, name="wx")
        out = t.gru(t.constant(x), t.input(h, core=1, name="h"), wx, t.constant(Wh, core=2), t.constant(bx), t.constant(bh))
        return t, t.mean(t.sum(t.square(out)))

    def composite(flat):
        t = Tape()
        wx = t.input(flat.reshape(Wx.shape), core=2, name="wx")
        xn, hn = t.constant(x), t.input(h, core=1, name="h")
        gx = t.linear(wx, t.constant(bx), xn)
        gh = t.linear(t.constant(Wh, core=2), t.constant(bh), hn)
        r = t.sigmoid(t.add(t.slice(gx, 0, H), t.slice(gh, 0, H)))
        z = t.sigmoid(t.add(t.slice(gx, H, 2 * H), t.slice(gh, H, 2 * H)))
        nn = t.tanh(t.add(t.slice(gx, 2 * H, 3 * H), t.mul(r, t.slice(gh, 2 * H, 3 * H))))
        out = t.add(t.mul(t.shift(t.scale(z, -1.0), 1.0), nn), t.mul(z, hn))
        return t, t.mean(t.sum(t.square(out)))

    tf, lf = fused(Wx.reshape(-1))
    tc, lc = composite(Wx.reshape(-1))
    assert float(lf.value) == pytest.approx(float(lc.value), rel=1e-14)
    gf, gc = tf.backward(lf), tc.backward(lc)
    np.testing.assert_allclose(gf["wx"], gc["wx"], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(gf["h"], gc["h"], rtol=1e-12, atol=1e-14)
    fd = central_diff(lambda f: float(fused(f)[1].value), Wx.reshape(-1))
    assert rel_err(gf["wx"].reshape(-1), fd) < 1e-6


def test_conv2d_matches_direct_convolution_and_fd():
    rng = np.random.default_rng(11)
    C, Hh, Ww, Co = 2, 6, 8, 3
    x = rng.normal(size=(2, C * Hh * Ww))
    Wk = rng.normal(size=(Co, C * 9))
    b = rng.normal(size=Co)
    t = Tape()
    y = t.conv2d(t.constant(x), t.constant(Wk, core=2), t.constant(b), (C, Hh, Ww))
    # direct loop oracle
    img = x.reshape(2, C, Hh, Ww)
    pad = np.pad(img, ((0, 0), (0, 0), (1, 1), (1, 1)))
    K = Wk.reshape(Co, C, 3, 3)
    Ho, Wo = 3, 4
    ref = np.zeros((2, Co, Ho, Wo))
    for n in range(2):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    ref[n, o, i, j] = np.sum(pad[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * K[o]) + b[o]
    np.testing.assert_allclose(y.value, ref.reshape(2, -1), rtol=1e-12, atol=1e-12)

    def loss_of(xf, Wf):
        tt = Tape()
        xn = tt.input(xf, core=1, name="x")
        wn = tt.input(Wf, core=2, name="w")
        yy = tt.conv2d(xn, wn, tt.constant(b), (C, Hh, Ww))
        return tt, tt.mean(tt.sum(tt.tanh(yy)))

    tt, l = loss_of(x, Wk)
    g = tt.backward(l)
    assert rel_err(g["x"], central_diff(lambda z: float(loss_of(z, Wk)[1].value), x)) < 1e-6
    assert rel_err(g["w"], central_diff(lambda z: float(loss_of(x, z)[1].value), Wk)) < 1e-6


def test_replay_freezes_reads():
    ref = Tape()
    x = ref.input([1.0, 2.0, 3.0], name="x")
    r = ref.read(x)
    rep = Tape(replay=ref)
    x2 = rep.input([5.0, 5.0, 5.0], name="x")
    np.testing.assert_array_equal(rep.read(x2), r)
