"""Reverse-mode automatic differentiation over a rollout.

Values are float64 numpy arrays. Every node has a *core* rank (0 scalar,
1 vector, 2 matrix) and may carry extra leading axes, which are treated as
a batch of independent rollouts: parameters are stored unbatched and their
gradients are summed over the batch axes in a fixed order.

Two features beyond a plain Wengert list:

* step marks with a state-carry op whose backward rule multiplies the
  adjoint by ``decay_factor`` once per step boundary crossed;
* gradient injection, which adds an external vector to the adjoint of a
  position node before it propagates upstream.

Numeric reads of node values (observations, nearest obstacles, event flags)
go through :meth:`Tape.read`. A tape built with ``replay=`` returns the
reads of a reference tape instead, which turns any rollout into a fixed
surrogate function that can be checked against finite differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

__all__ = [
    "Tape",
    "NodeRef",
    "GradientInjection",
    "TapeError",
    "decay_factor_for",
]


class TapeError(ValueError):
    """Raised for malformed tape operations (shape mismatch, foreign nodes)."""


def decay_factor_for(alpha: float, dt: float) -> float:
    """Per-step gradient decay ``exp(-alpha * dt)``."""
    return math.exp(-alpha * dt)


class NodeRef:
    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.index]

    @property
    def core(self) -> int:
        return self.tape._cores[self.index]

    @property
    def core_shape(self) -> tuple:
        v = self.value
        return v.shape[v.ndim - self.core:] if self.core else ()

    @property
    def shape(self) -> str:
        """``'scalar'``, ``'vec3'`` or ``'vector(n)'`` (matrices: ``'matrix(m,n)'``)."""
        cs = self.core_shape
        if self.core == 0:
            return "scalar"
        if self.core == 1:
            return "vec3" if cs[0] == 3 else f"vector({cs[0]})"
        return f"matrix({cs[0]},{cs[1]})"

    def __repr__(self) -> str:
        return f"NodeRef({self.index}, {self.tape._kinds[self.index]}, {self.shape})"

    # arithmetic sugar
    def __add__(self, other):
        return self.tape.add(self, other)

    def __radd__(self, other):
        return self.tape.add(other, self)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __rmul__(self, other):
        return self.tape.mul(other, self)

    def __truediv__(self, other):
        return self.tape.div(self, other)

    def __neg__(self):
        return self.tape.record("scale", self, factor=-1.0)


@dataclass
class GradientInjection:
    """Vector added (with a minus sign) to a position node's adjoint."""

    node: NodeRef
    vector: np.ndarray


# ---------------------------------------------------------------------------
# primitive rules


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _expand_scalar(x: np.ndarray, core_x: int, core_out: int) -> np.ndarray:
    # scalar operand against a vector operand: append a trailing axis
    if core_x == 0 and core_out == 1:
        return x[..., None]
    return x


def _binary_core(kind, cores, shapes):
    ca, cb = cores
    if ca == cb:
        sa = shapes[0][len(shapes[0]) - ca:] if ca else ()
        sb = shapes[1][len(shapes[1]) - cb:] if cb else ()
        if sa != sb:
            raise TapeError(f"{kind}: core shape mismatch {sa} vs {sb}")
        return ca
    if kind in ("mul", "div") and 0 in cores and max(cores) == 1:
        if kind == "div" and cb != 0:
            raise TapeError("div: cannot divide a scalar by a vector")
        return 1
    raise TapeError(f"{kind}: incompatible operands of rank {ca} and {cb}")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.logaddexp(0.0, x)


class _Op:
    __slots__ = ("forward", "backward", "arity")

    def __init__(self, forward, backward, arity=None):
        self.forward = forward
        self.backward = backward
        self.arity = arity


_OPS: dict[str, _Op] = {}


def _op(name, arity=None):
    def deco(cls):
        _OPS[name] = _Op(cls.forward, cls.backward, arity)
        return cls

    return deco


@_op("add", 2)
class _Add:
    def forward(vals, cores, p):
        c = _binary_core("add", cores, [v.shape for v in vals])
        return vals[0] + vals[1], c

    def backward(g, vals, out, cores, p):
        return [_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)]


@_op("sub", 2)
class _Sub:
    def forward(vals, cores, p):
        c = _binary_core("sub", cores, [v.shape for v in vals])
        return vals[0] - vals[1], c

    def backward(g, vals, out, cores, p):
        return [_unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape)]


@_op("mul", 2)
class _Mul:
    def forward(vals, cores, p):
        c = _binary_core("mul", cores, [v.shape for v in vals])
        a = _expand_scalar(vals[0], cores[0], c)
        b = _expand_scalar(vals[1], cores[1], c)
        return a * b, c

    def backward(g, vals, out, cores, p):
        c = max(cores)
        a = _expand_scalar(vals[0], cores[0], c)
        b = _expand_scalar(vals[1], cores[1], c)
        ga, gb = g * b, g * a
        if cores[0] == 0 and c == 1:
            ga = ga.sum(axis=-1)
        if cores[1] == 0 and c == 1:
            gb = gb.sum(axis=-1)
        return [_unbroadcast(ga, vals[0].shape), _unbroadcast(gb, vals[1].shape)]


@_op("div", 2)
class _Div:
    def forward(vals, cores, p):
        c = _binary_core("div", cores, [v.shape for v in vals])
        b = _expand_scalar(vals[1], cores[1], c)
        return vals[0] / b, c

    def backward(g, vals, out, cores, p):
        c = max(cores)
        b = _expand_scalar(vals[1], cores[1], c)
        ga = g / b
        gb = -g * out / b
        if cores[1] == 0 and c == 1:
            gb = gb.sum(axis=-1)
        return [_unbroadcast(ga, vals[0].shape), _unbroadcast(gb, vals[1].shape)]


@_op("scale", 1)
class _Scale:
    def forward(vals, cores, p):
        return vals[0] * p["factor"], cores[0]

    def backward(g, vals, out, cores, p):
        return [g * p["factor"]]


@_op("shift", 1)
class _Shift:
    def forward(vals, cores, p):
        return vals[0] + p["offset"], cores[0]

    def backward(g, vals, out, cores, p):
        return [g]


@_op("dot", 2)
class _Dot:
    def forward(vals, cores, p):
        if cores != (1, 1):
            raise TapeError(f"dot: expects two vectors, got ranks {cores}")
        if vals[0].shape[-1] != vals[1].shape[-1]:
            raise TapeError(f"dot: length mismatch {vals[0].shape[-1]} vs {vals[1].shape[-1]}")
        return np.sum(vals[0] * vals[1], axis=-1), 0

    def backward(g, vals, out, cores, p):
        ge = g[..., None]
        return [_unbroadcast(ge * vals[1], vals[0].shape), _unbroadcast(ge * vals[0], vals[1].shape)]


@_op("sum", 1)
class _Sum:
    def forward(vals, cores, p):
        if cores[0] != 1:
            raise TapeError("sum: expects a vector")
        return vals[0].sum(axis=-1), 0

    def backward(g, vals, out, cores, p):
        return [np.broadcast_to(g[..., None], vals[0].shape).copy()]


@_op("norm", 1)
class _Norm:
    def forward(vals, cores, p):
        if cores[0] != 1:
            raise TapeError("norm: expects a vector")
        return np.sqrt(np.sum(vals[0] * vals[0], axis=-1)), 0

    def backward(g, vals, out, cores, p):
        # subgradient 0 at the origin
        safe = np.where(out > 0.0, out, 1.0)
        unit = np.where((out > 0.0)[..., None], vals[0] / safe[..., None], 0.0)
        return [g[..., None] * unit]


@_op("normalize", 1)
class _Normalize:
    def forward(vals, cores, p):
        if cores[0] != 1:
            raise TapeError("normalize: expects a vector")
        n = np.sqrt(np.sum(vals[0] * vals[0], axis=-1, keepdims=True))
        if np.any(n == 0.0):
            raise TapeError("normalize: zero-length vector")
        return vals[0] / n, 1

    def backward(g, vals, out, cores, p):
        n = np.sqrt(np.sum(vals[0] * vals[0], axis=-1, keepdims=True))
        proj = np.sum(g * out, axis=-1, keepdims=True)
        return [(g - proj * out) / n]


def _unary(name, f, df):
    def forward(vals, cores, p):
        return f(vals[0], p), cores[0]

    def backward(g, vals, out, cores, p):
        return [g * df(vals[0], out, p)]

    _OPS[name] = _Op(forward, backward, 1)


_unary("exp", lambda x, p: np.exp(x), lambda x, y, p: y)
_unary("log", lambda x, p: np.log(x), lambda x, y, p: 1.0 / x)
_unary("square", lambda x, p: x * x, lambda x, y, p: 2.0 * x)
_unary("sqrt", lambda x, p: np.sqrt(x), lambda x, y, p: 0.5 / y)
_unary("softplus", lambda x, p: _softplus(x), lambda x, y, p: _sigmoid(x))
_unary("relu", lambda x, p: np.maximum(x, 0.0), lambda x, y, p: (x > 0.0).astype(float))
_unary("sigmoid", lambda x, p: _sigmoid(x), lambda x, y, p: y * (1.0 - y))
_unary("tanh", lambda x, p: np.tanh(x), lambda x, y, p: 1.0 - y * y)
_unary(
    "leaky_relu",
    lambda x, p: np.where(x > 0.0, x, p["slope"] * x),
    lambda x, y, p: np.where(x > 0.0, 1.0, p["slope"]),
)


@_op("matvec", 2)
class _MatVec:
    def forward(vals, cores, p):
        W, x = vals
        if cores != (2, 1):
            raise TapeError(f"matvec: expects (matrix, vector), got ranks {cores}")
        if W.shape[-1] != x.shape[-1]:
            raise TapeError(f"matvec: matrix {W.shape[-2:]} vs vector length {x.shape[-1]}")
        if W.ndim == 2:
            return x @ W.T, 1
        return np.einsum("...ij,...j->...i", W, x), 1

    def backward(g, vals, out, cores, p):
        W, x = vals
        if W.ndim == 2:
            gW = g.reshape(-1, W.shape[0]).T @ x.reshape(-1, W.shape[1])
            gx = g @ W
        else:
            gW = _unbroadcast(np.einsum("...i,...j->...ij", g, x), W.shape)
            gx = np.einsum("...ij,...i->...j", W, g)
        return [gW, _unbroadcast(gx, x.shape)]


@_op("linear", 3)
class _Linear:
    """``W x + b`` with an unbatched weight matrix."""

    def forward(vals, cores, p):
        W, b, x = vals
        if cores != (2, 1, 1) or W.ndim != 2:
            raise TapeError(f"linear: expects (matrix, vector, vector), got ranks {cores}")
        if W.shape[1] != x.shape[-1] or W.shape[0] != b.shape[-1]:
            raise TapeError(f"linear: W {W.shape}, b {b.shape}, x {x.shape}")
        return x @ W.T + b, 1

    def backward(g, vals, out, cores, p):
        W, b, x = vals
        g2 = g.reshape(-1, W.shape[0])
        gW = g2.T @ x.reshape(-1, W.shape[1]) if x.ndim > 1 else np.outer(g, x)
        return [gW, _unbroadcast(g, b.shape), _unbroadcast(g @ W, x.shape)]


@_op("concat")
class _Concat:
    def forward(vals, cores, p):
        if any(c != 1 for c in cores):
            raise TapeError(f"concat: expects vectors, got ranks {cores}")
        batch = np.broadcast_shapes(*[v.shape[:-1] for v in vals])
        parts = [np.broadcast_to(v, batch + v.shape[-1:]) for v in vals]
        return np.concatenate(parts, axis=-1), 1

    def backward(g, vals, out, cores, p):
        grads, start = [], 0
        for v in vals:
            n = v.shape[-1]
            grads.append(_unbroadcast(g[..., start:start + n], v.shape))
            start += n
        return grads


@_op("slice", 1)
class _Slice:
    def forward(vals, cores, p):
        if cores[0] != 1:
            raise TapeError("slice: expects a vector")
        lo, hi = p["lo"], p["hi"]
        if not 0 <= lo < hi <= vals[0].shape[-1]:
            raise TapeError(f"slice: [{lo}:{hi}] out of range for length {vals[0].shape[-1]}")
        return vals[0][..., lo:hi], 1

    def backward(g, vals, out, cores, p):
        gx = np.zeros_like(vals[0])
        gx[..., p["lo"]:p["hi"]] = g
        return [gx]


@_op("component", 1)
class _Component:
    def forward(vals, cores, p):
        if cores[0] != 1:
            raise TapeError("component: expects a vector")
        return vals[0][..., p["i"]], 0

    def backward(g, vals, out, cores, p):
        gx = np.zeros_like(vals[0])
        gx[..., p["i"]] = g
        return [gx]


@_op("mean", 1)
class _Mean:
    """Mean of a scalar node over all of its batch axes."""

    def forward(vals, cores, p):
        if cores[0] != 0:
            raise TapeError("mean: expects a (batched) scalar")
        return np.asarray(vals[0].mean()), 0

    def backward(g, vals, out, cores, p):
        return [np.full(vals[0].shape, g / max(vals[0].size, 1))]


@_op("detach", 1)
class _Detach:
    def forward(vals, cores, p):
        return p["value"], cores[0]

    def backward(g, vals, out, cores, p):
        return [None]


@_op("carry", 1)
class _Carry:
    """State carried across step marks; adjoint decays per boundary."""

    def forward(vals, cores, p):
        return vals[0], cores[0]

    def backward(g, vals, out, cores, p):
        return [g * p["decay"]]


@_op("gru", 6)
class _GRU:
    """Fused gated recurrent cell.

    Inputs ``(x, h, W_x, W_h, b_x, b_h)`` with gate blocks ordered
    (reset, update, candidate)::

        r = sig(W_xr x + b_xr + W_hr h + b_hr)
        z = sig(W_xz x + b_xz + W_hz h + b_hz)
        n = tanh(W_xn x + b_xn + r * (W_hn h + b_hn))
        h' = (1 - z) * n + z * h
    """

    def forward(vals, cores, p):
        x, h, Wx, Wh, bx, bh = vals
        H = h.shape[-1]
        if Wx.shape != (3 * H, x.shape[-1]) or Wh.shape != (3 * H, H):
            raise TapeError(f"gru: W_x {Wx.shape}, W_h {Wh.shape}, x {x.shape}, h {h.shape}")
        gx = x @ Wx.T + bx
        gh = h @ Wh.T + bh
        r = _sigmoid(gx[..., :H] + gh[..., :H])
        z = _sigmoid(gx[..., H:2 * H] + gh[..., H:2 * H])
        n = np.tanh(gx[..., 2 * H:] + r * gh[..., 2 * H:])
        out = (1.0 - z) * n + z * h
        p["cache"] = (r, z, n, gh[..., 2 * H:])
        return out, 1

    def backward(g, vals, out, cores, p):
        x, h, Wx, Wh, bx, bh = vals
        H = h.shape[-1]
        r, z, n, hn = p["cache"]
        dn = g * (1.0 - z)
        dz = g * (h - n)
        dh = g * z
        dan = dn * (1.0 - n * n)
        dar = dan * hn * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        dgx = np.concatenate([dar, daz, dan], axis=-1)
        dgh = np.concatenate([dar, daz, dan * r], axis=-1)
        dx = dgx @ Wx
        dh = dh + dgh @ Wh
        gx2 = dgx.reshape(-1, 3 * H)
        gh2 = dgh.reshape(-1, 3 * H)
        dWx = gx2.T @ np.broadcast_to(x, dgx.shape[:-1] + x.shape[-1:]).reshape(-1, x.shape[-1])
        dWh = gh2.T @ np.broadcast_to(h, dgh.shape[:-1] + (H,)).reshape(-1, H)
        return [
            _unbroadcast(dx, x.shape),
            _unbroadcast(dh, h.shape),
            dWx,
            dWh,
            gx2.sum(axis=0),
            gh2.sum(axis=0),
        ]


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    # x: (N, C, H, W) -> (N, Ho, Wo, C*k*k)
    N, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    cols = np.empty((N, Ho, Wo, C, k, k))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride].transpose(0, 2, 3, 1)
    return cols.reshape(N, Ho, Wo, C * k * k), (N, C, H, W, Ho, Wo)


def _col2im(cols: np.ndarray, dims, k: int, stride: int, pad: int):
    N, C, H, W, Ho, Wo = dims
    cols = cols.reshape(N, Ho, Wo, C, k, k)
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad))
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return xp[:, :, pad:pad + H, pad:pad + W]


@_op("conv2d", 3)
class _Conv2d:
    """2-D convolution on a flattened image vector.

    The vector input holds ``C*H*W`` values in channel-major order; the
    output is the flattened ``C_out*H_out*W_out`` feature map.
    """

    def forward(vals, cores, p):
        x, Wk, b = vals
        C, H, W = p["in_shape"]
        k, s, pad = p["k"], p["stride"], p["pad"]
        if x.shape[-1] != C * H * W or Wk.shape[1:] != (C * k * k,):
            raise TapeError(f"conv2d: input {x.shape}, kernel {Wk.shape}, in_shape {p['in_shape']}")
        batch = x.shape[:-1]
        xi = x.reshape((-1, C, H, W))
        cols, dims = _im2col(xi, k, s, pad)
        y = cols @ Wk.T + b  # (N, Ho, Wo, Cout)
        p["cache"] = (cols, dims)
        return y.transpose(0, 3, 1, 2).reshape(batch + (-1,)), 1

    def backward(g, vals, out, cores, p):
        x, Wk, b = vals
        cols, dims = p["cache"]
        N, C, H, W, Ho, Wo = dims
        gy = g.reshape(N, Wk.shape[0], Ho, Wo).transpose(0, 2, 3, 1)
        g2 = gy.reshape(-1, Wk.shape[0])
        gW = g2.T @ cols.reshape(-1, cols.shape[-1])
        gb = g2.sum(axis=0)
        gcols = gy @ Wk
        gx = _col2im(gcols, dims, p["k"], p["stride"], p["pad"])
        return [gx.reshape(x.shape), gW, gb]


# ---------------------------------------------------------------------------


class Tape:
    """Append-only computation graph for one batch of rollouts.

    Parameters
    ----------
    decay_factor:
        Multiplier in (0, 1] applied to adjoints flowing through
        :meth:`carry` nodes, once per step boundary crossed.
    replay:
        Optional reference tape; :meth:`read` then returns the reference
        tape's reads in order instead of live values.
    """

    def __init__(self, decay_factor: float = 1.0, replay: "Tape | None" = None):
        if not (0.0 < decay_factor <= 1.0):
            raise TapeError(f"decay_factor must lie in (0, 1], got {decay_factor}")
        self.decay_factor = float(decay_factor)
        self._values: list[np.ndarray] = []
        self._cores: list[int] = []
        self._kinds: list[str] = []
        self._inputs: list[tuple[int, ...]] = []
        self._payloads: list[dict | None] = []
        self._steps: list[int] = []
        self._needs: list[bool] = []
        self._tags: dict[int, str] = {}
        self._params: dict[str, int] = {}
        self.step_marks: list[int] = []
        self._reads: list[np.ndarray] = []
        self._replay = replay
        self._adjoints: list[np.ndarray | None] | None = None

    # -- bookkeeping --------------------------------------------------------

    def __len__(self) -> int:
        return len(self._values)

    @property
    def current_step(self) -> int:
        return len(self.step_marks)

    def _check(self, node: NodeRef) -> int:
        if not isinstance(node, NodeRef):
            raise TapeError(f"expected a NodeRef, got {type(node).__name__}")
        if node.tape is not self:
            raise TapeError("node belongs to a different tape")
        return node.index

    def _push(self, value, core, kind, inputs=(), payload=None, needs=False) -> NodeRef:
        idx = len(self._values)
        self._values.append(value)
        self._cores.append(core)
        self._kinds.append(kind)
        self._inputs.append(tuple(inputs))
        self._payloads.append(payload)
        self._steps.append(self.current_step)
        self._needs.append(needs)
        return NodeRef(self, idx)

    def _as_node(self, x) -> NodeRef:
        if isinstance(x, NodeRef):
            self._check(x)
            return x
        arr = np.asarray(x, dtype=np.float64)
        return self.constant(arr, core=min(arr.ndim, 1))

    # -- leaves -------------------------------------------------------------

    def constant(self, value, core: int | None = None) -> NodeRef:
        """A leaf with no gradient. ``core`` defaults to ``min(ndim, 1)``."""
        arr = np.array(value, dtype=np.float64)
        if core is None:
            core = min(arr.ndim, 1)
        return self._push(arr, core, "const")

    def input(self, value, core: int | None = None, name: str | None = None) -> NodeRef:
        """A differentiable leaf; named leaves appear in the gradient table."""
        arr = np.array(value, dtype=np.float64)
        if core is None:
            core = min(arr.ndim, 2)
        node = self._push(arr, core, "leaf", needs=True)
        if name is not None:
            if name in self._params:
                raise TapeError(f"duplicate parameter name {name!r}")
            self._params[name] = node.index
        return node

    param = input

    def tag(self, node: NodeRef, label: str) -> NodeRef:
        self._tags[self._check(node)] = label
        return node

    def tag_of(self, node: NodeRef) -> str | None:
        return self._tags.get(self._check(node))

    # -- recording ----------------------------------------------------------

    def record(self, op_kind: str, *inputs, **payload) -> NodeRef:
        """Record primitive ``op_kind`` applied to ``inputs``.

        Non-node inputs are wrapped as constants. Raises :class:`TapeError`
        naming the op and the offending shapes on mismatch.
        """
        if op_kind not in _OPS:
            raise TapeError(f"unknown op {op_kind!r}")
        op = _OPS[op_kind]
        if op.arity is not None and len(inputs) != op.arity:
            raise TapeError(f"{op_kind}: expects {op.arity} inputs, got {len(inputs)}")
        nodes = [self._as_node(x) for x in inputs]
        idx = [n.index for n in nodes]
        vals = [self._values[i] for i in idx]
        cores = tuple(self._cores[i] for i in idx)
        try:
            out, core = op.forward(vals, cores, payload)
        except TapeError:
            raise
        except ValueError as exc:
            shapes = [v.shape for v in vals]
            raise TapeError(f"{op_kind}: {exc} (input shapes {shapes})") from exc
        needs = any(self._needs[i] for i in idx)
        return self._push(np.asarray(out, dtype=np.float64), core, op_kind, idx, payload or None, needs)

    def detach(self, node: NodeRef) -> NodeRef:
        """Same value, zero gradient. Replays the reference value when replaying."""
        value = self.read(node)
        return self._push(value, node.core, "detach", (node.index,), {"value": value}, False)

    def read(self, node: NodeRef) -> np.ndarray:
        """Numeric (gradient-free) copy of a node's value, replayable."""
        i = self._check(node)
        k = len(self._reads)
        if self._replay is not None:
            value = self._replay._reads[k].copy()
        else:
            value = self._values[i].copy()
        self._reads.append(value)
        return value.copy()

    def mark_step(self) -> int:
        """Start a new rollout step; returns its index."""
        self.step_marks.append(len(self._values))
        return self.current_step

    def carry(self, node: NodeRef) -> NodeRef:
        """Bring a state node from an earlier step into the current one.

        The backward rule multiplies by ``decay_factor ** k`` where ``k``
        is the number of step boundaries between the two.
        """
        i = self._check(node)
        crossed = self.current_step - self._steps[i]
        decay = self.decay_factor ** crossed if crossed > 0 else 1.0
        return self._push(self._values[i], self._cores[i], "carry", (i,), {"decay": decay}, self._needs[i])

    # -- convenience wrappers -----------------------------------------------

    def add(self, a, b):
        return self.record("add", a, b)

    def sub(self, a, b):
        return self.record("sub", a, b)

    def mul(self, a, b):
        return self.record("mul", a, b)

    def div(self, a, b):
        return self.record("div", a, b)

    def scale(self, a, factor: float):
        return self.record("scale", a, factor=float(factor))

    def shift(self, a, offset: float):
        return self.record("shift", a, offset=float(offset))

    def dot(self, a, b):
        return self.record("dot", a, b)

    def norm(self, a):
        return self.record("norm", a)

    def normalize(self, a):
        return self.record("normalize", a)

    def sum(self, a):
        return self.record("sum", a)

    def square(self, a):
        return self.record("square", a)

    def softplus(self, a):
        return self.record("softplus", a)

    def relu(self, a):
        return self.record("relu", a)

    def exp(self, a):
        return self.record("exp", a)

    def log(self, a):
        return self.record("log", a)

    def sigmoid(self, a):
        return self.record("sigmoid", a)

    def tanh(self, a):
        return self.record("tanh", a)

    def leaky_relu(self, a, slope: float):
        return self.record("leaky_relu", a, slope=float(slope))

    def matvec(self, W, x):
        return self.record("matvec", W, x)

    def linear(self, W, b, x):
        return self.record("linear", W, b, x)

    def concat(self, *xs):
        return self.record("concat", *xs)

    def slice(self, x, lo: int, hi: int):
        return self.record("slice", x, lo=lo, hi=hi)

    def component(self, x, i: int):
        return self.record("component", x, i=i)

    def mean(self, x):
        return self.record("mean", x)

    def sqnorm(self, x):
        return self.record("dot", x, x)

    def gru(self, x, h, Wx, Wh, bx, bh):
        return self.record("gru", x, h, Wx, Wh, bx, bh)

    def conv2d(self, x, Wk, b, in_shape, k=3, stride=2, pad=1):
        return self.record("conv2d", x, Wk, b, in_shape=tuple(in_shape), k=k, stride=stride, pad=pad)

    # -- backward -----------------------------------------------------------

    def backward(
        self,
        loss: NodeRef,
        injections: Iterable[GradientInjection] = (),
    ) -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar loss.

        Each injection subtracts its vector from the target node's adjoint,
        so the position gradient that flows upstream is ``dL/dp - u``.
        Returns the adjoints of all named leaves (zero when unreachable).
        """
        li = self._check(loss)
        if self._cores[li] != 0 or self._values[li].shape != ():
            raise TapeError(f"backward: loss must be an unbatched scalar, got shape {self._values[li].shape}")
        n = len(self._values)
        adj: list[np.ndarray | None] = [None] * n
        adj[li] = np.ones(())
        for inj in injections:
            j = self._check(inj.node)
            if self._cores[j] != 1 or self._values[j].shape[-1] != 3:
                raise TapeError(f"backward: injection target {inj.node!r} is not a vec3 node")
            if self._tags.get(j) != "position":
                raise TapeError(f"backward: injection target {inj.node!r} is not a position node")
            vec = np.asarray(inj.vector, dtype=np.float64)
            vec = np.broadcast_to(vec, self._values[j].shape)
            adj[j] = -vec if adj[j] is None else adj[j] - vec
        values, inputs, kinds, payloads, cores, needs = (
            self._values, self._inputs, self._kinds, self._payloads, self._cores, self._needs,
        )
        for i in range(n - 1, -1, -1):
            g = adj[i]
            if g is None or not inputs[i] or not needs[i]:
                continue
            ins = inputs[i]
            vals = [values[k] for k in ins]
            grads = _OPS[kinds[i]].backward(g, vals, values[i], tuple(cores[k] for k in ins), payloads[i] or {})
            for k, gk in zip(ins, grads):
                if gk is None or not needs[k]:
                    continue
                adj[k] = gk if adj[k] is None else adj[k] + gk
        self._adjoints = adj
        return {name: self.grad_of(NodeRef(self, i)) for name, i in self._params.items()}

    def grad_of(self, node: NodeRef) -> np.ndarray:
        """Adjoint of ``node`` from the last backward (zeros if unreachable)."""
        i = self._check(node)
        if self._adjoints is None:
            raise TapeError("grad_of: backward has not been run")
        g = self._adjoints[i]
        return np.zeros_like(self._values[i]) if g is None else np.array(g, dtype=np.float64)

    @property
    def param_names(self) -> list[str]:
        return list(self._params)
