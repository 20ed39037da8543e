"""Policy and delta-action networks recorded on the tape.

Parameters live in one flat float64 array described by a manifest of named
layers. Forward passes bind each layer as a named tape leaf (or a constant
when frozen), so the gradient table comes back keyed by layer name.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dynamics import smooth_clamp
from .tape import NodeRef, Tape, TapeError

__all__ = [
    "LayerSpec",
    "Params",
    "PolicyConfig",
    "DeltaConfig",
    "policy_manifest",
    "delta_manifest",
    "init_params",
    "bind",
    "policy_forward",
    "delta_forward",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"RACEKIT-CHECKPOINT 1\n"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class PolicyConfig:
    # "cnn_gru" is the full depth+state recurrent net; "mlp" is state-only
    arch: str = "cnn_gru"
    embed: int = 192
    head_hidden: int = 64
    conv_channels: tuple = (8, 16)
    mlp_hidden: tuple = (64,)
    slope: float = 0.05
    v_scale: float = 0.2
    gate_scale: float = 0.2
    cmd_scale: float = 0.1
    out_scale: float = 4.0
    a_max: float = 12.0
    clamp_sharpness: float = 2.0

    def __post_init__(self):
        if self.arch not in ("cnn_gru", "mlp"):
            raise ValueError(f"unknown policy arch {self.arch!r}")
        self.conv_channels = tuple(self.conv_channels)
        self.mlp_hidden = tuple(self.mlp_hidden)


@dataclass
class DeltaConfig:
    hidden: int = 32
    slope: float = 0.05
    v_scale: float = 0.2
    cmd_scale: float = 0.1
    out_scale: float = 1.0


class Params:
    """Flat parameter vector with a named-layer manifest."""

    def __init__(self, manifest: list[LayerSpec], flat: np.ndarray | None = None, kind: str = "policy",
                 config: dict | None = None):
        self.manifest = list(manifest)
        size = sum(l.size for l in self.manifest)
        off = 0
        for l in self.manifest:
            if l.offset != off:
                raise ValueError(f"manifest offsets do not partition the array at layer {l.name}")
            off += l.size
        self.flat = np.zeros(size) if flat is None else np.array(flat, dtype=np.float64)
        if self.flat.shape != (size,):
            raise ValueError(f"parameter payload has {self.flat.size} values, manifest needs {size}")
        self.kind = kind
        self.config = dict(config or {})

    @property
    def size(self) -> int:
        return self.flat.size

    def __getitem__(self, name: str) -> np.ndarray:
        for l in self.manifest:
            if l.name == name:
                return self.flat[l.offset:l.offset + l.size].reshape(l.shape)
        raise KeyError(name)

    def names(self) -> list[str]:
        return [l.name for l in self.manifest]

    def flatten(self, table: dict[str, np.ndarray]) -> np.ndarray:
        """Pack a name-keyed gradient table in manifest order (missing = 0)."""
        out = np.zeros(self.size)
        for l in self.manifest:
            g = table.get(l.name)
            if g is not None:
                out[l.offset:l.offset + l.size] = np.asarray(g).reshape(-1)
        return out

    def copy(self, flat: np.ndarray | None = None) -> "Params":
        return Params(self.manifest, self.flat.copy() if flat is None else flat, self.kind, self.config)


def _manifest(entries) -> list[LayerSpec]:
    out, off = [], 0
    for name, shape in entries:
        spec = LayerSpec(name, tuple(int(s) for s in shape), off)
        out.append(spec)
        off += spec.size
    return out


def policy_manifest(cfg: PolicyConfig) -> list[LayerSpec]:
    if cfg.arch == "mlp":
        entries, prev = [], 12
        for i, h in enumerate(cfg.mlp_hidden):
            entries += [(f"fc{i}.w", (h, prev)), (f"fc{i}.b", (h,))]
            prev = h
        entries += [("out.w", (3, prev)), ("out.b", (3,))]
        return _manifest(entries)
    c1, c2 = cfg.conv_channels
    half = cfg.embed // 2
    H = cfg.embed
    return _manifest([
        ("conv1.w", (c1, 1 * 9)), ("conv1.b", (c1,)),
        ("conv2.w", (c2, c1 * 9)), ("conv2.b", (c2,)),
        ("depth_fc.w", (half, c2 * 6 * 8)), ("depth_fc.b", (half,)),
        ("state_fc.w", (cfg.embed - half, 12)), ("state_fc.b", (cfg.embed - half,)),
        ("gru.wx", (3 * H, H)), ("gru.wh", (3 * H, H)), ("gru.bx", (3 * H,)), ("gru.bh", (3 * H,)),
        ("head1.w", (cfg.head_hidden, H)), ("head1.b", (cfg.head_hidden,)),
        ("head2.w", (3, cfg.head_hidden)), ("head2.b", (3,)),
    ])


def delta_manifest(cfg: DeltaConfig) -> list[LayerSpec]:
    H = cfg.hidden
    return _manifest([
        ("in.w", (H, 9)), ("in.b", (H,)),
        ("gru.wx", (3 * H, H)), ("gru.wh", (3 * H, H)), ("gru.bx", (3 * H,)), ("gru.bh", (3 * H,)),
        ("out.w", (3, H)), ("out.b", (3,)),
    ])


def init_params(seed: int, manifest: list[LayerSpec], kind: str = "policy", config=None,
                out_gain: float = 0.1) -> Params:
    """Fan-in scaled uniform init; zero biases; update-gate bias +1.

    Weights are drawn from ``U(-sqrt(3/fan_in), sqrt(3/fan_in))`` so a linear
    layer preserves the variance of white-noise input. GRU matrices use the
    usual ``U(-1/sqrt(H), 1/sqrt(H))``. Layers named ``out``/``head2`` are
    scaled by ``out_gain`` so a fresh policy starts near hover.
    """
    rng = np.random.default_rng(seed)
    params = Params(manifest, kind=kind, config=asdict(config) if config is not None else None)
    for l in manifest:
        view = params.flat[l.offset:l.offset + l.size]
        if l.name.endswith(".b") or l.name in ("gru.bh",):
            continue
        if l.name == "gru.bx":
            H = l.shape[0] // 3
            view[H:2 * H] = 1.0
            continue
        if l.name in ("gru.wx", "gru.wh"):
            H = l.shape[0] // 3
            a = 1.0 / np.sqrt(H)
        else:
            a = np.sqrt(3.0 / l.shape[1])
        w = rng.uniform(-a, a, size=l.size)
        if l.name.split(".")[0] in ("out", "head2"):
            w *= out_gain
        view[:] = w
    return params


def bind(params: Params, tape: Tape, frozen: bool = False, prefix: str = "") -> dict[str, NodeRef]:
    """Register every layer on the tape (as constants when ``frozen``)."""
    nodes = {}
    for l in params.manifest:
        value = params[l.name]
        core = min(len(l.shape), 2)
        if frozen:
            nodes[l.name] = tape.constant(value, core=core)
        else:
            nodes[l.name] = tape.input(value, core=core, name=prefix + l.name)
    return nodes


def policy_forward(obs, h, nodes: dict[str, NodeRef], cfg: PolicyConfig, tape: Tape):
    """One policy step; returns ``(command, h_next)``.

    ``obs`` is an :class:`~racekit.world.Observation` (numeric, detached).
    ``h`` is the previous hidden node or ``None`` at episode start.
    """
    state = obs.state_vector
    if state.shape[-1] != 12:
        raise TapeError(f"policy_forward: expected 12 state inputs, got {state.shape[-1]}")
    scale = np.concatenate([np.full(3, cfg.v_scale), np.ones(3), np.full(3, cfg.gate_scale), np.full(3, cfg.cmd_scale)])
    x_state = tape.constant(state * scale, core=1)
    act = lambda n: tape.leaky_relu(n, cfg.slope)  # noqa: E731

    if cfg.arch == "mlp":
        x = x_state
        for i in range(len(cfg.mlp_hidden)):
            x = act(tape.linear(nodes[f"fc{i}.w"], nodes[f"fc{i}.b"], x))
        y = tape.linear(nodes["out.w"], nodes["out.b"], x)
        h_next = None
    else:
        if obs.depth is None or obs.depth.shape[-2:] != (24, 32):
            raise TapeError("policy_forward: cnn_gru policy needs a 24x32 depth image")
        c1, c2 = cfg.conv_channels
        img = tape.constant(obs.depth.reshape(obs.depth.shape[:-2] + (-1,)) / 10.0, core=1)
        f = act(tape.conv2d(img, nodes["conv1.w"], nodes["conv1.b"], (1, 24, 32)))
        f = act(tape.conv2d(f, nodes["conv2.w"], nodes["conv2.b"], (c1, 12, 16)))
        f = act(tape.linear(nodes["depth_fc.w"], nodes["depth_fc.b"], f))
        s = act(tape.linear(nodes["state_fc.w"], nodes["state_fc.b"], x_state))
        z = tape.concat(f, s)
        if h is None:
            h = tape.constant(np.zeros(z.value.shape), core=1)
        else:
            h = tape.carry(h)
        h_next = tape.gru(z, h, nodes["gru.wx"], nodes["gru.wh"], nodes["gru.bx"], nodes["gru.bh"])
        y = act(tape.linear(nodes["head1.w"], nodes["head1.b"], h_next))
        y = tape.linear(nodes["head2.w"], nodes["head2.b"], y)
    cmd = tape.scale(y, cfg.out_scale)
    cmd = smooth_clamp(cmd, cfg.a_max, cfg.clamp_sharpness, tape)
    return cmd, h_next


def delta_forward(v_body, r3, action, h, nodes: dict[str, NodeRef], cfg: DeltaConfig, tape: Tape):
    """Residual action ``u_delta(v_body, r3, action)``; returns ``(correction, h_next)``.

    ``v_body`` and ``r3`` are numeric; ``action`` may be a tape node (so the
    gradient reaches the policy through the frozen delta net).
    """
    v_body = np.asarray(v_body, dtype=np.float64)
    r3 = np.asarray(r3, dtype=np.float64)
    if v_body.shape[-1] != 3 or r3.shape[-1] != 3:
        raise TapeError("delta_forward: v_body and r3 must be 3-vectors")
    if not isinstance(action, NodeRef):
        action = tape.constant(np.asarray(action, dtype=np.float64), core=1)
    x = tape.concat(
        tape.constant(v_body * cfg.v_scale, core=1),
        tape.constant(r3, core=1),
        tape.scale(action, cfg.cmd_scale),
    )
    x = tape.leaky_relu(tape.linear(nodes["in.w"], nodes["in.b"], x), cfg.slope)
    if h is None:
        h = tape.constant(np.zeros(x.value.shape), core=1)
    else:
        h = tape.carry(h)
    h_next = tape.gru(x, h, nodes["gru.wx"], nodes["gru.wh"], nodes["gru.bx"], nodes["gru.bh"])
    y = tape.linear(nodes["out.w"], nodes["out.b"], h_next)
    return tape.scale(y, cfg.out_scale), h_next


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Params, extra: dict | None = None) -> None:
    """Write magic line, one JSON header line, then the float64 payload (little endian)."""
    header = {
        "kind": params.kind,
        "config": params.config,
        "size": params.size,
        "layers": [{"name": l.name, "shape": list(l.shape), "offset": l.offset} for l in params.manifest],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(blob)
        fh.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path, expect_manifest: list[LayerSpec] | None = None) -> tuple[Params, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic/version)")
    rest = data[len(CHECKPOINT_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    payload = rest[nl + 1:]
    manifest = [LayerSpec(l["name"], tuple(l["shape"]), l["offset"]) for l in header["layers"]]
    if len(payload) != 8 * header["size"]:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, header promises {8 * header['size']}")
    if expect_manifest is not None:
        want = [(l.name, l.shape, l.offset) for l in expect_manifest]
        got = [(l.name, l.shape, l.offset) for l in manifest]
        if want != got:
            raise CheckpointError(f"{path}: manifest does not match the configured network")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return Params(manifest, flat, header.get("kind", "policy"), header.get("config")), header.get("extra", {})
