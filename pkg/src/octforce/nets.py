"""Recurrent cells, residual blocks and the five force-regression architectures.

All models map a window ``[batch, t_s, d_c]`` of cropped A-scans to a force
estimate ``[batch, 1]``. Parameters live in a flat, insertion-ordered
``dict[str, Tensor]`` so they can be checkpointed and optimized by name.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CKPT_MAGIC = b"OCTCKPT1"


class ArchId(str, enum.Enum):
    ConvGruCnn = "convgru-cnn"
    CnnGru = "cnn-gru"
    Cnn2d = "2d-cnn"
    Cnn1d = "1d-cnn"
    Gru = "gru"

    @classmethod
    def parse(cls, name) -> "ArchId":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            choices = ", ".join(a.value for a in cls)
            raise ValueError(f"unknown architecture {name!r}; expected one of: {choices}") from None


@dataclass(frozen=True)
class LayerSpec:
    groups: tuple[tuple[int, int], ...] = ((2, 16), (2, 32), (2, 64))
    kernel: int = 3
    first_stride: int = 2
    convgru_layers: int = 2
    convgru_maps: int = 8
    convgru_kernel: int = 3
    gru_layers: int = 3
    gru_hidden: int = 32
    cnn_gru_layers: int = 2

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(tuple(int(v) for v in g) for g in self.groups))

    def validate(self, arch: ArchId | None = None) -> None:
        problems = []
        if not self.groups:
            problems.append("at least one ResBlock group is required")
        for n_blocks, maps in self.groups:
            if n_blocks < 1 or maps < 1:
                problems.append(f"group ({n_blocks}, {maps}) must have positive block and map counts")
        maps = [m for _, m in self.groups]
        if any(b < a for a, b in zip(maps, maps[1:])):
            problems.append(f"feature maps must be non-decreasing across groups, got {maps}")
        if self.kernel % 2 == 0 or self.convgru_kernel % 2 == 0:
            problems.append(f"kernels must be odd (kernel={self.kernel}, convgru_kernel={self.convgru_kernel})")
        if self.first_stride not in (1, 2):
            problems.append(f"first_stride must be 1 or 2, got {self.first_stride}")
        for name in ("convgru_layers", "convgru_maps", "gru_layers", "gru_hidden", "cnn_gru_layers"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if problems:
            where = f" for {arch.value}" if arch is not None else ""
            raise ValueError(f"invalid LayerSpec{where}: " + "; ".join(problems))

    def to_dict(self):
        d = asdict(self)
        d["groups"] = [list(g) for g in self.groups]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["groups"] = tuple(tuple(g) for g in d.get("groups", cls.groups))
        return cls(**d)


# ---------------------------------------------------------------------------
# initialisation


class _Init:
    def __init__(self, seed, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}

    def uniform(self, name, shape, fan_in, gain=1.0):
        bound = gain * np.sqrt(3.0 / fan_in)
        v = self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        self._add(name, v)

    def zeros(self, name, shape):
        self._add(name, np.zeros(shape, dtype=self.dtype))

    def _add(self, name, v):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.params[name] = Tensor(v, requires_grad=True, name=name)


RELU_GAIN = np.sqrt(2.0)


def _init_gru(init: _Init, prefix, n_in, hidden):
    for gate in "zrh":
        init.uniform(f"{prefix}.w{gate}", (n_in, hidden), n_in)
        init.uniform(f"{prefix}.u{gate}", (hidden, hidden), hidden)
        init.zeros(f"{prefix}.b{gate}", (hidden,))


def _init_convgru(init: _Init, prefix, c_in, maps, k):
    for gate in "zrh":
        init.uniform(f"{prefix}.w{gate}", (maps, c_in, k), c_in * k)
        init.uniform(f"{prefix}.u{gate}", (maps, maps, k), maps * k)
        init.zeros(f"{prefix}.b{gate}", (maps,))


def _init_trunk(init: _Init, prefix, c_in, spec: LayerSpec, dims: int):
    kshape = (spec.kernel,) * dims
    ksize = spec.kernel**dims
    for g, (n_blocks, maps) in enumerate(spec.groups):
        for j in range(n_blocks):
            p = f"{prefix}.g{g}.b{j}"
            stride = spec.first_stride if j == 0 else 1
            init.uniform(f"{p}.w1", (maps, c_in) + kshape, c_in * ksize, RELU_GAIN)
            init.zeros(f"{p}.b1", (maps,))
            init.uniform(f"{p}.w2", (maps, maps) + kshape, maps * ksize, RELU_GAIN)
            init.zeros(f"{p}.b2", (maps,))
            if stride != 1 or c_in != maps:
                init.uniform(f"{p}.wp", (maps, c_in) + (1,) * dims, c_in)
                init.zeros(f"{p}.bp", (maps,))
            c_in = maps
    return c_in


# ---------------------------------------------------------------------------
# cells and blocks


def _block(params, prefix):
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in params.items() if k.startswith(prefix + ".")}


class _Fused:
    """Gate weights concatenated once per forward pass: one product per step for z and r together."""

    def __init__(self, p, axis):
        self.n = p["uz"].shape[axis]
        self.w = ad.concat([p["wz"], p["wr"], p["wh"]], axis=axis)
        self.b = ad.concat([p["bz"], p["br"], p["bh"]], axis=0)
        self.u_zr = ad.concat([p["uz"], p["ur"]], axis=axis)
        self.uh = p["uh"]


def _gru_update(xz, xr, xh, h, f: _Fused):
    n = f.n
    hzr = h @ f.u_zr
    z = ad.sigmoid(xz + hzr[:, :n])
    r = ad.sigmoid(xr + hzr[:, n:])
    h_cand = ad.tanh(xh + (r * h) @ f.uh)
    return h + z * (h_cand - h)


def _gru_step(x_t, h, f: _Fused):
    n = f.n
    xp = ad.dense(x_t, f.w, f.b)
    return _gru_update(xp[:, :n], xp[:, n : 2 * n], xp[:, 2 * n :], h, f)


def gru_cell(x_t: Tensor, h_prev: Tensor, params: dict) -> Tensor:
    """One GRU step; ``params`` holds wz/uz/bz, wr/ur/br, wh/uh/bh.

    z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
    h~ = tanh(x Wh + (r*h) Uh + bh), h' = (1 - z) h + z h~.
    """
    hidden = params["uz"].shape[0]
    if h_prev.ndim != 2 or h_prev.shape[1] != hidden:
        raise ValueError(f"gru_cell hidden state must be [batch, {hidden}], got {h_prev.shape}")
    if x_t.ndim != 2 or x_t.shape[1] != params["wz"].shape[0]:
        raise ValueError(f"gru_cell input must be [batch, {params['wz'].shape[0]}], got {x_t.shape}")
    return _gru_step(x_t, h_prev, _Fused(params, axis=1))


def _convgru_update(xz, xr, xh, h, f: _Fused):
    n = f.n
    hzr = ad.conv1d(h, f.u_zr)
    z = ad.sigmoid(xz + hzr[:, :n])
    r = ad.sigmoid(xr + hzr[:, n:])
    h_cand = ad.tanh(xh + ad.conv1d(r * h, f.uh))
    return h + z * (h_cand - h)


def _convgru_step(x_t, h, f: _Fused):
    n = f.n
    xp = ad.conv1d(x_t, f.w, f.b)
    return _convgru_update(xp[:, :n], xp[:, n : 2 * n], xp[:, 2 * n :], h, f)


def convgru_cell(x_t: Tensor, h_prev: Tensor, params: dict) -> Tensor:
    """GRU step with every matrix product replaced by a 'same' 1D convolution.

    x_t: [batch, c_in, length], h_prev: [batch, maps, length].
    """
    maps = params["uz"].shape[0]
    if h_prev.ndim != 3 or h_prev.shape[1] != maps:
        raise ValueError(f"convgru_cell hidden state must be [batch, {maps}, length], got {h_prev.shape}")
    if x_t.ndim != 3 or x_t.shape[2] != h_prev.shape[2]:
        raise ValueError(f"convgru_cell input {x_t.shape} incompatible with hidden state {h_prev.shape}")
    return _convgru_step(x_t, h_prev, _Fused(params, axis=0))


def resblock_1d(x: Tensor, params: dict, stride: int, F_out: int) -> Tensor:
    """relu(conv-relu-conv(x) + shortcut(x)); the shortcut is a strided 1x1 conv when shapes change."""
    if stride not in (1, 2):
        raise ValueError(f"resblock stride must be 1 or 2, got {stride}")
    h = ad.relu(ad.conv1d(x, params["w1"], params["b1"], stride=stride))
    h = ad.conv1d(h, params["w2"], params["b2"])
    if stride == 1 and x.shape[1] == F_out:
        short = x
    else:
        short = ad.conv1d(x, params["wp"], params["bp"], stride=stride)
    return ad.relu(h + short)


def resblock_2d(x: Tensor, params: dict, stride: int, F_out: int) -> Tensor:
    if stride not in (1, 2):
        raise ValueError(f"resblock stride must be 1 or 2, got {stride}")
    s = (stride, stride)
    h = ad.relu(ad.conv2d(x, params["w1"], params["b1"], stride=s))
    h = ad.conv2d(h, params["w2"], params["b2"])
    if stride == 1 and x.shape[1] == F_out:
        short = x
    else:
        short = ad.conv2d(x, params["wp"], params["bp"], stride=s)
    return ad.relu(h + short)


def _trunk(x, params, prefix, spec: LayerSpec, dims):
    block = resblock_1d if dims == 1 else resblock_2d
    for g, (n_blocks, maps) in enumerate(spec.groups):
        for j in range(n_blocks):
            stride = spec.first_stride if j == 0 else 1
            x = block(x, _block(params, f"{prefix}.g{g}.b{j}"), stride, maps)
    return ad.global_avg_pool(x)


def _run_gru_stack(seq_in, params, prefix, n_layers, hidden):
    """seq_in: [batch, T, features]; returns the top layer's final hidden state."""
    batch, steps, n_in = seq_in.shape
    cells = [_Fused(_block(params, f"{prefix}.l{i}"), axis=1) for i in range(n_layers)]
    # first-layer input projections do not depend on h: one product for all steps
    flat = ad.reshape(seq_in, (batch * steps, n_in))
    proj = ad.reshape(ad.dense(flat, cells[0].w, cells[0].b), (batch, steps, 3 * hidden))
    hs = [Tensor(np.zeros((batch, hidden), dtype=seq_in.dtype))] * n_layers
    for t in range(steps):
        xp = proj[:, t]
        hs[0] = _gru_update(xp[:, :hidden], xp[:, hidden : 2 * hidden], xp[:, 2 * hidden :], hs[0], cells[0])
        for i in range(1, n_layers):
            hs[i] = _gru_step(hs[i - 1], hs[i], cells[i])
    return hs[-1]


# ---------------------------------------------------------------------------
# models


@dataclass
class Model:
    arch: ArchId
    spec: LayerSpec
    params: dict[str, Tensor] = field(repr=False)

    def __call__(self, x) -> Tensor:
        return self.forward(x)

    def forward(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 3:
            raise ValueError(f"model input must be [batch, t_s, d_c], got {x.shape}")
        return _FORWARD[self.arch](self, x)

    def n_params(self, prefix="") -> int:
        return sum(p.value.size for k, p in self.params.items() if k.startswith(prefix))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, p in self.params.items():
            v = np.asarray(state[k])
            if v.shape != p.shape:
                raise ValueError(f"parameter {k!r}: checkpoint shape {v.shape} != model shape {p.shape}")
            p.value = v.astype(p.dtype)


def _head(model, feats):
    return ad.dense(feats, model.params["head.w"], model.params["head.b"])


def _fwd_convgru_cnn(model, x):
    spec, params = model.spec, model.params
    batch, steps, length = x.shape
    n = spec.convgru_maps
    cells = [_Fused(_block(params, f"convgru.l{i}"), axis=0) for i in range(spec.convgru_layers)]
    flat = ad.reshape(x, (batch * steps, 1, length))
    proj = ad.reshape(ad.conv1d(flat, cells[0].w, cells[0].b), (batch, steps, 3 * n, length))
    hs = [Tensor(np.zeros((batch, n, length), dtype=x.dtype))] * len(cells)
    for t in range(steps):
        xp = proj[:, t]
        hs[0] = _convgru_update(xp[:, :n], xp[:, n : 2 * n], xp[:, 2 * n :], hs[0], cells[0])
        for i in range(1, len(cells)):
            hs[i] = _convgru_step(hs[i - 1], hs[i], cells[i])
    return _head(model, _trunk(hs[-1], params, "cnn", spec, 1))


def _fwd_cnn_gru(model, x):
    spec, params = model.spec, model.params
    batch, steps, length = x.shape
    feats = _trunk(ad.reshape(x, (batch * steps, 1, length)), params, "cnn", spec, 1)
    seq = ad.reshape(feats, (batch, steps, feats.shape[1]))
    h = _run_gru_stack(seq, params, "gru", spec.cnn_gru_layers, spec.gru_hidden)
    return _head(model, h)


def _fwd_cnn2d(model, x):
    batch, steps, length = x.shape
    img = ad.reshape(x, (batch, 1, steps, length))
    return _head(model, _trunk(img, model.params, "cnn", model.spec, 2))


def _fwd_cnn1d(model, x):
    last = x[:, -1:, :]  # [batch, 1, d_c]: the current scan is the single input channel
    return _head(model, _trunk(last, model.params, "cnn", model.spec, 1))


def _fwd_gru(model, x):
    spec = model.spec
    h = _run_gru_stack(x, model.params, "gru", spec.gru_layers, spec.gru_hidden)
    return _head(model, h)


_FORWARD = {
    ArchId.ConvGruCnn: _fwd_convgru_cnn,
    ArchId.CnnGru: _fwd_cnn_gru,
    ArchId.Cnn2d: _fwd_cnn2d,
    ArchId.Cnn1d: _fwd_cnn1d,
    ArchId.Gru: _fwd_gru,
}


def build(arch, spec: LayerSpec | None = None, d_c: int | None = None, seed=0, dtype=np.float32) -> Model:
    """Create a model with freshly initialised parameters.

    ``d_c`` is only needed by the pure GRU, whose first layer consumes whole scans.
    """
    arch = ArchId.parse(arch)
    spec = spec or LayerSpec()
    spec.validate(arch)
    init = _Init(seed, dtype)
    if arch is ArchId.ConvGruCnn:
        c_in = 1
        for i in range(spec.convgru_layers):
            _init_convgru(init, f"convgru.l{i}", c_in, spec.convgru_maps, spec.convgru_kernel)
            c_in = spec.convgru_maps
        n_feat = _init_trunk(init, "cnn", c_in, spec, 1)
    elif arch is ArchId.CnnGru:
        n_in = _init_trunk(init, "cnn", 1, spec, 1)
        for i in range(spec.cnn_gru_layers):
            _init_gru(init, f"gru.l{i}", n_in, spec.gru_hidden)
            n_in = spec.gru_hidden
        n_feat = spec.gru_hidden
    elif arch is ArchId.Cnn2d:
        n_feat = _init_trunk(init, "cnn", 1, spec, 2)
    elif arch is ArchId.Cnn1d:
        n_feat = _init_trunk(init, "cnn", 1, spec, 1)
    else:
        if d_c is None:
            raise ValueError("the gru architecture needs d_c (scan length) at build time")
        n_in = d_c
        for i in range(spec.gru_layers):
            _init_gru(init, f"gru.l{i}", n_in, spec.gru_hidden)
            n_in = spec.gru_hidden
        n_feat = spec.gru_hidden
    init.uniform("head.w", (n_feat, 1), n_feat)
    init.zeros("head.b", (1,))
    return Model(arch, spec, init.params)


def trunk_param_count(spec: LayerSpec, c_in: int, dims: int) -> int:
    """Closed-form parameter count of a ResNet trunk (weights + biases).

    Each block has two k^dims convolutions and, when the shape changes, a 1x1 projection.
    """
    ksize = spec.kernel**dims
    total = 0
    for n_blocks, maps in spec.groups:
        for j in range(n_blocks):
            stride = spec.first_stride if j == 0 else 1
            total += maps * c_in * ksize + maps + maps * maps * ksize + maps
            if stride != 1 or c_in != maps:
                total += maps * c_in + maps
            c_in = maps
    return total


# ---------------------------------------------------------------------------
# checkpoint format: magic, then repeated (u32 name_len, name, u32 rank, u64 dims..., f64 values)


def save_checkpoint(state, path) -> None:
    chunks = [CKPT_MAGIC]
    for name, v in state.items():
        v = v.value if isinstance(v, Tensor) else np.asarray(v)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{v.ndim}Q", v.ndim, *v.shape))
        chunks.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {data[:8]!r})")
    pos, out = 8, {}

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
    return out
