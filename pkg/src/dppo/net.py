"""Fixed-architecture policy and value networks with analytic gradients.

Both networks share one layout: a Conv1D encoder over the scan dots, a
feed-forward encoder over the flattened proprio history, and a trunk over
[proprio, command, periodic, scan latent, history latent]. Everything is
float64 and deterministic.
"""

from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .terrain import ConfigError

LOG_STD_MIN = -4.0
LOG_STD_MAX = 1.0
_LOG_2PI = np.log(2.0 * np.pi)

MAGIC = b"DPPO"
# linvel, angvel, avg vel, gravity, joints, joint vel, previous action
DEFAULT_PROPRIO_SCALE = np.concatenate([
    np.full(3, 2.0), np.full(3, 0.25), np.full(3, 2.0), np.ones(3),
    np.ones(18), np.full(18, 0.05), np.ones(18)])
VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    scan_len: int = 441
    proprio_dim: int = 66
    command_dim: int = 3
    periodic_dim: int = 3
    history_len: int = 50
    action_dim: int = 18
    conv_channels: tuple = (8, 8)
    conv_kernel: int = 5
    conv_stride: int = 2
    latent_dim: int = 32
    history_hidden: tuple = (256, 128)
    trunk_hidden: tuple = (256, 128)
    init_log_std: float = -1.0
    # fixed input normalization (not learned)
    scan_offset: float = 0.9
    scan_scale: float = 5.0
    proprio_scale: tuple = ()
    command_scale: float = 2.0

    def __post_init__(self):
        for name in ("scan_len", "proprio_dim", "history_len", "action_dim", "latent_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"net {name} must be >= 1")
        if self.proprio_scale and len(self.proprio_scale) != self.proprio_dim:
            raise ConfigError("net proprio_scale needs one entry per proprio channel")
        if self.conv_out_len() < 1:
            raise ConfigError("net conv stack leaves no output for the scan length")
        if not LOG_STD_MIN <= self.init_log_std <= LOG_STD_MAX:
            raise ConfigError("net init_log_std must lie in [-4, 1]")

    def conv_out_len(self) -> int:
        length = self.scan_len
        for _ in self.conv_channels:
            length = (length - self.conv_kernel) // self.conv_stride + 1
        return length

    @property
    def obs_dim(self) -> int:
        return (self.proprio_dim + self.command_dim + self.periodic_dim + self.scan_len
                + self.history_len * self.proprio_dim)

    @property
    def trunk_in(self) -> int:
        return self.proprio_dim + self.command_dim + self.periodic_dim + 2 * self.latent_dim


class ParamStore:
    """Named parameters with a parallel gradient table."""

    def __init__(self):
        self.params: OrderedDict[str, np.ndarray] = OrderedDict()
        self.grads: OrderedDict[str, np.ndarray] = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    @classmethod
    def merged(cls, *stores: "ParamStore") -> "ParamStore":
        out = cls()
        for s in stores:
            for k in s.params:
                if k in out.params:
                    raise ValueError(f"duplicate parameter name {k!r}")
                out.params[k] = s.params[k]
                out.grads[k] = s.grads[k]
        return out

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for p in self.params.values():
            p[...] = vec[i:i + p.size].reshape(p.shape)
            i += p.size

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.vdot(g, g)) for g in self.grads.values())))

    def scale_grads(self, factor: float) -> None:
        for g in self.grads.values():
            g *= factor

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())


def _check(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite activation in layer {name}")
    return arr


def _orthogonal(rng, n_in, n_out, gain):
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    w = q if n_in >= n_out else q.T
    return gain * w[:n_in, :n_out]


class Linear:
    def __init__(self, store, name, n_in, n_out, rng, gain=np.sqrt(2.0)):
        self.name = name
        self.W = store.add(f"{name}.W", _orthogonal(rng, n_in, n_out, gain))
        self.b = store.add(f"{name}.b", np.zeros(n_out))
        self.dW = store.grads[f"{name}.W"]
        self.db = store.grads[f"{name}.b"]

    def forward(self, x):
        return _check(self.name, x @ self.W + self.b), x

    def backward(self, dy, x, need_dx=True):
        self.dW += x.T @ dy
        self.db += dy.sum(axis=0)
        return dy @ self.W.T if need_dx else None


class ELU:
    def __init__(self, name):
        self.name = name

    def forward(self, x):
        y = np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
        return _check(self.name, y), y

    def backward(self, dy, y):
        return dy * np.where(y > 0, 1.0, y + 1.0)


class Conv1D:
    """Valid 1-D convolution over (batch, channels, length)."""

    def __init__(self, store, name, c_in, c_out, kernel, stride, rng, gain=np.sqrt(2.0)):
        self.name = name
        self.k, self.s = kernel, stride
        bound = gain * np.sqrt(3.0 / (c_in * kernel))
        self.W = store.add(f"{name}.W", rng.uniform(-bound, bound, (c_out, c_in, kernel)))
        self.b = store.add(f"{name}.b", np.zeros(c_out))
        self.dW = store.grads[f"{name}.W"]
        self.db = store.grads[f"{name}.b"]

    def _cols(self, x):
        """(B, C*K, L_out) patch matrix, channel-major like the weights."""
        b, c, length = x.shape
        l_out = (length - self.k) // self.s + 1
        st = x.strides
        view = np.lib.stride_tricks.as_strided(
            x, shape=(b, c, self.k, l_out), strides=(st[0], st[1], st[2], st[2] * self.s),
            writeable=False)
        return view.reshape(b, c * self.k, l_out), l_out

    def forward(self, x):
        x = np.ascontiguousarray(x)
        cols, l_out = self._cols(x)
        c_out = self.W.shape[0]
        y = np.matmul(self.W.reshape(c_out, -1), cols) + self.b[:, None]
        return _check(self.name, y), (x.shape, cols, l_out)

    def backward(self, dy, cache, need_dx=True):
        shape, cols, l_out = cache
        b, c_in, length = shape
        c_out = self.W.shape[0]
        self.dW += np.tensordot(dy, cols, axes=([0, 2], [0, 2])).reshape(self.W.shape)
        self.db += dy.sum(axis=(0, 2))
        if not need_dx:
            return None
        dcols = np.matmul(self.W.reshape(c_out, -1).T, dy).reshape(b, c_in, self.k, l_out)
        dx = np.zeros(shape)
        stop = self.s * (l_out - 1) + 1
        for kk in range(self.k):
            dx[:, :, kk:kk + stop:self.s] += dcols[:, :, kk]
        return dx


class Sequential:
    def __init__(self, layers):
        self.layers = layers

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, dy, caches, need_dx=True):
        """Backpropagate; ``need_dx=False`` skips the gradient w.r.t. the
        sequence input (the first layer must then hold parameters)."""
        n = len(self.layers)
        for i, (layer, c) in enumerate(zip(reversed(self.layers), reversed(caches))):
            if i == n - 1 and not need_dx:
                return layer.backward(dy, c, need_dx=False)
            dy = layer.backward(dy, c)
        return dy


def _mlp(store, prefix, sizes, rng, out_gain):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        layers.append(Linear(store, f"{prefix}.fc{i}", a, b, rng, gain=out_gain if last else np.sqrt(2.0)))
        if not last:
            layers.append(ELU(f"{prefix}.elu{i}"))
    return layers


@dataclass
class ForwardCache:
    batch: int
    scan: list
    hist: list
    trunk: list


class _EncoderTrunk:
    def __init__(self, cfg: NetConfig, prefix: str, out_dim: int, out_gain: float, rng):
        self.cfg = cfg
        self.prefix = prefix
        self.store = ParamStore()
        layers = []
        c_in = 1
        for i, c_out in enumerate(cfg.conv_channels):
            layers.append(Conv1D(self.store, f"{prefix}.scan.conv{i}", c_in, c_out,
                                 cfg.conv_kernel, cfg.conv_stride, rng))
            layers.append(ELU(f"{prefix}.scan.elu{i}"))
            c_in = c_out
        layers.append(_Flatten())
        layers.append(Linear(self.store, f"{prefix}.scan.latent", c_in * cfg.conv_out_len(),
                             cfg.latent_dim, rng))
        self.scan_enc = Sequential(layers)
        hist_sizes = (cfg.history_len * cfg.proprio_dim,) + tuple(cfg.history_hidden) + (cfg.latent_dim,)
        self.hist_enc = Sequential(_mlp(self.store, f"{prefix}.hist", hist_sizes, rng, np.sqrt(2.0)))
        trunk_sizes = (cfg.trunk_in,) + tuple(cfg.trunk_hidden) + (out_dim,)
        self.trunk = Sequential(_mlp(self.store, f"{prefix}.trunk", trunk_sizes, rng, out_gain))
        self._scales()

    def _scales(self):
        c = self.cfg
        if c.proprio_scale:
            ps = np.asarray(c.proprio_scale, dtype=np.float64)
        elif c.proprio_dim == len(DEFAULT_PROPRIO_SCALE):
            ps = DEFAULT_PROPRIO_SCALE
        else:
            ps = np.ones(c.proprio_dim)
        self.proprio_scale = ps
        self.hist_scale = np.tile(ps, c.history_len)

    def split(self, obs):
        c = self.cfg
        i0 = c.proprio_dim + c.command_dim + c.periodic_dim
        i1 = i0 + c.scan_len
        if obs.ndim != 2 or obs.shape[1] != c.obs_dim:
            raise ValueError(f"expected observations of shape (B, {c.obs_dim}), got {obs.shape}")
        head = obs[:, :i0].copy()
        head[:, :c.proprio_dim] *= self.proprio_scale
        head[:, c.proprio_dim:c.proprio_dim + c.command_dim] *= c.command_scale
        scan = (obs[:, i0:i1] + c.scan_offset) * c.scan_scale
        hist = obs[:, i1:] * self.hist_scale
        return head, scan, hist

    def _forward(self, obs):
        obs = np.asarray(obs, dtype=np.float64)
        head, scan, hist = self.split(obs)
        zs, scan_c = self.scan_enc.forward(scan[:, None, :])
        zh, hist_c = self.hist_enc.forward(hist)
        out, trunk_c = self.trunk.forward(np.concatenate([head, zs, zh], axis=1))
        return out, ForwardCache(obs.shape[0], scan_c, hist_c, trunk_c)

    def _backward(self, cache: ForwardCache, dout):
        if dout.shape[0] != cache.batch:
            raise ValueError(f"upstream batch {dout.shape[0]} does not match cache batch {cache.batch}")
        c = self.cfg
        dtrunk = self.trunk.backward(dout, cache.trunk)
        n_head = c.proprio_dim + c.command_dim + c.periodic_dim
        dzs = dtrunk[:, n_head:n_head + c.latent_dim]
        dzh = dtrunk[:, n_head + c.latent_dim:]
        self.scan_enc.backward(dzs, cache.scan, need_dx=False)
        self.hist_enc.backward(dzh, cache.hist, need_dx=False)

    def layer_names(self) -> list[str]:
        return sorted({n.rsplit(".", 1)[0] for n in self.store.names()})


class _Flatten:
    name = "flatten"

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape):
        return dy.reshape(shape)


class PolicyNet(_EncoderTrunk):
    def __init__(self, cfg: NetConfig, seed: int = 0, prefix: str = "policy"):
        rng = np.random.default_rng(seed)
        super().__init__(cfg, prefix, cfg.action_dim, 0.01, rng)
        self.log_std_param = self.store.add(f"{prefix}.log_std", np.full(cfg.action_dim, cfg.init_log_std))
        self.d_log_std = self.store.grads[f"{prefix}.log_std"]

    def log_std(self) -> np.ndarray:
        return np.clip(self.log_std_param, LOG_STD_MIN, LOG_STD_MAX)

    def forward(self, obs):
        mean, cache = self._forward(obs)
        return mean, self.log_std(), cache

    def backward(self, cache, d_mean, d_log_std=None):
        """Accumulate parameter gradients; caller zeroes the store first."""
        self._backward(cache, np.asarray(d_mean, dtype=np.float64))
        if d_log_std is not None:
            inside = (self.log_std_param >= LOG_STD_MIN) & (self.log_std_param <= LOG_STD_MAX)
            self.d_log_std += np.where(inside, d_log_std, 0.0)


class ValueNet(_EncoderTrunk):
    def __init__(self, cfg: NetConfig, seed: int = 0, prefix: str = "value"):
        rng = np.random.default_rng(seed)
        super().__init__(cfg, prefix, 1, 1.0, rng)

    def forward(self, obs):
        v, cache = self._forward(obs)
        return v[:, 0], cache

    def backward(self, cache, d_value):
        self._backward(cache, np.asarray(d_value, dtype=np.float64).reshape(-1, 1))


def policy_forward(net: PolicyNet, obs_batch):
    return net.forward(obs_batch)


def backward(net, cache, *upstream):
    net.backward(cache, *upstream)


def gaussian_logprob_entropy(mean, log_std, action):
    """Diagonal Gaussian log-density of ``action`` and entropy, per row."""
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.broadcast_to(np.asarray(log_std, dtype=np.float64), mean.shape)
    z = (np.asarray(action, dtype=np.float64) - mean) * np.exp(-log_std)
    d = mean.shape[-1]
    logp = -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std, axis=-1) - 0.5 * d * _LOG_2PI
    entropy = np.sum(log_std, axis=-1) + 0.5 * d * (1.0 + _LOG_2PI)
    return logp, entropy


def logprob_grads(mean, log_std, action):
    """d logp / d mean (B, d) and d logp / d log_std (B, d)."""
    inv = np.exp(-np.asarray(log_std, dtype=np.float64))
    z = (np.asarray(action) - mean) * inv
    return z * inv, z * z - 1.0


def sample_actions(mean, log_std, rngs):
    noise = np.stack([r.standard_normal(mean.shape[1]) for r in rngs])
    return mean + np.exp(log_std) * noise


def transfer_params(src, dst) -> None:
    """Copy every parameter of ``src`` into ``dst`` (names are matched after
    their first dotted component, so a 'policy.*' net can seed a
    'student.*' net) and zero ``dst`` gradients."""
    s_items = [(n.split(".", 1)[1], p) for n, p in src.store.params.items()]
    d_items = [(n.split(".", 1)[1], p) for n, p in dst.store.params.items()]
    problems = []
    if len(s_items) != len(d_items):
        problems.append(f"parameter count {len(s_items)} != {len(d_items)}")
    for (sn, sp), (dn, dp) in zip(s_items, d_items):
        if sn != dn or sp.shape != dp.shape:
            problems.append(f"{sn}{sp.shape} vs {dn}{dp.shape}")
    if problems:
        raise ConfigError("architecture mismatch: " + "; ".join(problems))
    for (_, sp), (_, dp) in zip(s_items, d_items):
        np.copyto(dp, sp)
    dst.store.zero_grad()


def save_checkpoint(store: ParamStore, path) -> None:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(store.params))
    for name, arr in store.params.items():
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(bytes(out))


def read_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header")
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}, expected {VERSION}")
    pos = 12
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise struct.error("name")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 8 * size > len(data) - 4:
                raise struct.error("data")
            tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or malformed tensor table") from exc
    if pos + 4 != len(data):
        raise CheckpointError(f"{path}: truncated or trailing bytes after tensor table")
    (crc,) = struct.unpack_from("<I", data, pos)
    if crc != zlib.crc32(data[:pos]) & 0xFFFFFFFF:
        raise CheckpointError(f"{path}: CRC mismatch")
    return tensors


def load_checkpoint(store: ParamStore, path) -> None:
    tensors = read_checkpoint(path)
    file_items = list(tensors.items())
    names = store.names()
    for i, name in enumerate(names):
        if i >= len(file_items):
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        fname, arr = file_items[i]
        if fname != name:
            raise CheckpointError(f"tensor {i}: checkpoint has {fname!r}, network expects {name!r}")
        if arr.shape != store.params[name].shape:
            raise CheckpointError(f"tensor {name!r}: checkpoint shape {arr.shape} != network shape "
                                  f"{store.params[name].shape}")
    if len(file_items) > len(names):
        raise CheckpointError(f"checkpoint has unexpected tensor {file_items[len(names)][0]!r}")
    for name in names:
        np.copyto(store.params[name], tensors[name])
    store.zero_grad()


def checkpoint_io(store: ParamStore, path, mode: str) -> None:
    if mode == "save":
        save_checkpoint(store, path)
    elif mode == "load":
        load_checkpoint(store, path)
    else:
        raise ValueError("mode must be 'save' or 'load'")
