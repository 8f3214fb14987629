"""Two-branch convolutional Q-network with hand-written backpropagation.

Parameters live in a plain ``dict[str, np.ndarray]``:

* ``local.conv{k}.w`` / ``global.conv{k}.w``: (s_k, s_k, in_channels, n_c)
* ``local.conv{k}.b`` / ``global.conv{k}.b``: (n_c,)
* ``dense{k}.w`` (in, out) and ``dense{k}.b`` for the three hidden layers
* ``out.w`` / ``out.b``: linear Q-value head

Tensors are channels-last: observations batch as (B, H, W, 4), the four
channels being the three map layers plus the target layer.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .env import ACTION_COUNT
from .observation import ObsConfig, Observation

IN_CHANNELS = 4
BRANCHES = ("local", "global")


@dataclass(frozen=True)
class ArchConfig:
    n_k: int = 2
    n_c: int = 16
    s_k: int = 5
    hidden_sizes: tuple[int, int, int] = (256, 256, 256)
    action_count: int = ACTION_COUNT

    def __post_init__(self):
        if self.n_k < 1:
            raise ValueError("n_k must be at least 1")
        if self.s_k < 1 or self.s_k % 2 == 0:
            raise ValueError("s_k must be odd")
        if len(self.hidden_sizes) != 3:
            raise ValueError("exactly three hidden layers are required")


class ObsBatch(NamedTuple):
    local: np.ndarray  # (B, proj, proj, 4)
    glob: np.ndarray  # (B, g, g, 4)
    budget: np.ndarray  # (B,)

    def __len__(self):
        return self.local.shape[0]

    def take(self, idx) -> "ObsBatch":
        return ObsBatch(self.local[idx], self.glob[idx], self.budget[idx])


def stack_observations(observations: Sequence[Observation], dtype=np.float64) -> ObsBatch:
    return ObsBatch(
        np.stack([o.local_stack() for o in observations]).astype(dtype),
        np.stack([o.global_stack() for o in observations]).astype(dtype),
        np.array([o.budget for o in observations], dtype=dtype),
    )


def branch_sides(arch: ArchConfig, obs: ObsConfig, size: int) -> tuple[int, int]:
    """Spatial sides of the local and global branch outputs."""
    trim = arch.n_k * (arch.s_k - 1)
    local, glob = obs.proj - trim, obs.global_side(size) - trim
    if local < 1 or glob < 1:
        raise ValueError(f"conv stack shrinks a branch below one cell (local={local}, global={glob})")
    return local, glob


def param_shapes(arch: ArchConfig, obs: ObsConfig, size: int) -> dict[str, tuple[int, ...]]:
    local, glob = branch_sides(arch, obs, size)
    shapes: dict[str, tuple[int, ...]] = {}
    for branch in BRANCHES:
        cin = IN_CHANNELS
        for k in range(arch.n_k):
            shapes[f"{branch}.conv{k}.w"] = (arch.s_k, arch.s_k, cin, arch.n_c)
            shapes[f"{branch}.conv{k}.b"] = (arch.n_c,)
            cin = arch.n_c
    width = arch.n_c * (local ** 2 + glob ** 2) + 1
    for k, h in enumerate(arch.hidden_sizes):
        shapes[f"dense{k}.w"] = (width, h)
        shapes[f"dense{k}.b"] = (h,)
        width = h
    shapes["out.w"] = (width, arch.action_count)
    shapes["out.b"] = (arch.action_count,)
    return shapes


def param_count(arch: ArchConfig, obs: ObsConfig, size: int) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(arch, obs, size).values())


def init_params(arch: ArchConfig, obs: ObsConfig, size: int, rng: np.random.Generator,
                dtype=np.float32) -> dict[str, np.ndarray]:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    params = {}
    for name, shape in param_shapes(arch, obs, size).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def _n_conv(params) -> int:
    return sum(1 for k in params if k.startswith("local.conv") and k.endswith(".w"))


def _im2col(x, s):
    b, h, w, c = x.shape
    ho, wo = h - s + 1, w - s + 1
    sb, sh, sw, sc = x.strides
    view = as_strided(x, (b, ho, wo, s, s, c), (sb, sh, sw, sh, sw, sc), writeable=False)
    return view.reshape(b * ho * wo, s * s * c)


def _conv(x, w, b):
    """Valid, stride-1 convolution. ``w`` is (s, s, in, out)."""
    s, cout = w.shape[0], w.shape[3]
    cols = _im2col(x, s)
    z = cols @ w.reshape(-1, cout) + b
    return z.reshape(x.shape[0], x.shape[1] - s + 1, x.shape[2] - s + 1, cout), cols


def _conv_backward(dz, cols, w, in_shape, need_dx):
    s, cout = w.shape[0], w.shape[3]
    dz2 = dz.reshape(-1, cout)
    dw = (cols.T @ dz2).reshape(w.shape)
    db = dz2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = dz2 @ w.reshape(-1, cout).T
    return _col2im(dcols, in_shape, s), dw, db


def _col2im(dcols, in_shape, s):
    b, h, w, c = in_shape
    ho, wo = h - s + 1, w - s + 1
    dcols = dcols.reshape(b, ho, wo, s, s, c)
    dx = np.zeros(in_shape, dtype=dcols.dtype)
    for u in range(s):
        for v in range(s):
            dx[:, u:u + ho, v:v + wo, :] += dcols[:, :, :, u, v, :]
    return dx


def forward(params: dict, batch: ObsBatch, keep_cache: bool = False):
    """Q-values for a batch, shape (B, action_count). With ``keep_cache`` also
    returns the activations needed by :func:`backward`."""
    n_conv = _n_conv(params)
    cache = {}
    flats = []
    for branch, x in zip(BRANCHES, (batch.local, batch.glob)):
        for k in range(n_conv):
            z, cols = _conv(x, params[f"{branch}.conv{k}.w"], params[f"{branch}.conv{k}.b"])
            if keep_cache:
                cache[f"{branch}.conv{k}"] = (cols, z, x.shape)
            x = np.maximum(z, 0)
        cache[f"{branch}.shape"] = x.shape
        flats.append(x.reshape(x.shape[0], -1))
    h = np.concatenate(flats + [batch.budget.reshape(-1, 1).astype(flats[0].dtype)], axis=1)
    for k in range(3):
        z = h @ params[f"dense{k}.w"] + params[f"dense{k}.b"]
        if keep_cache:
            cache[f"dense{k}"] = (h, z)
        h = np.maximum(z, 0)
    q = h @ params["out.w"] + params["out.b"]
    if keep_cache:
        cache["out"] = h
        return q, cache
    return q


def backward(params: dict, cache: dict, dq: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of sum(dq * Q) with respect to every parameter."""
    grads = {}
    h = cache["out"]
    grads["out.w"] = h.T @ dq
    grads["out.b"] = dq.sum(axis=0)
    dh = dq @ params["out.w"].T
    for k in reversed(range(3)):
        hin, z = cache[f"dense{k}"]
        dz = dh * (z > 0)
        grads[f"dense{k}.w"] = hin.T @ dz
        grads[f"dense{k}.b"] = dz.sum(axis=0)
        dh = dz @ params[f"dense{k}.w"].T
    n_conv = _n_conv(params)
    offset = 0
    for branch in BRANCHES:
        shape = cache[f"{branch}.shape"]
        width = int(np.prod(shape[1:]))
        dx = dh[:, offset:offset + width].reshape(shape)
        offset += width
        for k in reversed(range(n_conv)):
            cols, z, in_shape = cache[f"{branch}.conv{k}"]
            dz = dx * (z > 0)
            dx, grads[f"{branch}.conv{k}.w"], grads[f"{branch}.conv{k}.b"] = _conv_backward(
                dz, cols, params[f"{branch}.conv{k}.w"], in_shape, need_dx=k > 0)
    return grads


def q_forward(params: dict, observation: Observation) -> np.ndarray:
    dtype = params["out.w"].dtype
    return forward(params, stack_observations([observation], dtype=dtype))[0]


def q_gradient(params: dict, batch: ObsBatch, actions: np.ndarray, targets: np.ndarray):
    """Mean squared TD error over the batch and its exact gradient.

    Returns ``(loss, grads)``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    for arr in (batch.local, batch.glob, batch.budget, targets):
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite values in gradient inputs")
    q, cache = forward(params, batch, keep_cache=True)
    idx = np.arange(len(batch))
    err = q[idx, actions] - targets
    loss = float(np.mean(err ** 2))
    dq = np.zeros_like(q)
    dq[idx, actions] = 2.0 * err / len(batch)
    return loss, backward(params, cache, dq)


# -- checkpoints ---------------------------------------------------------------------

CHECKPOINT_MAGIC = b"ARMQNET\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _echo(arch: ArchConfig, obs: ObsConfig, size: int) -> str:
    a = asdict(arch)
    parts = [f"{k}={' '.join(map(str, v)) if isinstance(v, tuple) else v}" for k, v in a.items()]
    parts += [f"proj={obs.proj}", f"port={obs.port}", f"size={size}"]
    return ";".join(parts)


def save_checkpoint(path, params: dict, arch: ArchConfig, obs: ObsConfig, size: int) -> None:
    """Versioned binary container: magic, version, config echo, then per tensor
    its name, shape header and little-endian float32 data."""
    echo = _echo(arch, obs, size).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(echo)))
        fh.write(echo)
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, arch: ArchConfig | None = None, obs: ObsConfig | None = None,
                    size: int | None = None) -> tuple[dict, str]:
    """Read a checkpoint. When the configs are given, the stored echo and tensor
    shapes must match them. Returns ``(params, echo)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        if data[:8] != CHECKPOINT_MAGIC:
            raise CheckpointError("not a Q-network checkpoint")
        pos = 8
        version, n = struct.unpack_from("<II", data, pos)
        pos += 8
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {version} unsupported")
        echo = data[pos:pos + n].decode("utf-8")
        pos += n
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            nbytes = 4 * int(np.prod(shape))
            if pos + nbytes > len(data):
                raise CheckpointError("checkpoint truncated")
            params[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"checkpoint truncated: {exc}") from exc
    if pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    if arch is not None and obs is not None and size is not None:
        expected = _echo(arch, obs, size)
        if echo != expected:
            raise CheckpointError(f"checkpoint was built for {echo!r}, config requires {expected!r}")
        shapes = param_shapes(arch, obs, size)
        for name, shape in shapes.items():
            if name not in params or params[name].shape != shape:
                raise CheckpointError(f"tensor {name} shape mismatch")
    return params, echo
