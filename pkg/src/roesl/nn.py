"""Small tanh MLPs with hand-written reverse mode, Adam, and a Gaussian policy head."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0
_LOG_2PI = math.log(2.0 * math.pi)


def pack_arrays(arrays, dtype=None) -> list[np.ndarray]:
    """Copies of ``arrays`` laid out back to back in one flat buffer (returned as views)."""
    dtype = np.dtype(dtype or arrays[0].dtype)
    flat = np.empty(sum(a.size for a in arrays), dtype=dtype)
    out, pos = [], 0
    for a in arrays:
        view = flat[pos:pos + a.size].reshape(a.shape)
        view[...] = a
        out.append(view)
        pos += a.size
    return out


def _address(a: np.ndarray) -> int:
    return a.__array_interface__["data"][0]


def storage(arrays: Sequence[np.ndarray]) -> Optional[np.ndarray]:
    """A 1-D view of the stretch of buffer that ``arrays`` tile exactly and in order, or None."""
    base = arrays[0].base
    if base is None or base.ndim != 1 or not base.flags.c_contiguous:
        return None
    start = pos = _address(arrays[0])
    for a in arrays:
        if a.base is not base or a.dtype != base.dtype or not a.flags.c_contiguous or _address(a) != pos:
            return None
        pos += a.nbytes
    first = (start - _address(base)) // base.itemsize
    return base[first:first + (pos - start) // base.itemsize]


@dataclass
class MlpParams:
    sizes: tuple[int, ...]
    weights: list[np.ndarray]  # each (fan_in, fan_out)
    biases: list[np.ndarray]
    output_activation: bool = False

    @classmethod
    def packed(cls, sizes, weights, biases, output_activation: bool = False, dtype=None) -> "MlpParams":
        arrs = pack_arrays([x for pair in zip(weights, biases) for x in pair], dtype)
        return cls(tuple(sizes), arrs[0::2], arrs[1::2], output_activation)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def storage(self) -> Optional[np.ndarray]:
        return storage(self.arrays())

    def copy(self) -> "MlpParams":
        return MlpParams.packed(self.sizes, self.weights, self.biases, self.output_activation)

    def astype(self, dtype) -> "MlpParams":
        return MlpParams.packed(self.sizes, self.weights, self.biases, self.output_activation, dtype)

    @property
    def dtype(self):
        return self.weights[0].dtype

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for a in self.arrays():
            a[...] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, out_scale: float = 1.0,
             output_activation: bool = False, dtype=np.float64) -> MlpParams:
    sizes = tuple(int(s) for s in sizes)
    weights, biases = [], []
    for li, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = math.sqrt(1.0 / a)
        if li == len(sizes) - 2:
            scale *= out_scale
        weights.append(rng.normal(0.0, scale, size=(a, b)))
        biases.append(np.zeros(b))
    return MlpParams.packed(sizes, weights, biases, output_activation, dtype)


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=params.weights[0].dtype)
    if x.shape[-1] != params.sizes[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match layer size {params.sizes[0]}")
    return x


def mlp_forward(params: MlpParams, x, cache: bool = False):
    x = _check_input(params, x)
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for li, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w
        h += b
        if li < last or params.output_activation:
            np.tanh(h, out=h)
        acts.append(h)
    return (h, acts) if cache else h


def mlp_backward(params: MlpParams, acts: list[np.ndarray], upstream: np.ndarray, input_grad: bool = True):
    """Gradients of sum(output * upstream) given the cached activations.

    Returns (weight grads, bias grads, input grad); the input grad is None
    when ``input_grad`` is False.
    """
    g = np.asarray(upstream, dtype=acts[-1].dtype)
    if g.shape != acts[-1].shape:
        raise ValueError(f"upstream shape {g.shape} does not match output shape {acts[-1].shape}")
    last = len(params.weights) - 1
    gw: list[np.ndarray] = [None] * len(params.weights)
    gb: list[np.ndarray] = [None] * len(params.weights)
    for li in range(last, -1, -1):
        if li < last or params.output_activation:
            d = np.square(acts[li + 1])
            np.subtract(1.0, d, out=d)
            d *= g
            g = d
        inp = acts[li]
        if inp.ndim == 1:
            gw[li] = np.outer(inp, g)
            gb[li] = g.copy()
        else:
            gw[li] = inp.T @ g
            gb[li] = np.add.reduce(g, axis=0)
        if li > 0 or input_grad:
            g = g @ params.weights[li].T
    return gw, gb, (g if input_grad else None)


def mlp_grad(params: MlpParams, x, upstream):
    """Exact gradients of ``output . upstream`` w.r.t. weights and biases."""
    _, acts = mlp_forward(params, x, cache=True)
    gw, gb, _ = mlp_backward(params, acts, upstream, input_grad=False)
    return gw, gb


class Adam:
    """Adam over a list of arrays.

    Arrays that tile one flat buffer (see :meth:`MlpParams.packed`) are updated
    as a single vector; the arithmetic is elementwise, so grouping does not
    change the result.
    """

    def __init__(self, arrays: list[np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.arrays = arrays
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.groups = []  # (start, stop, update target)
        i = 0
        while i < len(arrays):
            j = len(arrays)
            while j > i + 1 and storage(arrays[i:j]) is None:
                j -= 1
            buf = storage(arrays[i:j]) if j > i + 1 else None
            self.groups.append((i, j, buf if buf is not None else arrays[i]))
            i = j
        self.m = [np.zeros_like(t) for *_, t in self.groups]
        self.v = [np.zeros_like(t) for *_, t in self.groups]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        if self.lr == 0.0:
            return
        if len(grads) != len(self.arrays):
            raise ValueError(f"expected {len(self.arrays)} gradients, got {len(grads)}")
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        # bias corrections folded into the step size and epsilon
        step = self.lr * math.sqrt(c2) / c1
        eps = self.eps * math.sqrt(c2)
        for (i, j, a), m, v in zip(self.groups, self.m, self.v):
            g = grads[i] if j == i + 1 else np.concatenate([x.ravel() for x in grads[i:j]])
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            denom = np.sqrt(v)
            denom += eps
            upd = m / denom
            upd *= step
            a -= upd


@dataclass
class GaussianPolicy:
    mean: MlpParams
    log_std: np.ndarray

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.mean.copy(), self.log_std.copy())

    def astype(self, dtype) -> "GaussianPolicy":
        return GaussianPolicy(self.mean.astype(dtype), self.log_std.astype(dtype))

    def arrays(self) -> list[np.ndarray]:
        return self.mean.arrays() + [self.log_std]

    def clamp(self) -> None:
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def act(self, obs: np.ndarray) -> np.ndarray:
        """Deterministic action (the clamped mean)."""
        return np.clip(mlp_forward(self.mean, np.atleast_2d(obs)), -1.0, 1.0)

    __call__ = act

    def sample(self, obs: np.ndarray, rng: np.random.Generator):
        mu = mlp_forward(self.mean, obs)
        raw = mu + np.exp(self.log_std) * rng.standard_normal(mu.shape)
        return raw, gaussian_log_prob(mu, self.log_std, raw)

    def entropy(self) -> float:
        return float(np.sum(self.log_std + 0.5 * (_LOG_2PI + 1.0)))


def gaussian_log_prob(mu: np.ndarray, log_std: np.ndarray, x: np.ndarray) -> np.ndarray:
    z = (x - mu) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mu.shape[-1] * _LOG_2PI


def init_policy(obs_dim: int, act_dim: int, hidden: Sequence[int], rng: np.random.Generator,
                log_std: float = -0.5, dtype=np.float64) -> GaussianPolicy:
    mean = init_mlp((obs_dim, *hidden, act_dim), rng, out_scale=0.01, dtype=dtype)
    return GaussianPolicy(mean, np.full(act_dim, float(log_std), dtype=dtype))


# ---------------------------------------------------------------- checkpoints

MAGIC = b"ROESLCKP"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_policy(policy: GaussianPolicy) -> bytes:
    sizes = policy.mean.sizes
    head = MAGIC + struct.pack("<HH", CKPT_VERSION, len(sizes))
    head += struct.pack(f"<{len(sizes)}I", *sizes)
    head += struct.pack("<I", policy.log_std.size)
    body = np.concatenate([policy.mean.flat(), policy.log_std]).astype("<f8").tobytes()
    return head + body


def decode_policy(blob: bytes, expected_sizes: Optional[Sequence[int]] = None) -> GaussianPolicy:
    """Inverse of :func:`encode_policy`; parameters come back as float64."""
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version, n = struct.unpack_from("<HH", blob, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    sizes = struct.unpack_from(f"<{n}I", blob, off)
    off += 4 * n
    (n_std,) = struct.unpack_from("<I", blob, off)
    off += 4
    if expected_sizes is not None and tuple(expected_sizes) != tuple(sizes):
        raise CheckpointError(
            f"checkpoint layer sizes {list(sizes)} do not match configured {list(expected_sizes)}")
    mean = MlpParams.packed(sizes, [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                            [np.zeros(b) for b in sizes[1:]])
    values = np.frombuffer(blob, dtype="<f8", offset=off).astype(float)
    if values.size != mean.num_params() + n_std:
        raise CheckpointError("checkpoint payload length does not match its layer table")
    mean.set_flat(values[:mean.num_params()])
    return GaussianPolicy(mean, values[mean.num_params():].copy())


def save_policy(policy: GaussianPolicy, path, meta: Optional[dict] = None) -> None:
    path = Path(path)
    path.write_bytes(encode_policy(policy))
    if meta is not None:
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_policy(path, expected_sizes: Optional[Sequence[int]] = None) -> GaussianPolicy:
    return decode_policy(Path(path).read_bytes(), expected_sizes)
