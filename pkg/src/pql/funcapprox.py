"""Small numpy MLPs with hand-written reverse mode, Adam, and parameter utilities.

Parameter containers are treated as trees: an ``MlpParams``, a bare ndarray,
or a list/tuple of those. Every optimizer utility maps over the leaves, so a
critic pair and a scalar ``log_alpha`` go through the same code.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .errors import NonFiniteError

ACTIVATIONS = ("identity", "relu", "tanh", "square")


@dataclass(frozen=True)
class MlpParams:
    """Weights are stored ``(out, in)`` so a layer computes ``x @ W.T + b``."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have equal length")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match weight {w.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input size {w.shape[1]} does not chain")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays) -> MlpParams:
        arrays = list(arrays)
        return MlpParams(tuple(arrays[0::2]), tuple(arrays[1::2]), self.activations)

    def astype(self, dtype) -> MlpParams:
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])


# -- tree helpers -------------------------------------------------------------


def tree_leaves(tree) -> list[np.ndarray]:
    if isinstance(tree, MlpParams):
        return tree.arrays()
    if isinstance(tree, (list, tuple)):
        return [leaf for t in tree for leaf in tree_leaves(t)]
    return [np.asarray(tree)]


def tree_unflatten(template, leaves):
    it = iter(leaves)

    def build(t):
        if isinstance(t, MlpParams):
            return t.with_arrays([next(it) for _ in range(2 * len(t.weights))])
        if isinstance(t, (list, tuple)):
            return type(t)(build(x) for x in t)
        return next(it)

    return build(template)


def tree_map(fn, tree, *rest):
    leaves = tree_leaves(tree)
    others = [tree_leaves(r) for r in rest]
    return tree_unflatten(tree, [fn(x, *ys) for x, *ys in zip(leaves, *others)])


def zeros_like(tree):
    return tree_map(np.zeros_like, tree)


# -- construction -------------------------------------------------------------


def orthogonal(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_mlp(
    sizes,
    rng: np.random.Generator,
    hidden_activation: str = "relu",
    output_activation: str = "identity",
    hidden_gain: float = np.sqrt(2.0),
    output_gain: float = 1.0,
    dtype=np.float32,
) -> MlpParams:
    """Orthogonal weights, zero biases."""
    n_layers = len(sizes) - 1
    weights, biases, acts = [], [], []
    for i in range(n_layers):
        last = i == n_layers - 1
        w = orthogonal((sizes[i + 1], sizes[i]), output_gain if last else hidden_gain, rng)
        weights.append(w.astype(dtype))
        biases.append(np.zeros(sizes[i + 1], dtype=dtype))
        acts.append(output_activation if last else hidden_activation)
    return MlpParams(tuple(weights), tuple(biases), tuple(acts))


# -- forward / backward -------------------------------------------------------


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0)
    if name == "tanh":
        return np.tanh(z)
    if name == "square":
        return z * z
    return z


def _activation_grad(name: str, z: np.ndarray, out: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        return g * (z > 0)
    if name == "tanh":
        return g * (1 - out * out)
    if name == "square":
        return g * (2 * z)
    return g


def forward(params: MlpParams, inputs: np.ndarray, return_cache: bool = False):
    x = np.asarray(inputs, dtype=params.dtype)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ValueError(f"input shape {x.shape} does not match in_dim {params.in_dim}")
    xs, zs = [x], []
    for w, b, act in zip(params.weights, params.biases, params.activations):
        z = x @ w.T + b
        x = _activate(act, z)
        if return_cache:
            xs.append(x)
            zs.append(z)
    return (x, (xs, zs)) if return_cache else x


def backward(params: MlpParams, inputs: np.ndarray, upstream_grad: np.ndarray, cache=None):
    """Reverse-mode gradients of ``sum(upstream_grad * forward(params, inputs))``.

    Returns ``(param_grads, input_grads)``; ``param_grads`` is an ``MlpParams``.
    Pass the ``cache`` from ``forward(..., return_cache=True)`` to skip the recompute.
    """
    if cache is None:
        _, cache = forward(params, inputs, return_cache=True)
    xs, zs = cache
    g = np.asarray(upstream_grad, dtype=params.dtype)
    if g.shape != xs[-1].shape:
        raise ValueError(f"upstream grad shape {g.shape} != output shape {xs[-1].shape}")
    n = len(params.weights)
    gw, gb = [None] * n, [None] * n
    for i in reversed(range(n)):
        g = _activation_grad(params.activations[i], zs[i], xs[i + 1], g)
        gw[i] = g.T @ xs[i]
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    return MlpParams(tuple(gw), tuple(gb), params.activations), g


# -- optimisation utilities ---------------------------------------------------


@dataclass
class AdamState:
    m: Any
    v: Any
    t: int = 0

    @classmethod
    def create(cls, params) -> AdamState:
        return cls(zeros_like(params), zeros_like(params), 0)


def adam_step(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    leaves_g = tree_leaves(grads)
    for g in leaves_g:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient passed to adam_step")
    t = state.t + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(tree_leaves(params), leaves_g, tree_leaves(state.m), tree_leaves(state.v)):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        step = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        new_p.append((p - step).astype(p.dtype, copy=False))
        new_m.append(m.astype(p.dtype, copy=False))
        new_v.append(v.astype(p.dtype, copy=False))
    return (
        tree_unflatten(params, new_p),
        AdamState(tree_unflatten(params, new_m), tree_unflatten(params, new_v), t),
    )


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in tree_leaves(grads))))


def clip_global_norm(grads, max_norm: float = 0.5):
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return tree_map(lambda g: (g * scale).astype(g.dtype, copy=False), grads)


def soft_update(target, online, tau: float):
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    t_leaves, o_leaves = tree_leaves(target), tree_leaves(online)
    if [a.shape for a in t_leaves] != [a.shape for a in o_leaves]:
        raise ValueError("target and online shapes differ")
    return tree_unflatten(
        target,
        [(tau * o + (1.0 - tau) * t).astype(t.dtype, copy=False) for t, o in zip(t_leaves, o_leaves)],
    )


# -- observation normalizer ---------------------------------------------------


@dataclass(frozen=True)
class RunningNormalizer:
    count: float
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def create(cls, dim: int) -> RunningNormalizer:
        return cls(0.0, np.zeros(dim), np.zeros(dim))

    @property
    def var(self) -> np.ndarray:
        if self.count <= 0:
            return np.zeros_like(self.mean)
        return self.m2 / self.count


def normalizer_update(stats: RunningNormalizer, batch: np.ndarray) -> RunningNormalizer:
    """Merge a batch into the running moments (Chan et al. parallel update)."""
    batch = np.asarray(batch, dtype=np.float64).reshape(-1, stats.mean.shape[0])
    n_b = batch.shape[0]
    if n_b == 0:
        return stats
    mean_b = batch.mean(axis=0)
    m2_b = ((batch - mean_b) ** 2).sum(axis=0)
    n = stats.count + n_b
    delta = mean_b - stats.mean
    mean = stats.mean + delta * (n_b / n)
    m2 = stats.m2 + m2_b + delta**2 * (stats.count * n_b / n)
    return RunningNormalizer(n, mean, m2)


def normalizer_merge(a: RunningNormalizer, b: RunningNormalizer) -> RunningNormalizer:
    if b.count == 0:
        return a
    if a.count == 0:
        return b
    n = a.count + b.count
    delta = b.mean - a.mean
    return RunningNormalizer(n, a.mean + delta * (b.count / n), a.m2 + b.m2 + delta**2 * (a.count * b.count / n))


def normalizer_apply(stats: RunningNormalizer, obs: np.ndarray, clip: float = 5.0) -> np.ndarray:
    obs = np.asarray(obs)
    if stats.count <= 1:
        return obs
    dtype = obs.dtype if np.issubdtype(obs.dtype, np.floating) else np.float64
    mean = stats.mean.astype(dtype)
    inv_std = (1.0 / np.sqrt(stats.var + 1e-8)).astype(dtype)
    return np.clip((obs - mean) * inv_std, -clip, clip)


# -- checkpoints --------------------------------------------------------------

_MAGIC = b"PQLCKPT\0"
_FORMAT_VERSION = 1
_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}


def dumps_checkpoint(nets: dict[str, MlpParams], normalizer: RunningNormalizer | None = None) -> bytes:
    """Little-endian layout: header, per-net layer shapes, row-major float32 data, normalizer."""
    out = [_MAGIC, struct.pack("<II", _FORMAT_VERSION, len(nets))]
    for name, net in nets.items():
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<I", len(net.weights)))
        for w, act in zip(net.weights, net.activations):
            out.append(struct.pack("<IIB", w.shape[0], w.shape[1], _ACT_CODES[act]))
        for a in net.arrays():
            out.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    if normalizer is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<BId", 1, normalizer.mean.shape[0], normalizer.count))
        out.append(np.asarray(normalizer.mean, dtype="<f8").tobytes())
        out.append(np.asarray(normalizer.m2, dtype="<f8").tobytes())
    return b"".join(out)


def loads_checkpoint(data: bytes) -> tuple[dict[str, MlpParams], RunningNormalizer | None]:
    if data[: len(_MAGIC)] != _MAGIC:
        raise ValueError("not a checkpoint file")
    pos = len(_MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    version, n_nets = take("<II")
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    nets = {}
    for _ in range(n_nets):
        (name_len,) = take("<H")
        name = data[pos : pos + name_len].decode()
        pos += name_len
        (n_layers,) = take("<I")
        shapes = [take("<IIB") for _ in range(n_layers)]
        arrays = []
        for rows, cols, _ in shapes:
            for shape in ((rows, cols), (rows,)):
                count = int(np.prod(shape))
                arrays.append(np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32))
                pos += 4 * count
        acts = tuple(ACTIVATIONS[code] for _, _, code in shapes)
        nets[name] = MlpParams(tuple(arrays[0::2]), tuple(arrays[1::2]), acts)
    (has_norm,) = take("<B")
    normalizer = None
    if has_norm:
        dim, count = take("<Id")
        mean = np.frombuffer(data, dtype="<f8", count=dim, offset=pos).copy()
        pos += 8 * dim
        m2 = np.frombuffer(data, dtype="<f8", count=dim, offset=pos).copy()
        normalizer = RunningNormalizer(count, mean, m2)
    return nets, normalizer


def save_checkpoint(path, nets: dict[str, MlpParams], normalizer: RunningNormalizer | None = None) -> None:
    Path(path).write_bytes(dumps_checkpoint(nets, normalizer))


def load_checkpoint(path):
    return loads_checkpoint(Path(path).read_bytes())
