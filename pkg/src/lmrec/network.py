"""MLP trunk + embedding layer (FC + batch norm) + linear classifier, in numpy.

Parameters live in a flat ``{name: array}`` dict so optimisers, gradient
checks and the checkpoint codec can treat them uniformly. Names are prefixed
by the part they belong to: ``trunk.``, ``embed.`` (FC and batch norm) and
``cls.``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .data import CodecError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PARTS = ("trunk", "embed", "cls")

_ACTIVATIONS = ("relu", "leaky_relu", "elu", "identity")


def part_of(name: str) -> str:
    return name.split(".", 1)[0]


def is_batchnorm(name: str) -> bool:
    return name.startswith("embed.bn_")


@dataclass
class NetworkState:
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]
    n_trunk: int
    activation: str = "relu"
    use_batchnorm: bool = True

    @property
    def d_in(self) -> int:
        key = "trunk.0.W" if self.n_trunk else "embed.W"
        return self.params[key].shape[0]

    @property
    def dim(self) -> int:
        return self.params["embed.W"].shape[1]

    @property
    def n_outputs(self) -> int:
        return self.params["cls.W"].shape[1]

    def copy(self) -> "NetworkState":
        return NetworkState(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.n_trunk,
            self.activation,
            self.use_batchnorm,
        )


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)


def fresh_batchnorm(dim: int) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    params = {"embed.bn_gamma": np.ones(dim), "embed.bn_beta": np.zeros(dim)}
    buffers = {"embed.bn_mean": np.zeros(dim), "embed.bn_var": np.ones(dim)}
    return params, buffers


def fresh_classifier(rng: np.random.Generator, dim: int, n_outputs: int) -> Dict[str, np.ndarray]:
    W, b = _uniform_fan_in(rng, dim, n_outputs)
    return {"cls.W": W, "cls.b": b}


def init_network(
    rng: np.random.Generator,
    d_in: int,
    hidden: Sequence[int],
    dim: int,
    n_outputs: int,
    activation: str = "relu",
    use_batchnorm: bool = True,
) -> NetworkState:
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    params: Dict[str, np.ndarray] = {}
    width = d_in
    for i, h in enumerate(hidden):
        params[f"trunk.{i}.W"], params[f"trunk.{i}.b"] = _uniform_fan_in(rng, width, h)
        width = h
    params["embed.W"], params["embed.b"] = _uniform_fan_in(rng, width, dim)
    bn_params, buffers = fresh_batchnorm(dim)
    params.update(bn_params)
    params.update(fresh_classifier(rng, dim, n_outputs))
    return NetworkState(params, buffers, len(hidden), activation, use_batchnorm)


def init_centers(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    return 0.01 * rng.standard_normal((n, dim))


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "leaky_relu":
        return np.where(z > 0, z, 0.01 * z)
    if name == "elu":
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    return z


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "leaky_relu":
        return np.where(z > 0, 1.0, 0.01)
    if name == "elu":
        return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))
    return np.ones_like(z)


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)  # input to each trunk layer
    preacts: list = field(default_factory=list)
    h: Optional[np.ndarray] = None  # trunk output
    z: Optional[np.ndarray] = None  # embedding FC output
    xhat: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    batch_mean: Optional[np.ndarray] = None
    batch_var: Optional[np.ndarray] = None


def forward(net: NetworkState, X: np.ndarray, train: bool = False):
    """Return ``(embeddings, logits, cache)``.

    Train mode normalises with batch statistics (needs >= 2 rows); eval mode
    uses the running statistics. Running statistics are not touched here, see
    :func:`update_running_stats`.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("forward expects a non-empty 2-D batch")
    if X.shape[1] != net.d_in:
        raise ValueError(f"expected {net.d_in} input features, got {X.shape[1]}")
    p = net.params
    cache = ForwardCache()
    h = X
    for i in range(net.n_trunk):
        cache.inputs.append(h)
        a = h @ p[f"trunk.{i}.W"] + p[f"trunk.{i}.b"]
        cache.preacts.append(a)
        h = _act(net.activation, a)
    cache.h = h
    z = h @ p["embed.W"] + p["embed.b"]
    cache.z = z
    if not net.use_batchnorm:
        x = z
    else:
        if train:
            if X.shape[0] < 2:
                raise ValueError("train-mode batch norm needs a batch of at least 2")
            mean, var = z.mean(axis=0), z.var(axis=0)
            cache.batch_mean, cache.batch_var = mean, var
        else:
            mean, var = net.buffers["embed.bn_mean"], net.buffers["embed.bn_var"]
        std = np.sqrt(var + BN_EPS)
        xhat = (z - mean) / std
        cache.xhat, cache.std = xhat, std
        x = p["embed.bn_gamma"] * xhat + p["embed.bn_beta"]
    logits = x @ p["cls.W"] + p["cls.b"]
    return x, logits, cache


def update_running_stats(net: NetworkState, cache: ForwardCache) -> None:
    if cache.batch_mean is None:
        return
    m = cache.z.shape[0]
    unbiased = cache.batch_var * m / (m - 1)
    b = net.buffers
    b["embed.bn_mean"] = (1 - BN_MOMENTUM) * b["embed.bn_mean"] + BN_MOMENTUM * cache.batch_mean
    b["embed.bn_var"] = (1 - BN_MOMENTUM) * b["embed.bn_var"] + BN_MOMENTUM * unbiased


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def center_term(embeddings: np.ndarray, y: np.ndarray, centers: np.ndarray) -> float:
    """Sum of squared distances to the class center over landmark rows only (before ``lam / 2``)."""
    y = np.asarray(y, dtype=np.int64)
    landmark = y <= centers.shape[0]
    diff = np.asarray(embeddings, dtype=np.float64)[landmark] - centers[y[landmark] - 1]
    return float(np.sum(diff * diff))


@dataclass
class LossResult:
    total: float
    ce: float
    center: float  # sum of squared distances to centers, before the lambda/2 factor
    grads: Dict[str, np.ndarray]
    d_embeddings: np.ndarray
    embeddings: np.ndarray
    logits: np.ndarray
    cache: ForwardCache


def loss_and_gradients(
    net: NetworkState, centers: np.ndarray, X: np.ndarray, y: np.ndarray, lam: float
) -> LossResult:
    """Summed softmax cross-entropy plus center term over landmark samples only.

    ``y`` holds 1-based labels; label ``n + 1`` (the last classifier column) is
    the non-landmark class and never contributes to the center term. Centers
    are constants here.
    """
    y = np.asarray(y, dtype=np.int64)
    n_out = net.n_outputs
    n = n_out - 1
    if centers.shape != (n, net.dim):
        raise ValueError(f"centers must have shape {(n, net.dim)}, got {centers.shape}")
    if y.size and (y.min() < 1 or y.max() > n_out):
        raise ValueError(f"labels must lie in [1, {n_out}]")

    x, logits, cache = forward(net, X, train=True)
    m = x.shape[0]
    rows = np.arange(m)
    idx = y - 1
    logp = _log_softmax(logits)
    ce = -float(logp[rows, idx].sum())

    landmark = y <= n
    diff = np.zeros_like(x)
    diff[landmark] = x[landmark] - centers[idx[landmark]]
    center = center_term(x, y, centers)
    total = ce + 0.5 * lam * center

    p = net.params
    grads: Dict[str, np.ndarray] = {}
    dlogits = np.exp(logp)
    dlogits[rows, idx] -= 1.0
    grads["cls.W"] = x.T @ dlogits
    grads["cls.b"] = dlogits.sum(axis=0)
    dx = dlogits @ p["cls.W"].T + lam * diff

    if net.use_batchnorm:
        xhat, std = cache.xhat, cache.std
        gamma = p["embed.bn_gamma"]
        grads["embed.bn_gamma"] = np.sum(dx * xhat, axis=0)
        grads["embed.bn_beta"] = dx.sum(axis=0)
        dxhat = dx * gamma
        dz = (m * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0)) / (m * std)
    else:
        grads["embed.bn_gamma"] = np.zeros_like(p["embed.bn_gamma"])
        grads["embed.bn_beta"] = np.zeros_like(p["embed.bn_beta"])
        dz = dx
    grads["embed.W"] = cache.h.T @ dz
    grads["embed.b"] = dz.sum(axis=0)
    dh = dz @ p["embed.W"].T
    for i in reversed(range(net.n_trunk)):
        da = dh * _act_grad(net.activation, cache.preacts[i])
        grads[f"trunk.{i}.W"] = cache.inputs[i].T @ da
        grads[f"trunk.{i}.b"] = da.sum(axis=0)
        dh = da @ p[f"trunk.{i}.W"].T
    return LossResult(total, ce, center, grads, dx, x, logits, cache)


def update_centers(centers: np.ndarray, embeddings: np.ndarray, y: np.ndarray, center_lr: float) -> np.ndarray:
    """Standard center-loss update; the non-landmark label and absent classes stay put.

    ``delta_j = sum_{y_i = j} (c_j - x_i) / (1 + count_j)``; ``c_j -= center_lr * delta_j``.
    """
    n = centers.shape[0]
    y = np.asarray(y, dtype=np.int64)
    landmark = y <= n
    idx = y[landmark] - 1
    x = np.asarray(embeddings, dtype=np.float64)[landmark]
    counts = np.bincount(idx, minlength=n).astype(np.float64)
    sums = np.zeros_like(centers, dtype=np.float64)
    np.add.at(sums, idx, x)
    delta = (counts[:, None] * centers - sums) / (1.0 + counts[:, None])
    return centers - center_lr * delta


class MomentumSGD:
    """SGD with momentum and L2 weight decay, one learning rate per network part.

    ``buf = momentum * buf + grad + weight_decay * param``; ``param -= lr * buf``.
    Batch-norm parameters are exempt from weight decay.
    """

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: Dict[str, np.ndarray] = {}

    def reset(self) -> None:
        self.buffers.clear()

    def step(self, net: NetworkState, grads: Dict[str, np.ndarray], lrs: Dict[str, float]) -> None:
        for name, param in net.params.items():
            g = grads[name]
            if g.shape != param.shape:
                raise ValueError(f"gradient shape {g.shape} does not match {name} {param.shape}")
            if self.weight_decay and not is_batchnorm(name):
                g = g + self.weight_decay * param
            buf = self.buffers.get(name)
            buf = g.copy() if buf is None else self.momentum * buf + g
            self.buffers[name] = buf
            net.params[name] = param - lrs[part_of(name)] * buf


def sgd_step(net, grads, lrs, momentum, weight_decay, state: Optional[Dict[str, np.ndarray]] = None):
    """Functional form of :class:`MomentumSGD`; ``state`` holds the velocity buffers."""
    opt = MomentumSGD(momentum, weight_decay)
    if state is not None:
        opt.buffers = state
    opt.step(net, grads, lrs)
    return net, opt.buffers


def lr_multiplier(epoch: int, epochs: int, milestones: Sequence[float] = (0.4, 0.8), decay: float = 0.1) -> float:
    """Step schedule: multiply by ``decay`` once the epoch passes each milestone fraction."""
    passed = sum(1 for f in milestones if epoch >= np.ceil(f * epochs - 1e-9))
    return decay ** passed


# ---------------------------------------------------------------------------
# checkpoint file: "LMCK", u32 version, u32 n_trunk, u32 flags, activation,
# u32 array count, then per array: name, u32 ndim, u32 dims..., f32 payload

CHECKPOINT_MAGIC = b"LMCK"
CHECKPOINT_VERSION = 1


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(path: str | os.PathLike, net: NetworkState, centers: np.ndarray,
                    class_ids: Optional[np.ndarray] = None) -> None:
    arrays = {f"param:{k}": v for k, v in net.params.items()}
    arrays.update({f"buffer:{k}": v for k, v in net.buffers.items()})
    arrays["centers"] = centers
    if class_ids is not None:
        arrays["class_ids"] = np.asarray(class_ids, dtype=np.float64)
    out = [CHECKPOINT_MAGIC, struct.pack("<III", CHECKPOINT_VERSION, net.n_trunk, int(net.use_batchnorm))]
    out.append(_pack_str(net.activation))
    out.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        out.append(_pack_str(name))
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.off = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise CodecError(f"truncated checkpoint while reading {what}")
        chunk = self.buf[self.off:self.off + n]
        self.off += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what: str) -> str:
        return self.take(self.u32(what), what).decode("utf-8")


def load_checkpoint(path: str | os.PathLike):
    """Return ``(net, centers, class_ids or None)``; arrays come back as float64."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CodecError("bad magic")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CodecError(f"unsupported version {version}")
    n_trunk = r.u32("n_trunk")
    use_bn = bool(r.u32("flags"))
    activation = r.string("activation")
    params, buffers, extra = {}, {}, {}
    for _ in range(r.u32("array count")):
        name = r.string("array name")
        ndim = r.u32(f"{name} ndim")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"{name} shape"))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * size, name), dtype="<f4").reshape(shape).astype(np.float64)
        kind, _, key = name.partition(":")
        if kind == "param":
            params[key] = arr
        elif kind == "buffer":
            buffers[key] = arr
        else:
            extra[name] = arr
    if r.off != len(r.buf):
        raise CodecError("trailing bytes after checkpoint payload")
    if "centers" not in extra:
        raise CodecError("checkpoint has no centers")
    net = NetworkState(params, buffers, n_trunk, activation, use_bn)
    class_ids = extra.get("class_ids")
    return net, extra["centers"], None if class_ids is None else class_ids.astype(np.int64)
