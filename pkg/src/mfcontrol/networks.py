"""Network architectures, initialization, the Adam optimizer, and snapshots.

Three embedding-network shapes are supported: a plain feed-forward stack, a
convolutional stack for histogram inputs, and a permutation-invariant network
that averages per-particle features before a linear readout. Control networks
are feed-forward stacks, one per control dimension.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SNAPSHOT_FORMAT = 1


class NetworkError(Exception):
    pass


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class Dense:
    w: np.ndarray  # (in, out)
    b: np.ndarray  # (out,)


@dataclass
class Conv:
    k: np.ndarray  # (K, Ci, Co) or (Kh, Kw, Ci, Co)
    b: np.ndarray  # (Co,)


@dataclass
class Mlp:
    """Sigmoid hidden stack with a linear output layer."""
    layers: list[Dense]

    @property
    def in_dim(self):
        return self.layers[0].w.shape[0]

    @property
    def out_dim(self):
        return self.layers[-1].w.shape[1]


@dataclass
class ConvNet:
    """Sigmoid conv stack -> flatten -> sigmoid dense -> linear output."""
    convs: list[Conv]
    head: list[Dense]
    input_shape: tuple[int, ...]  # spatial extents, single input channel


@dataclass
class SymmetricNet:
    """Per-particle sigmoid stack, averaged over particles, linear readout."""
    inner: list[Dense]
    outer: Dense


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


# ---------------------------------------------------------------------------
# initialization


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_mlp(in_dim: int, hidden: tuple[int, ...], out_dim: int,
             rng: np.random.Generator) -> Mlp:
    widths = [in_dim, *hidden, out_dim]
    layers = []
    for i, o in zip(widths[:-1], widths[1:]):
        layers.append(Dense(_glorot(rng, i, o, (i, o)), np.zeros(o)))
    return Mlp(layers)


def init_conv_net(input_shape: tuple[int, ...], kernels: tuple, channels: int,
                  dense: int, out_dim: int, rng: np.random.Generator) -> ConvNet:
    """kernels: ints for 1-d input, (h, w) pairs for 2-d input."""
    spatial = list(input_shape)
    convs = []
    ci = 1
    for kern in kernels:
        if len(spatial) == 1:
            kk = int(kern)
            if kk > spatial[0]:
                raise NetworkError(f"kernel {kk} exceeds spatial extent {spatial[0]}")
            fan = kk
            shape = (kk, ci, channels)
            spatial[0] = spatial[0] - kk + 1
        else:
            kh, kw = (int(kern[0]), int(kern[1])) if np.iterable(kern) else (int(kern),) * 2
            if kh > spatial[0] or kw > spatial[1]:
                raise NetworkError(f"kernel {(kh, kw)} exceeds spatial extent {tuple(spatial)}")
            fan = kh * kw
            shape = (kh, kw, ci, channels)
            spatial = [spatial[0] - kh + 1, spatial[1] - kw + 1]
        convs.append(Conv(_glorot(rng, fan * ci, fan * channels, shape), np.zeros(channels)))
        ci = channels
    flat = int(np.prod(spatial)) * channels
    head = [
        Dense(_glorot(rng, flat, dense, (flat, dense)), np.zeros(dense)),
        Dense(_glorot(rng, dense, out_dim, (dense, out_dim)), np.zeros(out_dim)),
    ]
    return ConvNet(convs, head, tuple(input_shape))


def init_symmetric(in_dim: int, hidden: tuple[int, ...], out_dim: int,
                   rng: np.random.Generator) -> SymmetricNet:
    if not hidden:
        raise NetworkError("symmetric net needs at least one hidden layer")
    widths = [in_dim, *hidden]
    inner = []
    for i, o in zip(widths[:-1], widths[1:]):
        inner.append(Dense(_glorot(rng, i, o, (i, o)), np.zeros(o)))
    feat = widths[-1]
    outer = Dense(_glorot(rng, feat, out_dim, (feat, out_dim)), np.zeros(out_dim))
    return SymmetricNet(inner, outer)


# ---------------------------------------------------------------------------
# forward passes (tape-level: parameters arrive as registered Tensors)


def mlp_forward(layers: list[tuple[Tensor, Tensor]], x: Tensor) -> Tensor:
    """x: (n, in_dim) -> (n, out_dim); sigmoid hiddens, linear last layer."""
    return ad.dense_chain(x, layers)


def conv_net_forward(convs: list[tuple[Tensor, Tensor]],
                     head: list[tuple[Tensor, Tensor]], x: Tensor) -> Tensor:
    """x: (L, 1) or (H, W, 1) histogram -> (1, out_dim)."""
    h = x
    for k, b in convs:
        if x.value.ndim == 2:
            h = ad.conv1d(h, k, b, "sigmoid")
        else:
            h = ad.conv2d(h, k, b, "sigmoid")
    flat = ad.reshape(h, (1, h.size))
    return mlp_forward(head, flat)


def symmetric_forward(inner: list[tuple[Tensor, Tensor]], outer: tuple[Tensor, Tensor],
                      batch: Tensor) -> Tensor:
    """batch: (N, d) particle positions -> (1, out_dim), permutation invariant.

    Per-particle features are averaged in a canonical (sorted) order so that
    permuting rows reproduces the output to within summation roundoff.
    """
    if batch.shape[0] < 1:
        raise NetworkError("symmetric_forward needs at least one particle")
    h = ad.dense_chain(batch, inner, final_linear=False)
    pooled = ad.mean_axis(h, 0)
    row = ad.reshape(pooled, (1, pooled.size))
    w, b = outer
    return ad.affine(row, w, b, "linear")


# ---------------------------------------------------------------------------
# flat parameter views (training, snapshots, finite differences)


def named_arrays(net, prefix: str) -> list[tuple[str, np.ndarray]]:
    out = []
    if isinstance(net, Mlp):
        for i, lay in enumerate(net.layers):
            out += [(f"{prefix}.l{i}.w", lay.w), (f"{prefix}.l{i}.b", lay.b)]
    elif isinstance(net, ConvNet):
        for i, c in enumerate(net.convs):
            out += [(f"{prefix}.c{i}.k", c.k), (f"{prefix}.c{i}.b", c.b)]
        for i, lay in enumerate(net.head):
            out += [(f"{prefix}.h{i}.w", lay.w), (f"{prefix}.h{i}.b", lay.b)]
    elif isinstance(net, SymmetricNet):
        for i, lay in enumerate(net.inner):
            out += [(f"{prefix}.i{i}.w", lay.w), (f"{prefix}.i{i}.b", lay.b)]
        out += [(f"{prefix}.o.w", net.outer.w), (f"{prefix}.o.b", net.outer.b)]
    else:
        raise NetworkError(f"unknown network container {type(net).__name__}")
    return out


def set_arrays(net, prefix: str, values: dict[str, np.ndarray]) -> None:
    for name, arr in named_arrays(net, prefix):
        src = values[name]
        if src.shape != arr.shape:
            raise NetworkError(f"{name}: snapshot shape {src.shape} != {arr.shape}")
        arr[...] = src


# ---------------------------------------------------------------------------
# Adam


def adam_init(arrays: list[np.ndarray], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
                     m=[np.zeros_like(a) for a in arrays],
                     v=[np.zeros_like(a) for a in arrays])


def adam_step(named: list[tuple[str, np.ndarray]], grads: list[np.ndarray],
              state: AdamState, lr: float | None = None) -> None:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    if len(named) != len(grads):
        raise NetworkError("adam_step: parameter/gradient count mismatch")
    if lr is not None:
        state.lr = lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, ((name, p), g) in enumerate(zip(named, grads)):
        if g is None:
            g = np.zeros_like(p)
        if np.isnan(g).any():
            raise NetworkError(f"adam_step: NaN gradient in block {name}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)


def sgd_step(named: list[tuple[str, np.ndarray]], grads: list[np.ndarray],
             lr: float) -> None:
    """Plain gradient step, available behind a config switch."""
    for (name, p), g in zip(named, grads):
        if g is None:
            continue
        if np.isnan(g).any():
            raise NetworkError(f"sgd_step: NaN gradient in block {name}")
        p -= lr * g


# ---------------------------------------------------------------------------
# snapshots


def save_arrays(path, named: list[tuple[str, np.ndarray]], meta: dict) -> None:
    header = dict(meta)
    header["format"] = SNAPSHOT_FORMAT
    payload = {name.replace(".", "__"): arr for name, arr in named}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        buf = io.BytesIO()
        np.savez(buf, **payload)
        fh.write(buf.getvalue())


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("format") != SNAPSHOT_FORMAT:
            raise NetworkError(f"unsupported snapshot format {header.get('format')}")
        data = np.load(io.BytesIO(fh.read()))
        values = {k.replace("__", "."): data[k] for k in data.files}
    return header, values
