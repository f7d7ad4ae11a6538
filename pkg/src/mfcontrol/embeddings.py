"""Distribution summaries and their wiring into the embedding network.

A particle batch is condensed into a fixed-size summary (raw positions,
truncated empirical moments, or a histogram over a hypercube) which an
embedding network maps to a short vector consumed by the control network.

Gradient semantics: moments and raw positions are differentiable in the
particle states (moments away from the clip boundary); histogram counts are
piecewise constant in the states, so they are treated as constants during
backpropagation and only the embedding-network parameters receive gradients
on that path.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import networks as nets
from .autodiff import Tensor

KINDS = ("empirical", "moments", "histogram")
ARCHS = ("ffnn", "cnn", "symmetric")

_COMPATIBLE = {
    "empirical": ("ffnn", "symmetric"),
    "moments": ("ffnn",),
    "histogram": ("ffnn", "cnn"),
}


class EmbeddingError(Exception):
    pass


@dataclass(frozen=True)
class EmbeddingConfig:
    kind: str
    arch: str
    out_dim: int = 5
    # moments
    nmom: int = 1
    clip_bound: float = 10.0
    # histogram
    nbin: int = 5
    center: tuple[float, ...] = (0.0,)
    side: float = 8.0
    overflow_bin: bool = False
    normalize_counts: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise EmbeddingError(f"unknown summary kind {self.kind!r}")
        if self.arch not in _COMPATIBLE[self.kind]:
            raise EmbeddingError(
                f"summary {self.kind!r} cannot feed a {self.arch!r} network; "
                f"valid: {_COMPATIBLE[self.kind]}")
        if self.nmom < 1 or self.nbin < 1 or self.side <= 0 or self.clip_bound <= 0:
            raise EmbeddingError("nmom, nbin must be >= 1 and side, clip bound > 0")
        if self.kind == "histogram" and self.arch == "cnn" and self.overflow_bin:
            raise EmbeddingError("the conv path keeps the grid geometry; "
                                 "overflow_bin requires the ffnn path")

    def for_dim(self, d: int) -> "EmbeddingConfig":
        if len(self.center) == d:
            return self
        return replace(self, center=tuple(self.center[0] for _ in range(d)))


def input_dim(cfg: EmbeddingConfig, n_particles: int, d: int):
    """Width (or spatial shape) of the summary fed to the embedding net."""
    if cfg.kind == "empirical":
        return d if cfg.arch == "symmetric" else n_particles * d
    if cfg.kind == "moments":
        return d * cfg.nmom
    cells = cfg.nbin ** d
    if cfg.arch == "cnn":
        return (cfg.nbin,) if d == 1 else (cfg.nbin, cfg.nbin)
    return cells + (1 if cfg.overflow_bin else 0)


# ---------------------------------------------------------------------------
# summaries


def empirical_summary(batch: Tensor, flatten: bool) -> Tensor:
    """Identity on the particle matrix; flattened to one row for the ffnn path."""
    if batch.shape[0] < 1:
        raise EmbeddingError("empty particle batch")
    if flatten:
        return ad.reshape(batch, (1, batch.size))
    return batch


def moment_summary(batch: Tensor, nmom: int, clip_bound: float) -> Tensor:
    """Per-dimension empirical moments of the clamped states, powers 1..nmom.

    Returns a (1, d*nmom) row, ordered mean block first, then squares, etc.
    The forward averages run in canonical order, so the summary is bitwise
    permutation invariant.
    """
    if nmom < 1:
        raise EmbeddingError("nmom must be >= 1")
    clamped = ad.clip(batch, -clip_bound, clip_bound)
    blocks = []
    powed = clamped
    for k in range(1, nmom + 1):
        powed = clamped if k == 1 else ad.pow_int(clamped, k)
        m = ad.mean_axis(powed, 0, canonical_order=True)
        blocks.append(ad.reshape(m, (1, m.size)))
    if len(blocks) == 1:
        return blocks[0]
    return ad.concat_cols(blocks)


def histogram_counts(states: np.ndarray, cfg: EmbeddingConfig) -> np.ndarray:
    """Bin a raw (N, d) state array on the uniform hypercube grid.

    Intervals are right-open except the last, which is closed. Points outside
    the hypercube go to the extra overflow cell when enabled, else they are
    clamped to the edge bins, so interior (+ overflow) counts always sum to N.
    Returns float64 counts, flat (nbin**d [+1],) vector, row-major cell order;
    optionally divided by N.
    """
    n, d = states.shape
    cfg = cfg.for_dim(d)
    lo = np.asarray(cfg.center) - cfg.side / 2.0
    width = cfg.side / cfg.nbin
    idx = np.floor((states - lo) / width).astype(np.int64)
    # the closed right edge of the last bin
    on_hi = states == (lo + cfg.side)
    idx[on_hi] = cfg.nbin - 1
    outside = (idx < 0) | (idx >= cfg.nbin)
    if cfg.overflow_bin:
        out_rows = outside.any(axis=1)
        idx = np.clip(idx, 0, cfg.nbin - 1)
        flat = np.zeros(n, dtype=np.int64)
        for j in range(d):
            flat = flat * cfg.nbin + idx[:, j]
        flat[out_rows] = cfg.nbin ** d  # overflow cell
        counts = np.bincount(flat, minlength=cfg.nbin ** d + 1).astype(np.float64)
    else:
        idx = np.clip(idx, 0, cfg.nbin - 1)
        flat = np.zeros(n, dtype=np.int64)
        for j in range(d):
            flat = flat * cfg.nbin + idx[:, j]
        counts = np.bincount(flat, minlength=cfg.nbin ** d).astype(np.float64)
    if cfg.normalize_counts:
        counts = counts / n
    return counts


def histogram_summary(batch: Tensor, cfg: EmbeddingConfig) -> Tensor:
    """Histogram of the batch as a constant tensor (no state gradient)."""
    if batch.shape[0] < 1:
        raise EmbeddingError("empty particle batch")
    counts = histogram_counts(batch.value, cfg)
    d = batch.shape[1]
    if cfg.arch == "cnn":
        shape = (cfg.nbin, 1) if d == 1 else (cfg.nbin, cfg.nbin, 1)
        return batch.tape.tensor(counts.reshape(shape))
    return batch.tape.tensor(counts.reshape(1, -1))


# ---------------------------------------------------------------------------
# summary -> embedding vector


def embed(cfg: EmbeddingConfig, net, batch: Tensor) -> Tensor:
    """Map a particle batch to the (1, out_dim) embedding row.

    `net` holds the embedding network's registered parameter tensors, as
    produced by `register` below.
    """
    if cfg.kind == "histogram":
        summary = histogram_summary(batch, cfg)
        if cfg.arch == "cnn":
            return nets.conv_net_forward(net["convs"], net["head"], summary)
        return nets.mlp_forward(net["layers"], summary)
    if cfg.kind == "moments":
        return nets.mlp_forward(net["layers"], moment_summary(batch, cfg.nmom, cfg.clip_bound))
    if cfg.arch == "symmetric":
        return nets.symmetric_forward(net["inner"], net["outer"],
                                      empirical_summary(batch, flatten=False))
    return nets.mlp_forward(net["layers"], empirical_summary(batch, flatten=True))


def register(net, tape: ad.Tape) -> dict:
    """Lift a network's parameter arrays onto a tape, keeping the layout."""
    if isinstance(net, nets.Mlp):
        return {"layers": [(tape.tensor(l.w), tape.tensor(l.b)) for l in net.layers]}
    if isinstance(net, nets.ConvNet):
        return {"convs": [(tape.tensor(c.k), tape.tensor(c.b)) for c in net.convs],
                "head": [(tape.tensor(l.w), tape.tensor(l.b)) for l in net.head]}
    if isinstance(net, nets.SymmetricNet):
        return {"inner": [(tape.tensor(l.w), tape.tensor(l.b)) for l in net.inner],
                "outer": (tape.tensor(net.outer.w), tape.tensor(net.outer.b))}
    raise EmbeddingError(f"cannot register {type(net).__name__}")
