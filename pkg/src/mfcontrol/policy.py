"""Feedback policies: network-based (population-dependent or state-only)
and closed-form linear-in-deviation policies used as references.

A policy exposes `actions(tape, t, states) -> (actions, embedding)` where
states is the (N, d) batch tensor and actions is (N, k). Network policies
register their parameters on the rollout tape once per rollout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import embeddings as emb
from . import networks as nets
from .autodiff import Tensor


@dataclass
class PolicyParams:
    """Weights of the control networks and the embedding network.

    control: one feed-forward net per control dimension (input 1 + d + m, or
    1 + d without an embedding); embed_net is None for state-only policies.
    """
    control: list[nets.Mlp]
    embed_net: object | None
    embed_cfg: emb.EmbeddingConfig | None
    d: int
    k: int

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for j, net in enumerate(self.control):
            out += nets.named_arrays(net, f"control{j}")
        if self.embed_net is not None:
            out += nets.named_arrays(self.embed_net, "embed")
        return out

    def arrays(self) -> list[np.ndarray]:
        return [a for _, a in self.named_arrays()]


def init_policy(d: int, k: int, embed_cfg: emb.EmbeddingConfig | None,
                n_particles: int, seed: int,
                control_hidden: tuple[int, ...] = (100, 100, 100, 100),
                embed_hidden: tuple[int, ...] = (100, 100, 100, 100),
                cnn_kernels_1d: tuple = (8, 4, 2),
                cnn_kernels_2d: tuple = ((8, 8), (4, 4), (2, 2)),
                cnn_channels: int = 6,
                cnn_dense: int = 100) -> PolicyParams:
    """Deterministically seeded Glorot initialization of all networks."""
    rng = np.random.default_rng(np.random.Philox(key=seed))
    m = embed_cfg.out_dim if embed_cfg is not None else 0
    control = [nets.init_mlp(1 + d + m, control_hidden, 1, rng) for _ in range(k)]
    embed_net = None
    if embed_cfg is not None:
        cfg = embed_cfg.for_dim(d)
        width = emb.input_dim(cfg, n_particles, d)
        if cfg.arch == "symmetric":
            embed_net = nets.init_symmetric(d, embed_hidden, cfg.out_dim, rng)
        elif cfg.arch == "cnn":
            kernels = cnn_kernels_1d if d == 1 else cnn_kernels_2d
            embed_net = nets.init_conv_net(width, kernels, cnn_channels,
                                           cnn_dense, cfg.out_dim, rng)
        else:
            embed_net = nets.init_mlp(width, embed_hidden, cfg.out_dim, rng)
        embed_cfg = cfg
    return PolicyParams(control, embed_net, embed_cfg, d, k)


class NetworkPolicy:
    """Evaluates the control networks, with the embedding recomputed each step."""

    def __init__(self, params: PolicyParams):
        self.params = params
        self._tape: ad.Tape | None = None
        self._control = None
        self._embed = None

    @property
    def population_dependent(self) -> bool:
        return self.params.embed_net is not None

    def bind(self, tape: ad.Tape) -> list[Tensor]:
        """Register parameters on a rollout tape; returns leaves in
        named_arrays order (the order gradients are extracted in)."""
        self._tape = tape
        leaves = []
        self._control = []
        for net in self.params.control:
            reg = [(tape.tensor(l.w), tape.tensor(l.b)) for l in net.layers]
            self._control.append(reg)
            for w, b in reg:
                leaves += [w, b]
        self._embed = None
        if self.params.embed_net is not None:
            self._embed = emb.register(self.params.embed_net, tape)
            leaves += [t for pair in _walk(self._embed) for t in pair]
        return leaves

    def actions(self, tape: ad.Tape, t: float, states: Tensor,
                population: Tensor | None = None) -> tuple[Tensor, Tensor | None]:
        """population, when given, is the particle cloud used for the
        distribution input in place of the true states (perturbation studies)."""
        if tape is not self._tape:
            self.bind(tape)
        n = states.shape[0]
        cols = [tape.tensor(np.full((n, 1), t)), states]
        m_row = None
        if self._embed is not None:
            pop = states if population is None else population
            m_row = emb.embed(self.params.embed_cfg, self._embed, pop)
            cols.append(ad.broadcast_row(m_row, n))
        inputs = ad.concat_cols(cols) if len(cols) > 1 else cols[0]
        outs = [nets.mlp_forward(reg, inputs) for reg in self._control]
        act = outs[0] if len(outs) == 1 else ad.concat_cols(outs)
        return act, m_row


def _walk(reg: dict):
    for val in reg.values():
        if isinstance(val, list):
            yield from val
        else:
            yield val


class LinearDeviationPolicy:
    """a(t, x) = gain(t) * (population mean - x): the closed-form shape of the
    interbank benchmark's optimal control. Parameter-free."""

    population_dependent = True

    def __init__(self, gain):
        self.gain = gain if callable(gain) else (lambda t, g=float(gain): g)

    def bind(self, tape: ad.Tape) -> list[Tensor]:
        return []

    def actions(self, tape: ad.Tape, t: float, states: Tensor,
                population: Tensor | None = None) -> tuple[Tensor, None]:
        pop = states if population is None else population
        mean = ad.mean_axis(pop, 0)
        dev = ad.sub(ad.broadcast_row(mean, states.shape[0]), states)
        return ad.scale(dev, self.gain(t)), None


class ZeroPolicy:
    """a = 0: the do-nothing baseline."""

    population_dependent = False

    def __init__(self, k: int | None = None):
        self.k = k

    def bind(self, tape: ad.Tape) -> list[Tensor]:
        return []

    def actions(self, tape: ad.Tape, t: float, states: Tensor,
                population: Tensor | None = None) -> tuple[Tensor, None]:
        n = states.shape[0]
        k = self.k if self.k is not None else states.shape[1]
        return tape.tensor(np.zeros((n, k))), None


# ---------------------------------------------------------------------------
# snapshots


def save_policy(path, params: PolicyParams, extra_meta: dict | None = None) -> None:
    cfg = params.embed_cfg
    meta = {
        "d": params.d,
        "k": params.k,
        "embedding": None if cfg is None else {
            "kind": cfg.kind, "arch": cfg.arch, "out_dim": cfg.out_dim,
            "nmom": cfg.nmom, "clip_bound": cfg.clip_bound, "nbin": cfg.nbin,
            "center": list(cfg.center), "side": cfg.side,
            "overflow_bin": cfg.overflow_bin,
            "normalize_counts": cfg.normalize_counts,
        },
        "shapes": {n: list(a.shape) for n, a in params.named_arrays()},
    }
    if extra_meta:
        meta.update(extra_meta)
    nets.save_arrays(path, params.named_arrays(), meta)


def load_policy(path) -> PolicyParams:
    header, values = nets.load_arrays(path)
    d, k = header["d"], header["k"]
    e = header["embedding"]
    cfg = None
    if e is not None:
        cfg = emb.EmbeddingConfig(
            kind=e["kind"], arch=e["arch"], out_dim=e["out_dim"], nmom=e["nmom"],
            clip_bound=e["clip_bound"], nbin=e["nbin"], center=tuple(e["center"]),
            side=e["side"], overflow_bin=e["overflow_bin"],
            normalize_counts=e["normalize_counts"])
    control = []
    for j in range(k):
        layers = []
        i = 0
        while f"control{j}.l{i}.w" in values:
            layers.append(nets.Dense(values[f"control{j}.l{i}.w"].copy(),
                                     values[f"control{j}.l{i}.b"].copy()))
            i += 1
        control.append(nets.Mlp(layers))
    embed_net = None
    if cfg is not None:
        if cfg.arch == "cnn":
            convs, head = [], []
            i = 0
            while f"embed.c{i}.k" in values:
                convs.append(nets.Conv(values[f"embed.c{i}.k"].copy(),
                                       values[f"embed.c{i}.b"].copy()))
                i += 1
            i = 0
            while f"embed.h{i}.w" in values:
                head.append(nets.Dense(values[f"embed.h{i}.w"].copy(),
                                       values[f"embed.h{i}.b"].copy()))
                i += 1
            spatial = (cfg.nbin,) if d == 1 else (cfg.nbin, cfg.nbin)
            embed_net = nets.ConvNet(convs, head, spatial)
        elif cfg.arch == "symmetric":
            inner = []
            i = 0
            while f"embed.i{i}.w" in values:
                inner.append(nets.Dense(values[f"embed.i{i}.w"].copy(),
                                        values[f"embed.i{i}.b"].copy()))
                i += 1
            embed_net = nets.SymmetricNet(inner, nets.Dense(values["embed.o.w"].copy(),
                                                            values["embed.o.b"].copy()))
        else:
            layers = []
            i = 0
            while f"embed.l{i}.w" in values:
                layers.append(nets.Dense(values[f"embed.l{i}.w"].copy(),
                                         values[f"embed.l{i}.b"].copy()))
                i += 1
            embed_net = nets.Mlp(layers)
    return PolicyParams(control, embed_net, cfg, d, k)
