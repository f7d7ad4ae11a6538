"""Named experiment presets: the three benchmark problems with their published
parameter tables, the five embedding/architecture combinations (plus the
state-only baseline), and per-problem histogram geometry defaults chosen so
the embedding-network input widths match the reference configurations
(5 / 256 / 16 for the flat histogram, 32 / 16x16 for the conv path)."""

from __future__ import annotations

from .embeddings import EmbeddingConfig
from .problems import Problem, crowd_motion, price_impact, systemic_risk


class PresetError(Exception):
    pass


PROBLEMS = {
    "systemic_risk": systemic_risk,
    "price_impact": price_impact,
    "crowd_motion": crowd_motion,
}

# embedding name -> (summary kind, network architecture); nodist = no embedding
EMBEDDINGS = {
    "emp": ("empirical", "ffnn"),
    "mom": ("moments", "ffnn"),
    "hist": ("histogram", "ffnn"),
    "hist_cnn": ("histogram", "cnn"),
    "emp_sym": ("empirical", "symmetric"),
    "nodist": None,
}

_DEFAULT_NBIN = {
    ("systemic_risk", "hist"): 5,
    ("systemic_risk", "hist_cnn"): 32,
    ("price_impact", "hist"): 16,
    ("price_impact", "hist_cnn"): 16,
    ("crowd_motion", "hist"): 4,
    ("crowd_motion", "hist_cnn"): 16,
}

# Histogram domain per problem: the hypercube should cover the states the
# dynamics actually visit at a resolution where the counts stay informative.
# The 1-d benchmark's log-reserves live near 1 with spread well under 1, so a
# wide generic cube would park most bins permanently empty.
_DEFAULT_DOMAIN = {
    ("systemic_risk", "hist"): (1.0, 2.0),
    ("systemic_risk", "hist_cnn"): (1.0, 4.0),
}
_GENERIC_DOMAIN = (0.0, 8.0)

DEFAULT_NMOM = 1
DEFAULT_CLIP = 10.0
DEFAULT_SIDE = _GENERIC_DOMAIN[1]


def build_problem(name: str, **overrides) -> Problem:
    if name not in PROBLEMS:
        raise PresetError(f"unknown problem {name!r}; valid: {sorted(PROBLEMS)}")
    return PROBLEMS[name](**overrides)


def embedding_names() -> list[str]:
    return sorted(EMBEDDINGS)


def build_embedding(problem_name: str, embedding: str, nbin: int | None = None,
                    nmom: int | None = None, clip_bound: float | None = None,
                    side: float | None = None, center: float | None = None,
                    overflow_bin: bool = False) -> EmbeddingConfig | None:
    """Resolve an embedding name to a config (None for the state-only case)."""
    if embedding not in EMBEDDINGS:
        raise PresetError(f"unknown embedding {embedding!r}; valid: {embedding_names()}")
    pair = EMBEDDINGS[embedding]
    if pair is None:
        return None
    kind, arch = pair
    if nbin is None:
        nbin = _DEFAULT_NBIN.get((problem_name, embedding), 5)
    default_center, default_side = _DEFAULT_DOMAIN.get((problem_name, embedding),
                                                       _GENERIC_DOMAIN)
    return EmbeddingConfig(
        kind=kind, arch=arch,
        nmom=DEFAULT_NMOM if nmom is None else int(nmom),
        clip_bound=DEFAULT_CLIP if clip_bound is None else float(clip_bound),
        nbin=int(nbin),
        center=(default_center if center is None else float(center),),
        side=default_side if side is None else float(side),
        overflow_bin=overflow_bin,
        normalize_counts=True)
