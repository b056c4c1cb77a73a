"""Similarity-guided layer adaptation.

Deep layers of a trained one-stream tracking ViT produce near-duplicate
search features. This module holds everything built on that observation:
consecutive-layer cosine profiling, saturation detection (fixed-depth or
threshold-based), the candidate-ranking target that marks the deeper layer
whose skip-applied output stays closest to the saturated features, the small
MLP that learns to predict that choice per input, and its mean-absolute-error
training loss.

Candidate outputs are always formed under skip semantics: layer l_star+j is
applied directly to X^{l_star}, matching how the retained layer runs at
inference.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, LayerTrace
from .rng import stream
from .tensor import Tensor


class DegenerateInputWarning(UserWarning):
    """A cosine operand had (numerically) zero norm; the result is defined 0."""


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two same-shape arrays, flattened.

    Zero-norm operands carry no direction: the result is defined as 0.0 and a
    ``DegenerateInputWarning`` is emitted instead of propagating NaN.
    """
    av = (a.data if isinstance(a, Tensor) else np.asarray(a)).reshape(-1)
    bv = (b.data if isinstance(b, Tensor) else np.asarray(b)).reshape(-1)
    if av.shape != bv.shape:
        raise T.ShapeError(f"cosine_similarity: shapes differ: {av.shape} vs {bv.shape}")
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na < 1e-12 or nb < 1e-12:
        warnings.warn("zero-norm operand in cosine similarity", DegenerateInputWarning)
        return 0.0
    return float(av @ bv / (na * nb))


def extract_selector_input(x_lstar: Tensor, mode: str = "channel0") -> Tensor:
    """Reduce saturated features (N x D) to the selector input vector.

    ``channel0`` (default): first embedding channel of every token, length N.
    ``token0``: the alternative reading, first token's embedding, length D.
    """
    if x_lstar.data.ndim != 2:
        raise T.ShapeError(f"selector input expects (N,D) features, got {x_lstar.shape}")
    if mode == "channel0":
        return x_lstar[:, 0]
    if mode == "token0":
        return x_lstar[0, :]
    raise ValueError(f"unknown selector input mode {mode!r}")


class SelectionModule:
    """3-layer MLP scoring each candidate deeper layer, sigmoid outputs."""

    def __init__(self, input_dim: int, num_candidates: int, hidden: int = 160, seed: int = 0):
        if num_candidates < 1:
            raise ValueError("need at least one candidate layer")
        rng = stream(seed, "selector")
        self.input_dim = input_dim
        self.num_candidates = num_candidates
        self.w1 = Tensor(np.clip(rng.normal(0, 0.02, (input_dim, hidden)), -0.04, 0.04), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(np.clip(rng.normal(0, 0.02, (hidden, hidden)), -0.04, 0.04), requires_grad=True)
        self.b2 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w3 = Tensor(np.clip(rng.normal(0, 0.02, (hidden, num_candidates)), -0.04, 0.04), requires_grad=True)
        self.b3 = Tensor(np.zeros(num_candidates), requires_grad=True)

    def named_params(self):
        for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
            yield f"selector.{name}", getattr(self, name)

    def forward(self, z: Tensor) -> Tensor:
        if z.data.shape != (self.input_dim,):
            raise T.ShapeError(f"selector input shape {z.shape} != ({self.input_dim},)")
        h = T.reshape(z, (1, self.input_dim))
        h = T.gelu(T.add(T.matmul(h, self.w1), self.b1))
        h = T.gelu(T.add(T.matmul(h, self.w2), self.b2))
        out = T.add(T.matmul(h, self.w3), self.b3)
        return T.reshape(T.sigmoid(out), (self.num_candidates,))


def select_probabilities(module: SelectionModule, z: Tensor) -> Tensor:
    """Per-candidate retention probabilities, each in (0,1)."""
    return module.forward(z)


def choose_layer(probs) -> int:
    """1-based index of the highest probability; ties go to the shallowest."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    if p.size < 1:
        raise ValueError("choose_layer: empty probability vector")
    return int(np.argmax(p)) + 1


def candidate_similarities(x_lstar, candidates) -> np.ndarray:
    """Cosine between saturated features and each skip-applied candidate output."""
    return np.array([cosine_similarity(x_lstar, c) for c in candidates])


def build_target(x_lstar, candidates) -> np.ndarray:
    """One-hot vector marking the candidate most similar to the saturated features.

    Ties resolve to the first (shallowest) maximum, so the output always sums
    to exactly 1.
    """
    sims = candidate_similarities(x_lstar, candidates)
    y = np.zeros(len(sims), dtype=T.default_dtype())
    y[int(np.argmax(sims))] = 1.0
    return y


def similarity_loss(y_hat: Tensor, y: np.ndarray) -> Tensor:
    """Mean absolute error between predicted and expected selection probabilities."""
    target = np.asarray(y)
    if y_hat.data.shape != target.shape:
        raise T.ShapeError(f"similarity_loss: lengths differ: {y_hat.shape} vs {target.shape}")
    return T.tmean(T.tabs(T.sub(y_hat, Tensor(target))))


# ---------------------------------------------------------------------------
# saturation policies


@dataclass(frozen=True)
class Direct:
    """Fixed saturated depth chosen from prior knowledge."""

    l_star: int

    def __post_init__(self):
        if self.l_star < 1:
            raise ValueError("Direct policy needs l_star >= 1")


@dataclass(frozen=True)
class Adaptive:
    """Per-input saturated depth: first layer whose consecutive cosine exceeds mu."""

    mu: float

    def __post_init__(self):
        if not 0.0 < self.mu < 1.0:
            raise ValueError("Adaptive policy needs 0 < mu < 1")


SaturationPolicy = Direct | Adaptive


def detect_saturation(trace: LayerTrace, mu: float) -> int:
    """Smallest depth whose search features stopped changing (cosine > mu).

    Scans i = 1..l-1 comparing search-token submatrices of X^i and X^{i-1};
    falls back to l-1 (the deepest value that still leaves one candidate).
    """
    if not 0.0 < mu < 1.0:
        raise ValueError("mu must lie in (0, 1)")
    l = len(trace.states) - 1
    for i in range(1, l):
        if cosine_similarity(trace.search_state(i), trace.search_state(i - 1)) > mu:
            return i
    return l - 1


# ---------------------------------------------------------------------------
# redundancy profiling


@dataclass
class RedundancyReport:
    """Mean consecutive-layer cosine similarity of search features, per layer."""

    layer_sims: np.ndarray  # index i-1 holds mean Cos(X^i_s, X^{i-1}_s)
    n_samples: int

    def rows(self):
        for i, sim in enumerate(self.layer_sims, start=1):
            yield {"layer_index": i, "mean_cos_sim": float(sim), "n_samples": self.n_samples}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["layer_index", "mean_cos_sim", "n_samples"])
            writer.writeheader()
            for row in self.rows():
                writer.writerow(row)

    def to_json_dict(self) -> dict:
        return {
            "format_version": 1,
            "n_samples": self.n_samples,
            "mean_cos_sim": [float(s) for s in self.layer_sims],
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)


def profile_redundancy(backbone: Backbone, samples) -> RedundancyReport:
    """Average consecutive-layer cosines over (template, search) image pairs.

    Uses the full sequential forward; this is the analysis view of the stack,
    not the deployed skip path.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("profile_redundancy: empty sample set")
    l = backbone.config.num_layers
    acc = np.zeros(l)
    with T.no_grad():
        for template, search in samples:
            trace = backbone.forward_full(template, search)
            for i in range(1, l + 1):
                acc[i - 1] += cosine_similarity(trace.search_state(i), trace.search_state(i - 1))
    return RedundancyReport(layer_sims=acc / len(samples), n_samples=len(samples))


def export_attention(trace: LayerTrace, layer: int, config: BackboneConfig) -> np.ndarray:
    """Head-averaged attention from the center template token to the search grid.

    Returns a (search-grid) map whose entries are that token's attention mass
    over search positions at the given (1-based) layer.
    """
    if trace.attention is None:
        raise ValueError("attention was not captured in this trace")
    if not 1 <= layer <= len(trace.attention):
        raise IndexError(f"layer {layer} out of range 1..{len(trace.attention)}")
    gh, gw = config.template_grid
    center = ((gh - 1) // 2) * gw + (gw - 1) // 2
    attn = trace.attention[layer - 1]  # (heads, N, N)
    row = attn[:, center, trace.split :].mean(axis=0)
    return row.reshape(config.search_grid)
