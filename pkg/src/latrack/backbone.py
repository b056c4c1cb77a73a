"""One-stream ViT backbone for template/search tracking.

Template and search images are tokenized jointly and every transformer layer
runs full self-attention over the concatenated sequence, so feature extraction
and template/search matching happen in the same stack. Besides the standard
sequential composition, the backbone exposes a layer-adaptive forward that
runs layers 1..l_star and then applies exactly one deeper layer directly to
the saturated features, skipping everything in between and after.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import stream
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    num_layers: int = 8
    embed_dim: int = 32
    num_heads: int = 2
    patch_size: int = 8
    template_size: tuple[int, int] = (32, 32)
    search_size: tuple[int, int] = (64, 64)
    mlp_ratio: float = 4.0

    def __post_init__(self):
        p = self.patch_size
        for name, (h, w) in (("template_size", self.template_size), ("search_size", self.search_size)):
            if h % p or w % p:
                raise ValueError(f"{name} {h}x{w} not divisible by patch_size {p}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_layers < 2:
            raise ValueError("num_layers must be at least 2")

    @property
    def template_grid(self) -> tuple[int, int]:
        return (self.template_size[0] // self.patch_size, self.template_size[1] // self.patch_size)

    @property
    def search_grid(self) -> tuple[int, int]:
        return (self.search_size[0] // self.patch_size, self.search_size[1] // self.patch_size)

    @property
    def n_template(self) -> int:
        gh, gw = self.template_grid
        return gh * gw

    @property
    def n_search(self) -> int:
        gh, gw = self.search_grid
        return gh * gw

    @property
    def n_tokens(self) -> int:
        return self.n_template + self.n_search


def paper_config() -> BackboneConfig:
    """DeiT-tiny shaped preset: 12 layers, dim 192, 128/256 inputs."""
    return BackboneConfig(
        num_layers=12,
        embed_dim=192,
        num_heads=3,
        patch_size=16,
        template_size=(128, 128),
        search_size=(256, 256),
    )


def toy_config() -> BackboneConfig:
    """Small preset for tests and desk-scale training."""
    return BackboneConfig()


@dataclass
class TokenSequence:
    """Concatenated template+search token matrix with the split point recorded."""

    tokens: Tensor  # (N, D)
    split: int  # rows [0, split) are template tokens, the rest search tokens


@dataclass
class LayerTrace:
    """States X^0..X^l of a full forward pass, plus optional attention maps."""

    states: list[Tensor]
    attention: list[np.ndarray] | None = None
    split: int = 0

    def __len__(self) -> int:
        return len(self.states)

    def search_state(self, i: int) -> np.ndarray:
        return self.states[i].data[self.split :]


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    draw = rng.normal(0.0, std, size=shape)
    return np.clip(draw, -2.0 * std, 2.0 * std)


def _param(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(_trunc_normal(rng, shape), requires_grad=True)


class TransformerLayer:
    """Pre-norm block: x + MHSA(LN(x)), then + MLP(LN(.)) with GELU."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.dim = dim
        self.num_heads = num_heads
        hidden = int(dim * mlp_ratio)
        self.ln1_g = Tensor(np.ones(dim), requires_grad=True)
        self.ln1_b = Tensor(np.zeros(dim), requires_grad=True)
        self.wq = _param(rng, (dim, dim))
        self.bq = Tensor(np.zeros(dim), requires_grad=True)
        self.wk = _param(rng, (dim, dim))
        self.bk = Tensor(np.zeros(dim), requires_grad=True)
        self.wv = _param(rng, (dim, dim))
        self.bv = Tensor(np.zeros(dim), requires_grad=True)
        self.wo = _param(rng, (dim, dim))
        self.bo = Tensor(np.zeros(dim), requires_grad=True)
        self.ln2_g = Tensor(np.ones(dim), requires_grad=True)
        self.ln2_b = Tensor(np.zeros(dim), requires_grad=True)
        self.w1 = _param(rng, (dim, hidden))
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = _param(rng, (hidden, dim))
        self.b2 = Tensor(np.zeros(dim), requires_grad=True)

    def named_params(self):
        for name in ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                     "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"):
            yield name, getattr(self, name)

    def forward(self, x: Tensor, capture_attention: bool = False):
        n = x.shape[0]
        heads, dh = self.num_heads, self.dim // self.num_heads
        h1 = T.layer_norm(x, self.ln1_g, self.ln1_b)
        q = T.add(T.matmul(h1, self.wq), self.bq)
        k = T.add(T.matmul(h1, self.wk), self.bk)
        v = T.add(T.matmul(h1, self.wv), self.bv)
        qh = T.swapaxes(T.reshape(q, (n, heads, dh)), 0, 1)
        kh = T.swapaxes(T.reshape(k, (n, heads, dh)), 0, 1)
        vh = T.swapaxes(T.reshape(v, (n, heads, dh)), 0, 1)
        scores = T.scale(T.matmul(qh, T.swapaxes(kh, 1, 2)), 1.0 / math.sqrt(dh))
        attn = T.softmax(scores, axis=2)
        ctx = T.reshape(T.swapaxes(T.matmul(attn, vh), 0, 1), (n, self.dim))
        x2 = T.add(x, T.add(T.matmul(ctx, self.wo), self.bo))
        h2 = T.layer_norm(x2, self.ln2_g, self.ln2_b)
        mlp = T.add(T.matmul(T.gelu(T.add(T.matmul(h2, self.w1), self.b1)), self.w2), self.b2)
        out = T.add(x2, mlp)
        return (out, attn.data.copy()) if capture_attention else (out, None)


class Backbone:
    """Joint tokenizer plus the transformer stack, with both forward modes."""

    def __init__(self, config: BackboneConfig, seed: int = 0):
        self.config = config
        c = config
        rng = stream(seed, "backbone", "embed")
        patch_in = 3 * c.patch_size * c.patch_size
        self.patch_w = _param(rng, (patch_in, c.embed_dim))
        self.patch_b = Tensor(np.zeros(c.embed_dim), requires_grad=True)
        self.pos_z = _param(stream(seed, "backbone", "pos_z"), (c.n_template, c.embed_dim))
        self.pos_s = _param(stream(seed, "backbone", "pos_s"), (c.n_search, c.embed_dim))
        self.layers = [
            TransformerLayer(c.embed_dim, c.num_heads, c.mlp_ratio, stream(seed, "backbone", "layer", i))
            for i in range(c.num_layers)
        ]

    def named_params(self):
        yield "backbone.patch.w", self.patch_w
        yield "backbone.patch.b", self.patch_b
        yield "backbone.pos.z", self.pos_z
        yield "backbone.pos.s", self.pos_s
        for i, layer in enumerate(self.layers):
            for name, p in layer.named_params():
                yield f"backbone.layers.{i}.{name}", p

    def _patches(self, image: np.ndarray, expected: tuple[int, int], what: str) -> Tensor:
        h, w = expected
        if image.shape != (h, w, 3):
            raise ValueError(f"{what} image shape {image.shape} does not match config {(h, w, 3)}")
        p = self.config.patch_size
        # pixels in [0,1], standardized with per-channel mean 0.5 / std 0.5
        x = (np.asarray(image, dtype=T.default_dtype()) - 0.5) / 0.5
        gh, gw = h // p, w // p
        # row-major patch grid; within a patch: (row, col, channel)
        cols = x.reshape(gh, p, gw, p, 3).transpose(0, 2, 1, 3, 4).reshape(gh * gw, p * p * 3)
        return Tensor(cols)

    def embed(self, template: np.ndarray, search: np.ndarray) -> TokenSequence:
        """Patch-embed both images into one [template | search] token matrix."""
        c = self.config
        pz = self._patches(template, c.template_size, "template")
        ps = self._patches(search, c.search_size, "search")
        tz = T.add(T.add(T.matmul(pz, self.patch_w), self.patch_b), self.pos_z)
        ts = T.add(T.add(T.matmul(ps, self.patch_w), self.patch_b), self.pos_s)
        return TokenSequence(tokens=T.concat([tz, ts], axis=0), split=c.n_template)

    def layer_forward(self, x: Tensor, i: int, capture_attention: bool = False):
        """Apply the i-th layer (1-based) to a token matrix."""
        if not 1 <= i <= self.config.num_layers:
            raise IndexError(f"layer index {i} out of range 1..{self.config.num_layers}")
        return self.layers[i - 1].forward(x, capture_attention)

    def forward_full(self, template: np.ndarray, search: np.ndarray,
                     capture_attention: bool = False) -> LayerTrace:
        """Sequential composition through all layers; returns X^0..X^l."""
        seq = self.embed(template, search)
        states = [seq.tokens]
        maps: list[np.ndarray] = []
        x = seq.tokens
        for i in range(1, self.config.num_layers + 1):
            x, attn = self.layer_forward(x, i, capture_attention)
            states.append(x)
            if capture_attention:
                maps.append(attn)
        return LayerTrace(states=states, attention=maps if capture_attention else None, split=seq.split)

    def forward_adaptive(self, template: np.ndarray, search: np.ndarray,
                         l_star: int, k: int) -> Tensor:
        """Run layers 1..l_star, then apply layer l_star+k directly to X^{l_star}.

        Exactly l_star + 1 layer evaluations happen; the gap layers and the
        tail beyond l_star+k never execute.
        """
        l = self.config.num_layers
        if not 1 <= l_star < l:
            raise IndexError(f"l_star {l_star} out of range 1..{l - 1}")
        if not 1 <= k <= l - l_star:
            raise IndexError(f"k {k} out of range 1..{l - l_star}")
        x = self.embed(template, search).tokens
        for i in range(1, l_star + 1):
            x, _ = self.layer_forward(x, i)
        x, _ = self.layer_forward(x, l_star + k)
        return x
