"""Center-based localization head and tracking losses.

Search tokens are folded back into a 2-D feature map and three convolutional
branches predict a classification score map, a normalized box size map, and a
sub-cell offset map, all sigmoid-bounded. Decoding takes the score argmax
(optionally tapered by a Hanning window) and assembles the box from the size
and offset maps at that cell. Training combines penalty-reduced focal loss on
the score map with L1 + GIoU regression at the ground-truth cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import stream
from .tensor import Tensor


@dataclass
class HeadOutputs:
    score: Tensor  # (G, G), in (0,1)
    size: Tensor  # (2, G, G): normalized (w, h)
    offset: Tensor  # (2, G, G): sub-cell (dx, dy)


@dataclass
class BBox:
    """Box as (cx, cy, w, h), normalized to the search image."""

    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def clipped(self) -> "BBox":
        cx = min(max(self.cx, 0.0), 1.0)
        cy = min(max(self.cy, 0.0), 1.0)
        return BBox(cx, cy, min(max(self.w, 1e-4), 1.0), min(max(self.h, 1e-4), 1.0))


@dataclass(frozen=True)
class LossWeights:
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0
    gamma: float = 0.2

    def __post_init__(self):
        if self.lambda_iou < 0 or self.lambda_l1 < 0 or self.gamma < 0:
            raise ValueError("loss weights must be nonnegative")


class CenterHead:
    """Three conv branches over the search-token feature map.

    Each branch stacks 3x3 convolutions D -> C -> C/2 -> C/4 -> C/8 with GELU
    in between, then a 1x1 projection and a sigmoid.
    """

    _BRANCHES = (("score", 1), ("size", 2), ("offset", 2))

    def __init__(self, embed_dim: int, grid: int, channels: int = 256, seed: int = 0):
        if channels % 8:
            raise ValueError("head channels must be divisible by 8")
        self.embed_dim = embed_dim
        self.grid = grid
        self.channels = channels
        widths = [embed_dim, channels, channels // 2, channels // 4, channels // 8]
        self.params: dict[str, Tensor] = {}
        for branch, out_ch in self._BRANCHES:
            rng = stream(seed, "head", branch)
            for s in range(4):
                cin, cout = widths[s], widths[s + 1]
                std = math.sqrt(2.0 / (9 * cin))
                w = np.clip(rng.normal(0, std, (cout, cin, 3, 3)), -2 * std, 2 * std)
                self.params[f"head.{branch}.conv{s}.w"] = Tensor(w, requires_grad=True)
                self.params[f"head.{branch}.conv{s}.b"] = Tensor(np.zeros(cout), requires_grad=True)
            wf = np.clip(rng.normal(0, 0.02, (out_ch, widths[-1], 1, 1)), -0.04, 0.04)
            self.params[f"head.{branch}.out.w"] = Tensor(wf, requires_grad=True)
            bias0 = -2.0 if branch == "score" else 0.0  # start the score map low
            self.params[f"head.{branch}.out.b"] = Tensor(np.full(out_ch, bias0), requires_grad=True)

    def named_params(self):
        yield from self.params.items()

    def _branch(self, name: str, fmap: Tensor) -> Tensor:
        x = fmap
        for s in range(4):
            x = T.gelu(T.conv2d(x, self.params[f"head.{name}.conv{s}.w"],
                                self.params[f"head.{name}.conv{s}.b"], padding=1))
        x = T.conv2d(x, self.params[f"head.{name}.out.w"], self.params[f"head.{name}.out.b"], padding=0)
        return T.sigmoid(x)

    def forward(self, x_s: Tensor) -> HeadOutputs:
        """Map search tokens (N_s, D) to score/size/offset maps on the G x G grid."""
        n, d = x_s.data.shape
        g = int(round(math.sqrt(n)))
        if g * g != n:
            raise T.ShapeError(f"search token count {n} is not a perfect square")
        if g != self.grid or d != self.embed_dim:
            raise T.ShapeError(f"head built for {self.embed_dim}x{self.grid}x{self.grid}, got {d}, grid {g}")
        # token r*G+c sits at grid cell (r, c)
        fmap = T.swapaxes(T.swapaxes(T.reshape(x_s, (g, g, d)), 1, 2), 0, 1)  # (D, G, G)
        score = T.reshape(self._branch("score", fmap), (g, g))
        size = self._branch("size", fmap)
        offset = self._branch("offset", fmap)
        return HeadOutputs(score=score, size=size, offset=offset)


def head_forward(head: CenterHead, x_s: Tensor) -> HeadOutputs:
    return head.forward(x_s)


def hanning_2d(g: int) -> np.ndarray:
    """Outer product of length-g Hanning vectors; the decode-time center prior."""
    if g < 2:
        raise ValueError("hanning_2d needs g >= 2")
    w = np.hanning(g)
    return np.outer(w, w)


def decode(out: HeadOutputs, window: np.ndarray | None = None) -> BBox:
    """Argmax of the (optionally windowed) score map, plus offset/size lookup."""
    p = out.score.data
    g = p.shape[0]
    if window is not None:
        if window.shape != p.shape:
            raise T.ShapeError(f"window shape {window.shape} != score shape {p.shape}")
        p = p * window
    i, j = np.unravel_index(int(np.argmax(p)), p.shape)
    o, s = out.offset.data, out.size.data
    return BBox(
        cx=float((j + o[0, i, j]) / g),
        cy=float((i + o[1, i, j]) / g),
        w=float(s[0, i, j]),
        h=float(s[1, i, j]),
    )


# ---------------------------------------------------------------------------
# losses


def gaussian_target(g: int, center: tuple[int, int], sigma: float | None = None) -> np.ndarray:
    """Ground-truth heatmap: a Gaussian bump with exact 1 at the center cell."""
    ci, cj = center
    if not (0 <= ci < g and 0 <= cj < g):
        raise ValueError(f"center {center} outside {g}x{g} grid")
    if sigma is None:
        sigma = max(1.0, g / 16.0)
    ii, jj = np.mgrid[0:g, 0:g]
    return np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2.0 * sigma * sigma))


def focal_loss(p: Tensor, gt_center: tuple[int, int], alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Penalty-reduced focal loss of the score map against a Gaussian heatmap."""
    g = p.data.shape[0]
    t = gaussian_target(g, gt_center)
    pos = (t >= 1.0).astype(p.data.dtype)
    negw = ((1.0 - t) ** beta) * (1.0 - pos)
    pc = T.clamp(p, 1e-6, 1.0 - 1e-6)
    q = T.shift(T.neg(pc), 1.0)  # 1 - p
    pos_term = T.mul(Tensor(pos), T.mul(T.mul(q, q), T.tlog(pc)))
    neg_term = T.mul(Tensor(negw), T.mul(T.mul(pc, pc), T.tlog(q)))
    return T.neg(T.tmean(T.add(pos_term, neg_term)))


def _scalar(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(np.asarray(float(v)))


def giou_loss(pred, gt) -> Tensor:
    """1 - GIoU between two (cx, cy, w, h) boxes; components may be Tensors."""
    pcx, pcy, pw, ph = (_scalar(v) for v in _box_fields(pred))
    gcx, gcy, gw, gh = (_scalar(v) for v in _box_fields(gt))
    floor = Tensor(np.asarray(1e-12))
    zero = Tensor(np.asarray(0.0))

    px1, px2 = T.sub(pcx, T.scale(pw, 0.5)), T.add(pcx, T.scale(pw, 0.5))
    py1, py2 = T.sub(pcy, T.scale(ph, 0.5)), T.add(pcy, T.scale(ph, 0.5))
    gx1, gx2 = T.sub(gcx, T.scale(gw, 0.5)), T.add(gcx, T.scale(gw, 0.5))
    gy1, gy2 = T.sub(gcy, T.scale(gh, 0.5)), T.add(gcy, T.scale(gh, 0.5))

    iw = T.tmaximum(T.sub(T.tminimum(px2, gx2), T.tmaximum(px1, gx1)), zero)
    ih = T.tmaximum(T.sub(T.tminimum(py2, gy2), T.tmaximum(py1, gy1)), zero)
    inter = T.mul(iw, ih)
    union = T.sub(T.add(T.mul(pw, ph), T.mul(gw, gh)), inter)
    iou = T.div(inter, T.tmaximum(union, floor))

    hw = T.sub(T.tmaximum(px2, gx2), T.tminimum(px1, gx1))
    hh = T.sub(T.tmaximum(py2, gy2), T.tminimum(py1, gy1))
    hull = T.tmaximum(T.mul(hw, hh), floor)
    giou = T.sub(iou, T.div(T.sub(hull, union), hull))
    return T.sub(Tensor(np.asarray(1.0)), giou)


def l1_loss(pred, gt) -> Tensor:
    """Mean absolute error over the four (cx, cy, w, h) components."""
    terms = [T.tabs(T.sub(_scalar(p), _scalar(g))) for p, g in zip(_box_fields(pred), _box_fields(gt))]
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 0.25)


def _box_fields(box):
    if isinstance(box, BBox):
        return (box.cx, box.cy, box.w, box.h)
    if len(box) != 4:
        raise ValueError("box must have 4 components")
    return tuple(box)


def box_at_cell(out: HeadOutputs, cell: tuple[int, int]):
    """Differentiable (cx, cy, w, h) assembled from the maps at one grid cell."""
    i, j = cell
    g = out.score.data.shape[0]
    cx = T.scale(T.shift(out.offset[(0, i, j)], float(j)), 1.0 / g)
    cy = T.scale(T.shift(out.offset[(1, i, j)], float(i)), 1.0 / g)
    return (cx, cy, out.size[(0, i, j)], out.size[(1, i, j)])


def grid_cell(box: BBox, g: int) -> tuple[int, int]:
    """Grid cell containing the box center (row, col), clamped to the grid."""
    j = min(max(int(box.cx * g), 0), g - 1)
    i = min(max(int(box.cy * g), 0), g - 1)
    return (i, j)


def total_loss(cls: Tensor, iou: Tensor, l1: Tensor, sim: Tensor, weights: LossWeights) -> Tensor:
    """Weighted sum of the tracking and selection losses."""
    out = T.add(cls, T.scale(iou, weights.lambda_iou))
    out = T.add(out, T.scale(l1, weights.lambda_l1))
    return T.add(out, T.scale(sim, weights.gamma))
