"""Synthetic tracking sequences and the Siamese crop pipeline.

Sequences are fully determined by a seed: a textured square target follows a
smooth random walk (optionally with scale drift) over a low-frequency noise
background, with optional distractor squares and occlusion intervals. Crops
follow the usual template/search protocol: square regions proportional to the
target size, mean-padded at frame borders, resized to the model input sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from .head import BBox
from .rng import stream

TEMPLATE_CONTEXT = 2.0  # template crop side = 2 * sqrt(w*h)
SEARCH_CONTEXT = 4.0  # search crop side = 4 * sqrt(w*h)


@dataclass(frozen=True)
class ScenarioParams:
    frame_size: int = 128
    target_size: float = 24.0  # nominal side, px
    size_jitter: float = 0.2  # relative spread of the initial side
    speed: float = 2.0  # random-walk step, px/frame
    scale_drift: float = 0.0  # relative side drift per frame
    distractor_count: int = 2
    occlusion_intervals: tuple[tuple[int, int], ...] = ()
    background_noise: float = 0.04

    def validate(self) -> list[str]:
        errs = []
        if self.frame_size < 32:
            errs.append("frame_size must be >= 32")
        if not 4.0 <= self.target_size <= self.frame_size / 2:
            errs.append("target_size must lie in [4, frame_size/2]")
        if self.speed < 0:
            errs.append("speed must be >= 0")
        if self.scale_drift < 0:
            errs.append("scale_drift must be >= 0")
        if self.distractor_count < 0:
            errs.append("distractor_count must be >= 0")
        for a, b in self.occlusion_intervals:
            if a < 0 or b < a:
                errs.append(f"bad occlusion interval ({a}, {b})")
        return errs


@dataclass
class SyntheticSequence:
    frames: list[np.ndarray]  # (H, W, 3) float in [0,1]
    gt_boxes: list[tuple[float, float, float, float]]  # (cx, cy, w, h) in frame px
    seed: int
    params: ScenarioParams

    def __len__(self) -> int:
        return len(self.frames)


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """4x4 color checker stretched to (h, w): cheap but distinctive appearance."""
    base = rng.uniform(0.15, 0.95, size=(4, 4, 3))
    reps_h, reps_w = math.ceil(h / 4), math.ceil(w / 4)
    tile = np.repeat(np.repeat(base, reps_h, axis=0), reps_w, axis=1)
    return tile[:h, :w]


def _paste(canvas: np.ndarray, patch: np.ndarray, cx: float, cy: float) -> None:
    ph, pw = patch.shape[:2]
    h, w = canvas.shape[:2]
    x0, y0 = int(round(cx - pw / 2)), int(round(cy - ph / 2))
    sx0, sy0 = max(0, -x0), max(0, -y0)
    dx0, dy0 = max(0, x0), max(0, y0)
    dx1, dy1 = min(w, x0 + pw), min(h, y0 + ph)
    if dx1 > dx0 and dy1 > dy0:
        canvas[dy0:dy1, dx0:dx1] = patch[sy0 : sy0 + dy1 - dy0, sx0 : sx0 + dx1 - dx0]


def generate_sequence(seed: int, length: int, params: ScenarioParams | None = None) -> SyntheticSequence:
    """Deterministic synthetic sequence; same seed, same bits."""
    params = params or ScenarioParams()
    errs = params.validate()
    if errs:
        raise ValueError("invalid scenario params: " + "; ".join(errs))
    if length < 2:
        raise ValueError("sequence length must be >= 2")
    rng = stream(seed, "sequence")
    fs = params.frame_size

    # static background: coarse blobs + fine grain, kept mid-range
    coarse = rng.uniform(0.25, 0.6, size=(8, 8, 3))
    bg = np.kron(coarse, np.ones((math.ceil(fs / 8), math.ceil(fs / 8), 1)))[:fs, :fs]
    bg = bg + rng.normal(0.0, params.background_noise, size=bg.shape)
    bg = np.clip(bg, 0.0, 1.0)

    side = params.target_size * (1.0 + rng.uniform(-params.size_jitter, params.size_jitter))
    aspect = rng.uniform(0.8, 1.25)
    tw, th = side * math.sqrt(aspect), side / math.sqrt(aspect)
    tex = _texture(rng, max(4, int(round(th))), max(4, int(round(tw))))

    margin = max(tw, th) / 2 + 2
    cx = rng.uniform(margin, fs - margin)
    cy = rng.uniform(margin, fs - margin)
    vel = rng.normal(0.0, 1.0, size=2)
    if np.linalg.norm(vel) > 0:
        vel = vel / np.linalg.norm(vel) * params.speed

    distractors = []
    for d in range(params.distractor_count):
        ds = params.target_size * rng.uniform(0.6, 1.3)
        dtex = _texture(rng, max(4, int(round(ds))), max(4, int(round(ds))))
        dpos = rng.uniform(ds / 2, fs - ds / 2, size=2)
        dvel = rng.normal(0.0, params.speed / 2 if params.speed > 0 else 0.0, size=2)
        distractors.append([dtex, dpos, dvel])

    occluded = set()
    for a, b in params.occlusion_intervals:
        occluded.update(range(a, b + 1))

    frames, gt_boxes = [], []
    for t in range(length):
        frame = bg.copy()
        for dtex, dpos, dvel in distractors:
            _paste(frame, dtex, dpos[0], dpos[1])
            dpos += dvel
            np.clip(dpos, 4, fs - 4, out=dpos)
        if t not in occluded:
            patch = tex
            if patch.shape[:2] != (max(4, int(round(th))), max(4, int(round(tw)))):
                patch = cv2.resize(tex, (max(4, int(round(tw))), max(4, int(round(th)))))
            _paste(frame, patch, cx, cy)
        frames.append(frame)
        gt_boxes.append((cx, cy, tw, th))

        # advance the walk; bounce off a margin that keeps the box mostly visible
        vel = vel + rng.normal(0.0, params.speed * 0.4, size=2) if params.speed > 0 else vel * 0
        if params.speed > 0 and np.linalg.norm(vel) > 2 * params.speed:
            vel = vel / np.linalg.norm(vel) * 2 * params.speed
        cx, cy = cx + vel[0], cy + vel[1]
        lo_x, hi_x = tw / 4, fs - tw / 4
        lo_y, hi_y = th / 4, fs - th / 4
        if cx < lo_x or cx > hi_x:
            vel[0] = -vel[0]
            cx = min(max(cx, lo_x), hi_x)
        if cy < lo_y or cy > hi_y:
            vel[1] = -vel[1]
            cy = min(max(cy, lo_y), hi_y)
        if params.scale_drift > 0:
            factor = 1.0 + rng.normal(0.0, params.scale_drift)
            factor = min(max(factor, 0.97), 1.03)
            tw = min(max(tw * factor, 4.0), fs / 2)
            th = min(max(th * factor, 4.0), fs / 2)

    return SyntheticSequence(frames=frames, gt_boxes=gt_boxes, seed=seed, params=params)


# ---------------------------------------------------------------------------
# crops


@dataclass(frozen=True)
class CropRect:
    """Square source region of a crop, for mapping boxes back to the frame."""

    x0: float
    y0: float
    side: float

    def to_frame(self, box: BBox) -> tuple[float, float, float, float]:
        return (
            self.x0 + box.cx * self.side,
            self.y0 + box.cy * self.side,
            box.w * self.side,
            box.h * self.side,
        )


def _square_crop(frame: np.ndarray, cx: float, cy: float, side: float, out_size: int):
    """Mean-padded square crop resized to out_size; returns (image, rect)."""
    h, w = frame.shape[:2]
    x0, y0 = cx - side / 2, cy - side / 2
    ix0, iy0 = int(math.floor(x0)), int(math.floor(y0))
    iside = max(2, int(round(side)))
    mean = frame.reshape(-1, 3).mean(axis=0)
    canvas = np.empty((iside, iside, 3), dtype=frame.dtype)
    canvas[:] = mean
    fx0, fy0 = max(0, ix0), max(0, iy0)
    fx1, fy1 = min(w, ix0 + iside), min(h, iy0 + iside)
    if fx1 > fx0 and fy1 > fy0:
        canvas[fy0 - iy0 : fy1 - iy0, fx0 - ix0 : fx1 - ix0] = frame[fy0:fy1, fx0:fx1]
    out = cv2.resize(canvas, (out_size, out_size), interpolation=cv2.INTER_LINEAR)
    return np.clip(out, 0.0, 1.0), CropRect(x0=float(ix0), y0=float(iy0), side=float(iside))


def _box_side(box) -> float:
    w = max(float(box[2]), 1.0)  # degenerate boxes clamp to 1 px
    h = max(float(box[3]), 1.0)
    return math.sqrt(w * h)


def template_crop(frame: np.ndarray, box, out_size: int) -> np.ndarray:
    """Square template region, context factor 2, centered on the box."""
    side = TEMPLATE_CONTEXT * _box_side(box)
    crop, _ = _square_crop(frame, float(box[0]), float(box[1]), side, out_size)
    return crop


def search_crop(frame: np.ndarray, box, out_size: int, gt_box=None):
    """Square search region, context factor 4, around the box center.

    Returns (crop, gt_in_crop or None, rect); gt_in_crop is the ground-truth
    box re-expressed in normalized crop coordinates.
    """
    side = SEARCH_CONTEXT * _box_side(box)
    crop, rect = _square_crop(frame, float(box[0]), float(box[1]), side, out_size)
    gt_in_crop = None
    if gt_box is not None:
        gt_in_crop = BBox(
            cx=(float(gt_box[0]) - rect.x0) / rect.side,
            cy=(float(gt_box[1]) - rect.y0) / rect.side,
            w=max(float(gt_box[2]), 1.0) / rect.side,
            h=max(float(gt_box[3]), 1.0) / rect.side,
        )
    return crop, gt_in_crop, rect


def crop_pair(frame: np.ndarray, prev_box, template_size: int, search_size: int):
    """Template and search crops around one box, plus that box in crop coords."""
    z = template_crop(frame, prev_box, template_size)
    s, gt_in_crop, _ = search_crop(frame, prev_box, search_size, gt_box=prev_box)
    return z, s, gt_in_crop
