"""Training loop, tracking loop, one-pass evaluation, and the speed/FLOPs bench.

Training is desk scale: single-sample steps over synthetic sequences with an
AdamW-style optimizer, the head on a 10x higher learning rate than backbone
and selector. Evaluation follows the standard one-pass protocol: ground-truth
initialization on frame 0, no reset, pooled success/precision curves. The
bench reports analytic executed FLOPs, executed parameters, and wall-clock
FPS for the full and the layer-adaptive forward modes.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .adaptation import (
    Direct,
    SaturationPolicy,
    build_target,
    candidate_similarities,
    choose_layer,
    cosine_similarity,
    extract_selector_input,
    similarity_loss,
)
from .head import (
    LossWeights,
    box_at_cell,
    decode,
    focal_loss,
    giou_loss,
    grid_cell,
    hanning_2d,
    l1_loss,
    total_loss,
)
from .model import TrackerModel
from .rng import stream
from .synth import ScenarioParams, SyntheticSequence, generate_sequence, search_crop, template_crop
from .tensor import Tensor, backward

SUPERVISION_MODES = ("maximizing", "minimizing", "random", "fixed_layer")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; training aborted."""


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay over named parameter groups."""

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        # groups: iterable of (params, lr); params are Tensors
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.lr_scale = 1.0
        self.t = 0
        self.state = {}
        for params, _ in self.groups:
            for p in params:
                self.state[id(p)] = (np.zeros_like(p.data), np.zeros_like(p.data))

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for params, lr in self.groups:
            lr *= self.lr_scale
            for p in params:
                if p.grad is None:
                    continue
                m, v = self.state[id(p)]
                m *= self.b1
                m += (1 - self.b1) * p.grad
                v *= self.b2
                v += (1 - self.b2) * (p.grad * p.grad)
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                p.data -= lr * (update + self.wd * p.data)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    seed: int = 0
    mode: str = "maximizing"
    lr_head: float = 1e-3
    lr_backbone: float = 1e-4  # also the selector rate; head runs 10x hotter
    weight_decay: float = 1e-4
    lr_drop_at: float = 0.8  # fraction of steps after which both rates drop 10x
    center_jitter: float = 2.0  # crop-center offset, units of sqrt(w*h)
    scale_jitter: float = 0.25
    routing: str = "target"  # or "module": head follows the selector argmax
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.mode not in SUPERVISION_MODES:
            raise ValueError(f"mode must be one of {SUPERVISION_MODES}")
        if self.routing not in ("target", "module"):
            raise ValueError("routing must be 'target' or 'module'")
        if not 0.0 < self.lr_drop_at <= 1.0:
            raise ValueError("lr_drop_at must lie in (0, 1]")


@dataclass
class TrainResult:
    loss_history: list[float]
    components: list[dict]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("step,total,cls,iou,l1,sim\n")
            for i, c in enumerate(self.components):
                fh.write(f"{i},{c['total']:.8f},{c['cls']:.8f},{c['iou']:.8f},{c['l1']:.8f},{c['sim']:.8f}\n")


def _sample_pair(seq: SyntheticSequence, rng: np.random.Generator, model_cfg, cj: float, sj: float):
    """Draw a (template, search, gt-in-crop) training triple from one sequence."""
    n = len(seq)
    ti = int(rng.integers(0, n))
    si = int(rng.integers(0, n))
    z = template_crop(seq.frames[ti], seq.gt_boxes[ti], model_cfg.backbone.template_size[0])
    cx, cy, w, h = seq.gt_boxes[si]
    side = math.sqrt(max(w, 1.0) * max(h, 1.0))
    ox, oy = rng.uniform(-0.5, 0.5, size=2) * cj * side
    factor = math.exp(rng.uniform(-0.5, 0.5) * sj)
    crop_box = (cx + ox, cy + oy, w * factor, h * factor)
    s, gt_in_crop, _ = search_crop(seq.frames[si], crop_box, model_cfg.backbone.search_size[0],
                                   gt_box=seq.gt_boxes[si])
    return z, s, gt_in_crop


def _forward_to_lstar(model: TrackerModel, z_img, s_img):
    x = model.backbone.embed(z_img, s_img).tokens
    for i in range(1, model.config.l_star + 1):
        x, _ = model.backbone.layer_forward(x, i)
    return x


def train(model: TrackerModel, sequences: list[SyntheticSequence], tcfg: TrainConfig) -> TrainResult:
    """Optimize all parameters end to end under skip semantics."""
    if not sequences:
        raise ValueError("train: empty dataset")
    cfg = model.config
    if tcfg.mode == "fixed_layer" and model.selector is not None:
        raise ValueError("fixed_layer training expects a model built without a selector")
    head_params = [p for name, p in model.named_params() if name.startswith("head.")]
    rest_params = [p for name, p in model.named_params() if not name.startswith("head.")]
    opt = AdamW([(head_params, tcfg.lr_head), (rest_params, tcfg.lr_backbone)],
                weight_decay=tcfg.weight_decay)
    rng = stream(tcfg.seed, "train")
    grid = cfg.backbone.search_grid[0]
    split = cfg.backbone.n_template
    k_count = cfg.num_candidates
    history, components = [], []
    drop_step = int(tcfg.steps * tcfg.lr_drop_at)

    for step_idx in range(tcfg.steps):
        if step_idx == drop_step:
            opt.lr_scale = 0.1
        seq = sequences[int(rng.integers(0, len(sequences)))]
        z_img, s_img, gt = _sample_pair(seq, rng, cfg, tcfg.center_jitter, tcfg.scale_jitter)
        x_lstar = _forward_to_lstar(model, z_img, s_img)

        y = None
        if tcfg.mode in ("maximizing", "minimizing"):
            sims = candidate_similarities(x_lstar.data, model.candidates(x_lstar))
            y = np.zeros(k_count, dtype=T.default_dtype())
            y[int(np.argmax(sims)) if tcfg.mode == "maximizing" else int(np.argmin(sims))] = 1.0

        sim_term = Tensor(np.asarray(0.0))
        y_hat = None
        if model.selector is not None:
            z_vec = extract_selector_input(x_lstar, cfg.selector_input)
            y_hat = model.selector.forward(z_vec)
            if y is not None:
                sim_term = similarity_loss(y_hat, y)

        if tcfg.mode == "fixed_layer":
            chosen = 1
        elif tcfg.mode == "random":
            chosen = int(rng.integers(1, k_count + 1))
        elif tcfg.routing == "module":
            chosen = choose_layer(y_hat)
        else:
            chosen = int(np.argmax(y)) + 1

        x_out, _ = model.backbone.layer_forward(x_lstar, cfg.l_star + chosen)
        out = model.head.forward(x_out[split:, :])
        cell = grid_cell(gt, grid)
        cls = focal_loss(out.score, cell)
        pred = box_at_cell(out, cell)
        iou_term = giou_loss(pred, gt)
        l1_term = l1_loss(pred, gt)
        loss = total_loss(cls, iou_term, l1_term, sim_term, tcfg.weights)

        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at step {step_idx}")
        backward(loss)
        opt.step()
        model.zero_grads()
        history.append(value)
        components.append({
            "total": value,
            "cls": float(cls.data),
            "iou": float(iou_term.data),
            "l1": float(l1_term.data),
            "sim": float(sim_term.data),
        })
    return TrainResult(loss_history=history, components=components)


def eval_sim_loss(model: TrackerModel, pairs) -> float:
    """Mean selection loss against argmax-cosine targets over (Z, S) pairs."""
    cfg = model.config
    if model.selector is None:
        raise ValueError("model has no selection module")
    vals = []
    with T.no_grad():
        for z_img, s_img in pairs:
            x_lstar = _forward_to_lstar(model, z_img, s_img)
            y = build_target(x_lstar.data, model.candidates(x_lstar))
            y_hat = model.selector.forward(extract_selector_input(x_lstar, cfg.selector_input))
            vals.append(float(np.mean(np.abs(y_hat.data - y))))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# tracking


@dataclass
class TrackResult:
    boxes: list[tuple[float, float, float, float]]  # per frame, (cx, cy, w, h) px
    chosen_k: list[int | None]  # None on frame 0
    latencies: list[float]  # seconds per processed frame (frame 0 excluded)

    def to_otb_lines(self) -> list[str]:
        return [f"{cx - w / 2:.3f},{cy - h / 2:.3f},{w:.3f},{h:.3f}" for cx, cy, w, h in self.boxes]

    def to_json_dict(self) -> dict:
        return {
            "format_version": 1,
            "boxes_cxcywh": [[float(v) for v in b] for b in self.boxes],
            "chosen_k": self.chosen_k,
            "latency_s": self.latencies,
        }


def _adaptive_lstar(model: TrackerModel, x0: Tensor, split: int, mu: float):
    """Run layers until consecutive search features saturate; return (X^{l*}, l*)."""
    l = model.config.backbone.num_layers
    prev = x0
    x = x0
    for i in range(1, l):
        x, _ = model.backbone.layer_forward(prev, i)
        if cosine_similarity(x.data[split:], prev.data[split:]) > mu:
            return x, i
        prev = x
    return x, l - 1


def track(model: TrackerModel, sequence: SyntheticSequence, policy: SaturationPolicy,
          choice_mode: str = "module", use_window: bool = True, seed: int = 0,
          force_k: int | None = None) -> TrackResult:
    """One-pass tracking: init from frame-0 ground truth, never reset."""
    if len(sequence) < 2:
        raise ValueError("track: sequence must have at least 2 frames")
    cfg = model.config
    bb = cfg.backbone
    l = bb.num_layers
    if isinstance(policy, Direct) and not policy.l_star < l:
        raise ValueError(f"Direct l_star {policy.l_star} needs to stay below {l}")
    split = bb.n_template
    window = hanning_2d(bb.search_grid[0]) if use_window else None
    rng = stream(seed, "track", "choice")
    frame_h, frame_w = sequence.frames[0].shape[:2]

    template = template_crop(sequence.frames[0], sequence.gt_boxes[0], bb.template_size[0])
    boxes = [tuple(float(v) for v in sequence.gt_boxes[0])]
    ks: list[int | None] = [None]
    lats: list[float] = []

    with T.no_grad():
        for t in range(1, len(sequence)):
            t0 = time.perf_counter()
            s_img, _, rect = search_crop(sequence.frames[t], boxes[-1], bb.search_size[0])
            x = model.backbone.embed(template, s_img).tokens
            if isinstance(policy, Direct):
                l_star = policy.l_star
                for i in range(1, l_star + 1):
                    x, _ = model.backbone.layer_forward(x, i)
            else:
                x, l_star = _adaptive_lstar(model, x, split, policy.mu)
            k_frame = l - l_star

            if force_k is not None:
                k = min(force_k, k_frame)
            elif k_frame == 1:
                k = 1  # forced choice; the selector never runs
            elif choice_mode == "fixed" or model.selector is None:
                k = 1
            elif choice_mode == "random":
                k = int(rng.integers(1, k_frame + 1))
            else:
                probs = model.selector.forward(extract_selector_input(x, cfg.selector_input))
                valid = min(model.config.num_candidates, k_frame)
                k = choose_layer(probs[:valid])

            x_out, _ = model.backbone.layer_forward(x, l_star + k)
            out = model.head.forward(x_out[split:, :])
            box_crop = decode(out, window)
            cx, cy, w, h = rect.to_frame(box_crop)
            w = min(max(w, 2.0), float(frame_w))
            h = min(max(h, 2.0), float(frame_h))
            cx = min(max(cx, 0.0), float(frame_w))
            cy = min(max(cy, 0.0), float(frame_h))
            boxes.append((cx, cy, w, h))
            ks.append(int(k))
            lats.append(time.perf_counter() - t0)
    return TrackResult(boxes=boxes, chosen_k=ks, latencies=lats)


# ---------------------------------------------------------------------------
# scenario suites and probe pairs

# Disjoint seed spaces keep evaluation sequences out of the training set.
_TRAIN_SEED_BASE = 1_000_000_000
_EVAL_SEED_BASE = 2_000_000_000
_PAIR_SEED_BASE = 3_000_000_000


def train_suite(scenario: ScenarioParams, seed: int, count: int, frames: int):
    return [generate_sequence(_TRAIN_SEED_BASE + seed * 100_000 + i, frames, scenario)
            for i in range(count)]


def eval_suite(scenario: ScenarioParams, seed: int, count: int, frames: int):
    return [generate_sequence(_EVAL_SEED_BASE + seed * 100_000 + i, frames, scenario)
            for i in range(count)]


def eval_pairs(model_cfg, scenario: ScenarioParams, seed: int, count: int, jitter: float = 1.0):
    """(template, search, gt-in-crop) probe triples from fresh scenes."""
    out = []
    for i in range(count):
        seq = generate_sequence(_PAIR_SEED_BASE + seed * 100_000 + i, 2, scenario)
        rng = stream(seed, "pairs", i)
        z = template_crop(seq.frames[0], seq.gt_boxes[0], model_cfg.backbone.template_size[0])
        cx, cy, w, h = seq.gt_boxes[1]
        side = math.sqrt(max(w, 1.0) * max(h, 1.0))
        ox, oy = rng.uniform(-0.5, 0.5, size=2) * jitter * side
        s, gt, _ = search_crop(seq.frames[1], (cx + ox, cy + oy, w, h),
                               model_cfg.backbone.search_size[0], gt_box=seq.gt_boxes[1])
        out.append((z, s, gt))
    return out


def early_exit_iou(model: TrackerModel, pairs) -> np.ndarray:
    """Mean decode IoU per layer when the head reads each layer's output.

    No window penalty: the probe measures localization quality of the raw
    features, and the ground truth is deliberately off-center.
    """
    bb = model.config.backbone
    split = bb.n_template
    sums = np.zeros(bb.num_layers)
    with T.no_grad():
        for z_img, s_img, gt in pairs:
            trace = model.backbone.forward_full(z_img, s_img)
            for i in range(1, bb.num_layers + 1):
                out = model.head.forward(trace.states[i][split:, :])
                box = decode(out)
                sums[i - 1] += iou_xywh((box.cx, box.cy, box.w, box.h), (gt.cx, gt.cy, gt.w, gt.h))
    return sums / len(pairs)


# ---------------------------------------------------------------------------
# one-pass evaluation


def iou_xywh(a, b) -> float:
    """IoU of two (cx, cy, w, h) boxes in the same coordinate frame."""
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


@dataclass
class OPEResult:
    success_curve: np.ndarray  # 21 IoU thresholds, 0.00..1.00 step 0.05
    precision_curve: np.ndarray  # 51 center-error thresholds, 0..50 px
    auc: float
    precision: float  # at 20 px
    n_frames: int

    @staticmethod
    def from_pooled(ious: np.ndarray, errors: np.ndarray) -> "OPEResult":
        thr_iou = np.linspace(0.0, 1.0, 21)
        thr_err = np.arange(51)
        success = np.array([(ious >= t).mean() for t in thr_iou])
        prec = np.array([(errors <= t).mean() for t in thr_err])
        return OPEResult(success_curve=success, precision_curve=prec,
                         auc=float(success.mean()), precision=float(prec[20]),
                         n_frames=int(ious.size))

    def to_json_dict(self) -> dict:
        return {
            "format_version": 1,
            "auc": self.auc,
            "precision_at_20px": self.precision,
            "n_frames": self.n_frames,
            "success_curve": self.success_curve.tolist(),
            "precision_curve": self.precision_curve.tolist(),
        }

    def curves_to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("kind,threshold,value\n")
            for t, v in zip(np.linspace(0.0, 1.0, 21), self.success_curve):
                fh.write(f"success,{t:.2f},{v:.6f}\n")
            for t, v in zip(range(51), self.precision_curve):
                fh.write(f"precision,{t},{v:.6f}\n")


def ope_metrics(pred_boxes, gt_boxes) -> OPEResult:
    """OPE scores for aligned per-frame boxes; frame 0 excluded as initialization."""
    ious, errs = [], []
    for preds, gts in zip(pred_boxes, gt_boxes):
        for p, g in zip(preds[1:], gts[1:]):
            ious.append(iou_xywh(p, g))
            errs.append(math.hypot(p[0] - g[0], p[1] - g[1]))
    return OPEResult.from_pooled(np.asarray(ious), np.asarray(errs))


def run_ope(model: TrackerModel, sequences, policy: SaturationPolicy,
            choice_mode: str = "module", seed: int = 0):
    """Track every sequence and pool the per-frame scores."""
    sequences = list(sequences)
    if not sequences:
        raise ValueError("run_ope: no sequences")
    results = [track(model, seq, policy, choice_mode=choice_mode, seed=seed + i)
               for i, seq in enumerate(sequences)]
    ope = ope_metrics([r.boxes for r in results], [s.gt_boxes for s in sequences])
    return ope, results


# ---------------------------------------------------------------------------
# analytic FLOPs / executed parameters / wall-clock bench

# Multiply-adds count as 2 FLOPs throughout; only matrix-multiply, convolution
# and bias terms are counted (normalization/activation elementwise work is a
# sub-percent correction at these shapes).


def layer_flops(bb) -> int:
    n, d = bb.n_tokens, bb.embed_dim
    hidden = int(d * bb.mlp_ratio)
    mac = 3 * n * d * d + 2 * n * n * d + n * d * d + 2 * n * d * hidden
    bias = 4 * n * d + n * hidden
    return 2 * mac + bias


def embed_flops(bb) -> int:
    n, d = bb.n_tokens, bb.embed_dim
    mac = n * 3 * bb.patch_size**2 * d
    return 2 * mac + 2 * n * d  # projection bias + positional add


def selector_flops(model: TrackerModel) -> int:
    if model.selector is None:
        return 0
    i, h, k = model.selector.input_dim, model.selector.w1.shape[1], model.selector.num_candidates
    mac = i * h + h * h + h * k
    return 2 * mac + 2 * h + k


def head_flops(model: TrackerModel) -> int:
    d, c = model.config.backbone.embed_dim, model.config.head_channels
    cells = model.config.backbone.n_search
    widths = [d, c, c // 2, c // 4, c // 8]
    total = 0
    for _, out_ch in model.head._BRANCHES:
        mac = sum(9 * widths[s] * widths[s + 1] for s in range(4)) + widths[-1] * out_ch
        bias = sum(widths[1:]) + out_ch
        total += (2 * mac + bias) * cells
    return total


def executed_flops(model: TrackerModel, mode: str) -> dict:
    bb = model.config.backbone
    if mode == "full":
        layers = bb.num_layers
        sel = 0
    elif mode == "layer_adaptive":
        layers = model.config.l_star + 1
        sel = selector_flops(model) if model.config.num_candidates > 1 else 0
    else:
        raise ValueError(f"unknown bench mode {mode!r}")
    parts = {
        "embed": embed_flops(bb),
        "backbone": layers * layer_flops(bb),
        "selector": sel,
        "head": head_flops(model),
    }
    parts["total"] = sum(parts.values())
    return parts


def executed_params(model: TrackerModel, mode: str) -> int:
    """Parameters of the components that actually run in the given mode."""
    per_layer = sum(p.size for n, p in model.named_params() if n.startswith("backbone.layers.0."))
    other = sum(p.size for n, p in model.named_params()
                if n.startswith("backbone.") and not n.startswith("backbone.layers."))
    head = sum(p.size for n, p in model.named_params() if n.startswith("head."))
    sel = sum(p.size for n, p in model.named_params() if n.startswith("selector."))
    if mode == "full":
        return other + model.config.backbone.num_layers * per_layer + head
    if mode == "layer_adaptive":
        use_sel = sel if model.config.num_candidates > 1 else 0
        return other + (model.config.l_star + 1) * per_layer + head + use_sel
    raise ValueError(f"unknown bench mode {mode!r}")


@dataclass
class BenchReport:
    mode: str
    fps: float
    n_frames: int
    flops_per_frame: int
    executed_param_count: int
    flops_breakdown: dict

    def to_json_dict(self) -> dict:
        return {
            "format_version": 1,
            "mode": self.mode,
            "fps": self.fps,
            "n_frames": self.n_frames,
            "flops_per_frame": self.flops_per_frame,
            "executed_params": self.executed_param_count,
            "flops_breakdown": self.flops_breakdown,
        }


def bench(model: TrackerModel, mode: str, n_frames: int = 500, warmup: int = 20,
          seed: int = 7) -> BenchReport:
    """Time the per-frame tracking pipeline on fixed-size inputs, single thread."""
    if n_frames < 100:
        raise ValueError("bench: need at least 100 timed frames")
    cfg = model.config
    bb = cfg.backbone
    flops = executed_flops(model, mode)
    params = executed_params(model, mode)

    frame_size = max(2 * bb.search_size[0], 128)
    scen = ScenarioParams(frame_size=frame_size, target_size=frame_size / 6.0,
                          distractor_count=1, speed=1.0)
    seq = generate_sequence(seed, 2, scen)
    frame, box = seq.frames[1], seq.gt_boxes[0]
    template = template_crop(seq.frames[0], seq.gt_boxes[0], bb.template_size[0])
    window = hanning_2d(bb.search_grid[0])
    split = bb.n_template
    l = bb.num_layers

    def one_frame():
        s_img, _, rect = search_crop(frame, box, bb.search_size[0])
        x = model.backbone.embed(template, s_img).tokens
        if mode == "full":
            for i in range(1, l + 1):
                x, _ = model.backbone.layer_forward(x, i)
            x_out = x
        else:
            for i in range(1, cfg.l_star + 1):
                x, _ = model.backbone.layer_forward(x, i)
            if cfg.num_candidates > 1 and model.selector is not None:
                probs = model.selector.forward(extract_selector_input(x, cfg.selector_input))
                k = choose_layer(probs)
            else:
                k = 1
            x_out, _ = model.backbone.layer_forward(x, cfg.l_star + k)
        out = model.head.forward(x_out[split:, :])
        return decode(out, window)

    with T.no_grad(), threadpool_limits(limits=1):
        for _ in range(warmup):
            one_frame()
        t0 = time.perf_counter()
        for _ in range(n_frames):
            one_frame()
        elapsed = time.perf_counter() - t0

    return BenchReport(mode=mode, fps=n_frames / elapsed, n_frames=n_frames,
                       flops_per_frame=flops["total"], executed_param_count=params,
                       flops_breakdown=flops)


def bench_both(model: TrackerModel, n_frames: int = 500, warmup: int = 20, seed: int = 7) -> dict:
    """Bench both modes on identical inputs and report the ratios."""
    full = bench(model, "full", n_frames=n_frames, warmup=warmup, seed=seed)
    la = bench(model, "layer_adaptive", n_frames=n_frames, warmup=warmup, seed=seed)
    return {
        "format_version": 1,
        "full": full.to_json_dict(),
        "layer_adaptive": la.to_json_dict(),
        "flop_ratio": la.flops_per_frame / full.flops_per_frame,
        "param_ratio": la.executed_param_count / full.executed_param_count,
        "fps_ratio": la.fps / full.fps,
    }
