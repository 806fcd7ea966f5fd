"""Synthetic segmentation task for exercising a GALD head end to end.

Each image holds one large rectangle and a few small squares of the *same*
colour on a noisy background, so telling ``large_obj`` from ``small_obj``
takes spatial context rather than pixel colour.  A three-conv backbone
feeds the head; a 1x1 classifier and bilinear upsampling give per-pixel
logits.  Training is SGD with momentum and a poly learning-rate decay,
optionally with OHEM.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import nn_ops as ops
from .ga_heads import GaConfig
from .ld_modules import GaldConfig, Ldv1Config, Ldv2Config, build_gald, gald_param_shapes
from .metrics import BOUNDARY_SLACKS, confusion_matrix, iou_from_confusion, mean_boundary_fscore
from .nn_ops import Graph, init_params

CLASSES = ("background", "large_obj", "small_obj")
NUM_CLASSES = len(CLASSES)


@dataclass
class SynthSample:
    image: np.ndarray   # (1, 3, h, w)
    labels: np.ndarray  # (h, w) int64


def _free(occupied: np.ndarray, y: int, x: int, size: int, margin: int = 1) -> bool:
    return not occupied[max(y - margin, 0):y + size + margin, max(x - margin, 0):x + size + margin].any()


def synth_sample(rng: np.random.Generator, h: int, w: int) -> SynthSample:
    labels = np.zeros((h, w), dtype=np.int64)
    # large rectangle covering at least a quarter of the image
    rh = int(rng.integers(h // 2, (3 * h) // 4 + 1))
    min_rw = math.ceil(0.25 * h * w / rh)
    rw = int(rng.integers(min_rw, (3 * w) // 4 + 1))
    ry = int(rng.integers(0, h - rh + 1))
    rx = int(rng.integers(0, w - rw + 1))
    labels[ry:ry + rh, rx:rx + rw] = 1

    max_side = max(h // 8, 3)
    placed = 0
    target = int(rng.integers(1, 4))
    for _ in range(200):
        if placed == target:
            break
        side = int(rng.integers(3, max_side + 1))
        y = int(rng.integers(0, h - side + 1))
        x = int(rng.integers(0, w - side + 1))
        if _free(labels > 0, y, x, side):
            labels[y:y + side, x:x + side] = 2
            placed += 1
    if placed == 0:
        raise RuntimeError("could not place a small object")  # unreachable for h, w >= 32

    colour = np.array([1.0, 0.6, -0.4]) + rng.normal(0.0, 0.1, size=3)
    image = rng.normal(0.0, 0.6, size=(3, h, w))
    image[:, labels > 0] += colour[:, None]
    return SynthSample(image=image[None], labels=labels)


def synth_dataset(seed: int, count: int, h: int = 64, w: int = 64) -> list[SynthSample]:
    """``count`` samples, each from its own ``(seed, index)`` stream."""
    if h < 32 or w < 32:
        raise ValueError(f"images must be at least 32x32, got {h}x{w}")
    return [synth_sample(np.random.default_rng([seed, i]), h, w) for i in range(count)]


# ---------------------------------------------------------------------------
# loss and schedule

def cross_entropy_ohem(logits, labels, topk_fraction: float = 1.0):
    """Mean softmax cross-entropy over the ``ceil(f * N_pix)`` highest-loss pixels.

    ``logits`` is (n, classes, h, w), ``labels`` (n, h, w).  Ties in the
    ranking go to the lowest flat pixel index.  backward -> (grad_logits,).
    """
    if not 0.0 < topk_fraction <= 1.0:
        raise ValueError(f"topk_fraction must lie in (0, 1], got {topk_fraction}")
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels outside [0, {k})")

    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    per_pixel = -np.take_along_axis(logp, labels[:, None], axis=1)[:, 0].reshape(-1)
    n_sel = math.ceil(topk_fraction * per_pixel.size)
    chosen = np.argsort(-per_pixel, kind="stable")[:n_sel]
    selected = np.zeros(per_pixel.size, dtype=bool)
    selected[chosen] = True
    loss = float(per_pixel[chosen].mean())

    def backward(grad=1.0):
        probs = np.exp(logp)
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
        weight = (selected.reshape(n, 1, h, w) / n_sel) * float(grad)
        return ((probs - onehot) * weight,)

    return loss, backward


def poly_lr(base_lr: float, step: int, total_steps: int, power: float = 0.9) -> float:
    return base_lr * (1.0 - step / total_steps) ** power


# ---------------------------------------------------------------------------
# model

def model_param_shapes(head: GaldConfig, channels: int) -> dict[str, tuple]:
    c = channels
    shapes = {
        "backbone.conv1.w": (c, 3, 3, 3), "backbone.conv1.b": (c,),
        "backbone.conv2.w": (c, c, 3, 3), "backbone.conv2.b": (c,),
        "backbone.conv3.w": (c, c, 3, 3), "backbone.conv3.b": (c,),
    }
    shapes.update(gald_param_shapes(head.ga, head.ld, c, prefix="head."))
    shapes["cls.w"] = (NUM_CLASSES, 2 * c, 1, 1)
    shapes["cls.b"] = (NUM_CLASSES,)
    return shapes


def init_model(head: GaldConfig, channels: int, seed: int) -> dict[str, np.ndarray]:
    """Head and classifier keep the default uniform init; the ReLU backbone
    kernels get the He-uniform bound ``sqrt(6 / fan_in)``.

    Without the wider backbone init some seeds sit on a constant-prediction
    plateau for most of training.
    """
    params = init_params(model_param_shapes(head, channels), seed)
    for name in ("backbone.conv1.w", "backbone.conv2.w", "backbone.conv3.w"):
        params[name] = params[name] * math.sqrt(6.0)
    return params


def build_model(g: Graph, image: int, head: GaldConfig) -> int:
    h, w = g.value(image).shape[2:]
    x = g.op(ops.relu, g.conv(image, "backbone.conv1", padding=1))
    x = g.op(ops.relu, g.conv(x, "backbone.conv2", padding=1))
    x = g.op(ops.relu, g.conv(x, "backbone.conv3", padding=1, stride=2))
    x = build_gald(g, x, head.ga, head.ld, head.arrangement, prefix="head.")
    return g.op(ops.bilinear_upsample, g.conv(x, "cls"), out_h=h, out_w=w)


def predict(params, head: GaldConfig, images: np.ndarray) -> np.ndarray:
    g = Graph(params)
    logits = g.value(build_model(g, g.input(images), head))
    return logits.argmax(axis=1)


def evaluate(params, head: GaldConfig, samples: list[SynthSample], batch: int = 16) -> dict:
    cm = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    fscores = {s: [] for s in BOUNDARY_SLACKS}
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        preds = predict(params, head, np.concatenate([s.image for s in chunk]))
        for pred, sample in zip(preds, chunk):
            cm += confusion_matrix(pred, sample.labels, NUM_CLASSES)
            for slack in BOUNDARY_SLACKS:
                fscores[slack].append(mean_boundary_fscore(pred, sample.labels, NUM_CLASSES, slack))
    mean, per_class = iou_from_confusion(cm)
    return {
        "miou": mean,
        "per_class_iou": [float(v) for v in per_class],
        "boundary_f": {str(s): float(np.mean(v)) for s, v in fscores.items()},
    }


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    seed: int = 42
    epochs: int = 10
    lr: float = 0.05
    batch: int = 8
    ohem_topk_fraction: float = 0.25
    head: GaldConfig = GaldConfig()
    samples: int = 200
    size: int = 64
    channels: int = 8
    momentum: float = 0.9
    eval_samples: int = 40
    eval_seed: int = 2024

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch < 1 or self.samples < 1:
            raise ValueError("batch and samples must be positive")
        if not 0.0 < self.ohem_topk_fraction <= 1.0:
            raise ValueError("ohem_topk_fraction must lie in (0, 1]")


@dataclass
class TrainReport:
    seed: int
    head: str
    status: str                      # "ok" or "diverged"
    steps: int
    final_miou: float
    per_class_iou: list
    boundary_f: dict
    loss_curve: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def describe_config(cfg: TrainConfig) -> dict:
    def ld_dict(ld):
        if ld is None:
            return None
        kind = "v1" if isinstance(ld, Ldv1Config) else "v2"
        return {"kind": kind, **asdict(ld)}

    d = asdict(cfg)
    d["head"] = {"ga": asdict(cfg.head.ga), "ld": ld_dict(cfg.head.ld), "arrangement": cfg.head.arrangement}
    return d


def train_toy(cfg: TrainConfig, train_set: Optional[list] = None, eval_set: Optional[list] = None) -> TrainReport:
    """Train from scratch and evaluate on a held-out synthetic set.

    Deterministic for a given config.  A non-finite loss stops training and
    returns a report with ``status="diverged"``.
    """
    with threadpool_limits(limits=1):
        return _train(cfg, train_set, eval_set)


def _train(cfg, train_set, eval_set) -> TrainReport:
    train_set = train_set if train_set is not None else synth_dataset(cfg.seed, cfg.samples, cfg.size, cfg.size)
    eval_set = eval_set if eval_set is not None else synth_dataset(cfg.eval_seed, cfg.eval_samples, cfg.size, cfg.size)
    params = init_model(cfg.head, cfg.channels, cfg.seed)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng([cfg.seed, 1])

    steps_per_epoch = math.ceil(len(train_set) / cfg.batch)
    total = cfg.epochs * steps_per_epoch
    losses: list[float] = []
    status = "ok"
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            images = np.concatenate([train_set[i].image for i in idx])
            labels = np.stack([train_set[i].labels for i in idx])

            g = Graph(params)
            image_node = g.input(images)
            logits_node = build_model(g, image_node, cfg.head)
            loss, loss_back = cross_entropy_ohem(g.value(logits_node), labels, cfg.ohem_topk_fraction)
            if not math.isfinite(loss):
                status = "diverged"
                break
            losses.append(loss)
            (glogits,) = loss_back(1.0)
            _, grads = g.gradients(logits_node, glogits, [image_node])

            lr = poly_lr(cfg.lr, step, total)
            for name in params:
                velocity[name] = cfg.momentum * velocity[name] + grads[name]
                params[name] = params[name] - lr * velocity[name]
            step += 1
        if status != "ok":
            break

    if status == "ok":
        ev = evaluate(params, cfg.head, eval_set)
    else:
        ev = {"miou": float("nan"), "per_class_iou": [float("nan")] * NUM_CLASSES,
              "boundary_f": {str(s): float("nan") for s in BOUNDARY_SLACKS}}
    return TrainReport(
        seed=cfg.seed, head=cfg.head.label, status=status, steps=step,
        final_miou=ev["miou"], per_class_iou=ev["per_class_iou"], boundary_f=ev["boundary_f"],
        loss_curve=losses, config=describe_config(cfg),
    )


def ablation_heads(ga: GaConfig = GaConfig(kind="aspp")) -> dict[str, GaldConfig]:
    return {
        "ga_only": GaldConfig(ga=ga, ld=None),
        "ga_ldv1": GaldConfig(ga=ga, ld=Ldv1Config()),
        "ga_ldv2": GaldConfig(ga=ga, ld=Ldv2Config()),
    }


def run_ablation(seeds=(0, 1, 2, 3, 4), base: TrainConfig = TrainConfig(), slack: int = 3,
                 heads: Optional[dict[str, GaldConfig]] = None) -> dict:
    """Train every head on every seed; summarise boundary F at ``slack``.

    The evaluation set is shared across seeds and heads.
    """
    heads = heads if heads is not None else ablation_heads()
    eval_set = synth_dataset(base.eval_seed, base.eval_samples, base.size, base.size)
    per_seed: dict[str, list[float]] = {name: [] for name in heads}
    miou: dict[str, list[float]] = {name: [] for name in heads}
    for seed in seeds:
        train_set = synth_dataset(seed, base.samples, base.size, base.size)
        for name, head in heads.items():
            cfg = TrainConfig(**{**base.__dict__, "seed": seed, "head": head})
            report = train_toy(cfg, train_set, eval_set)
            if report.status != "ok":
                raise FloatingPointError(f"{name} diverged on seed {seed}")
            per_seed[name].append(report.boundary_f[str(slack)])
            miou[name].append(report.final_miou)
    means = {name: float(np.mean(v)) for name, v in per_seed.items()}
    return {
        "slack": slack,
        "seeds": list(seeds),
        "boundary_f": per_seed,
        "mean_boundary_f": means,
        "miou": miou,
        "mean_miou": {name: float(np.mean(v)) for name, v in miou.items()},
        "ordering": sorted(means, key=means.get, reverse=True),
    }
