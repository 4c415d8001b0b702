"""Optimization loop: SGD-momentum / AdamW, cosine annealing, global-norm
gradient clipping, per-epoch validation mAP, checkpointing and curve logs.

Batches run one tape per image with gradients accumulated by summation;
the loop itself is sequential, so runs are bit-reproducible for a fixed
(seed, config, data, backend).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import Dataset
from .gradcheck import GradCheckReport, finite_diff_check
from .losses import LossWeights, compute_losses
from .metrics import map_over_thresholds
from .model import ModelConfig, ModelState, assign_targets, forward, init_model
from .postprocess import run_inference
from .rng import SplitMix64


@dataclass
class TrainConfig:
    optimizer: str = "adamw"          # adamw | sgd-momentum
    lr0: float = 1e-3
    lr_min: float = 0.0
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 5e-4
    epochs: int = 40
    batch_size: int = 8
    clip_norm: float = 10.0
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    eval_every: int = 5
    focal: bool = False
    box_variant: str = "giou"
    mask_enabled: bool = True

    def __post_init__(self):
        if self.optimizer not in ("adamw", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr0 > self.lr_min >= 0:
            raise ValueError("need lr0 > lr_min >= 0")
        if self.batch_size < 1 or self.clip_norm <= 0 or self.eval_every < 1:
            raise ValueError("bad batch_size / clip_norm / eval_every")


def cosine_lr(t: int, total: int, lr0: float, lr_min: float) -> float:
    """lr_min + 0.5 (lr0 - lr_min) (1 + cos(pi t / total))."""
    if total < 1:
        raise ValueError("total steps must be >= 1")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total))


def clip_gradients(state: ModelState, clip_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most clip_norm;
    returns the factor applied (1.0 when no clipping happens)."""
    sq = 0.0
    for name, p in state.named():
        if p.grad is None:
            continue
        if not np.isfinite(p.grad).all():
            raise FloatingPointError(f"non-finite gradient in {name}")
        sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(sq)
    if norm <= clip_norm or norm == 0.0:
        return 1.0
    factor = clip_norm / norm
    for _, p in state.named():
        if p.grad is not None:
            p.grad = p.grad * p.data.dtype.type(factor)
    return factor


class OptimizerState:
    """Per-parameter moment buffers persisted across steps."""

    def __init__(self, cfg: TrainConfig, state: ModelState):
        self.cfg = cfg
        self.t = 0
        if cfg.optimizer == "sgd-momentum":
            self.vel = {n: np.zeros_like(p.data) for n, p in state.named()}
        else:
            self.m = {n: np.zeros_like(p.data) for n, p in state.named()}
            self.v = {n: np.zeros_like(p.data) for n, p in state.named()}


def optimizer_step(state: ModelState, opt: OptimizerState, lr: float) -> None:
    """One parameter update from the accumulated gradients."""
    cfg = opt.cfg
    if cfg.optimizer == "sgd-momentum":
        for name, p in state.named():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            vel = opt.vel[name] * p.data.dtype.type(cfg.momentum) + g
            opt.vel[name] = vel
            p.data = p.data - p.data.dtype.type(lr) * vel
    else:
        opt.t += 1
        b1, b2 = cfg.betas
        eps = 1e-8
        bc1 = 1.0 - b1 ** opt.t
        bc2 = 1.0 - b2 ** opt.t
        for name, p in state.named():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            dt = p.data.dtype.type
            opt.m[name] = dt(b1) * opt.m[name] + dt(1.0 - b1) * g
            opt.v[name] = dt(b2) * opt.v[name] + dt(1.0 - b2) * (g * g)
            m_hat = opt.m[name] / dt(bc1)
            v_hat = opt.v[name] / dt(bc2)
            update = m_hat / (np.sqrt(v_hat) + dt(eps))
            p.data = p.data - dt(lr) * update - dt(lr * cfg.weight_decay) * p.data
    for _, p in state.named():
        if p.grad is not None and not np.isfinite(p.data).all():
            raise FloatingPointError("non-finite parameter after update")


@dataclass
class TrainLogRow:
    epoch: int
    total: float
    box: float
    cls: float
    mask: float
    risk: float
    lr: float
    val_map50: float
    val_map5095: float


def zero_grads(state: ModelState) -> None:
    for _, p in state.named():
        p.grad = None


def evaluate_map(state: ModelState, ds: Dataset,
                 mask_enabled: bool = True) -> tuple[float, float]:
    """Validation mAP50 / mAP50-95 over a dataset (inference mode)."""
    dets_by_image, gts_by_image = [], []
    with T.no_grad():
        for sample in ds.samples:
            fwd = forward(state, sample.image, mask_enabled=mask_enabled)
            dets_by_image.append(run_inference(fwd.preds, ds.classes,
                                               sample.stem))
            gts_by_image.append(sample.boxes)
    try:
        map50, map5095, _ = map_over_thresholds(dets_by_image, gts_by_image,
                                                ds.classes)
    except ValueError:
        return 0.0, 0.0
    return map50, map5095


def fit(state: ModelState, train_ds: Dataset, val_ds: Dataset | None,
        cfg: TrainConfig, run_dir=None, start_epoch: int = 0,
        prior_log: list[TrainLogRow] | None = None):
    """Train for cfg.epochs epochs; returns (state, log rows, ckpt paths).

    Writes last.ckpt / best.ckpt and curves.csv into run_dir when given.
    start_epoch > 0 continues a resumed run (schedule positions included).
    """
    from .report import write_curves_csv  # local import, avoids a cycle

    if cfg.epochs > 0 and len(train_ds) == 0:
        raise ValueError("empty training set")
    if val_ds is not None and len(val_ds) > 0 and \
            [c.id for c in val_ds.classes] != [c.id for c in train_ds.classes]:
        raise ValueError("train/val class tables differ")
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    log: list[TrainLogRow] = list(prior_log or [])
    ckpts: dict[str, Path] = {}
    if cfg.epochs <= start_epoch:
        return state, log, ckpts

    batches_per_epoch = max(1, math.ceil(len(train_ds) / cfg.batch_size))
    total_steps = cfg.epochs * batches_per_epoch
    opt = OptimizerState(cfg, state)
    rng = SplitMix64(cfg.seed).spawn(0xE70C)
    best_map50 = -1.0
    last_val = (0.0, 0.0)
    step = start_epoch * batches_per_epoch
    logf = (run_dir / "log.txt").open("a") if run_dir is not None else None

    targets_cache = [assign_targets(s.boxes, state.cfg.grid_size,
                                    state.cfg.num_classes)
                     for s in train_ds.samples]
    try:
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            order = list(range(len(train_ds)))
            rng_epoch = rng.spawn(epoch)
            rng_epoch.shuffle(order)
            sums = np.zeros(5, dtype=np.float64)
            lr = cfg.lr0
            for b in range(batches_per_epoch):
                idxs = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                if not idxs:
                    continue
                zero_grads(state)
                batch_sums = np.zeros(5, dtype=np.float64)
                for i in idxs:
                    sample = train_ds.samples[i]
                    fwd = forward(state, sample.image,
                                  mask_enabled=cfg.mask_enabled)
                    total, parts = compute_losses(
                        fwd, targets_cache[i], cfg.weights,
                        box_variant=cfg.box_variant, focal=cfg.focal,
                        mask_enabled=cfg.mask_enabled)
                    if not np.isfinite(parts.total):
                        raise FloatingPointError(
                            f"non-finite loss at epoch {epoch} batch {b}")
                    T.backward(T.scale(total, 1.0 / len(idxs)))
                    batch_sums += [parts.total, parts.box, parts.cls,
                                   parts.mask, parts.risk]
                clip_gradients(state, cfg.clip_norm)
                lr = cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min)
                optimizer_step(state, opt, lr)
                step += 1
                sums += batch_sums / len(idxs)
            means = sums / batches_per_epoch
            if val_ds is not None and len(val_ds) > 0 and (
                    epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
                last_val = evaluate_map(state, val_ds, cfg.mask_enabled)
                if run_dir is not None and last_val[0] > best_map50:
                    best_map50 = last_val[0]
                    ckpts["best"] = run_dir / "best.ckpt"
                    save_checkpoint(ckpts["best"],
                                    {n: p.data for n, p in state.named()})
            row = TrainLogRow(epoch, *means, lr, *last_val)
            log.append(row)
            if logf is not None:
                logf.write(
                    f"epoch {row.epoch}: total {row.total:.6f} box {row.box:.6f} "
                    f"cls {row.cls:.6f} mask {row.mask:.6f} risk {row.risk:.6f} "
                    f"lr {row.lr:.6f} map50 {row.val_map50:.6f}\n")
                logf.flush()
            if run_dir is not None:
                ckpts["last"] = run_dir / "last.ckpt"
                save_checkpoint(ckpts["last"],
                                {n: p.data for n, p in state.named()})
                write_curves_csv(log, run_dir / "curves.csv")
    finally:
        if logf is not None:
            logf.close()
    return state, log, ckpts


def _mini_scene(seed: int):
    """16x16 noisy scene with two rectangles (the generator's minimum image
    size is 32, so gradcheck rolls its own miniature sample)."""
    from .data import GroundTruthBox
    from .synth import PALETTE

    rng = SplitMix64(seed)
    img = 0.45 + rng.fill_uniform((16, 16, 3), -0.05, 0.05)
    img[2:8, 3:9] = np.asarray(PALETTE[0]) + 0.5 * img[2:8, 3:9] - 0.225
    img[9:14, 9:15] = np.asarray(PALETTE[4]) + 0.5 * img[9:14, 9:15] - 0.225
    img = np.clip(img, 0.0, 1.0)
    boxes = [
        GroundTruthBox(0, cx=0.375, cy=0.3125, w=0.375, h=0.375, severity=1.0),
        GroundTruthBox(2, cx=0.75, cy=0.71875, w=0.375, h=0.3125, severity=0.4),
    ]
    return img, boxes


def gradcheck_command(tol: float = 1e-5, h: float = 1e-3,
                      seed: int = 20240917) -> dict[str, GradCheckReport]:
    """Finite-difference check of every loss term and the weighted total on
    a miniature model (input 16, two scales), in float64."""
    with T.precision("float64"):
        cfg = ModelConfig(input_size=16, channels=(4, 6), num_classes=3,
                          seed=seed)
        cfg.fusion.d_k = 4
        cfg.fusion.c_f = 8
        state = init_model(cfg)
        image, gt_boxes = _mini_scene(seed)
        targets = assign_targets(gt_boxes, cfg.grid_size, cfg.num_classes)
        weights = LossWeights()

        def term_fn(term: str):
            def f():
                from . import losses
                fwd = forward(state, image)
                if term == "total":
                    total, _ = compute_losses(fwd, targets, weights)
                    return total
                if term == "box":
                    return losses.box_loss(fwd.preds, targets)
                if term == "cls":
                    return losses.cls_loss(fwd.preds, targets)
                if term == "risk":
                    return losses.risk_loss(fwd.preds, targets)
                return losses.mask_loss(fwd.masked, fwd.feats)
            return f

        reports = {}
        for term in ("box", "cls", "mask", "risk", "total"):
            reports[term] = finite_diff_check(term_fn(term),
                                              dict(state.params), h=h, tol=tol)
        return reports
