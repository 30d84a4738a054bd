"""Training engine: loss, optimizer, schedules, augmentation, strategies.

``run_strategy`` drives one training run of a composed model under one of
five weight-handling strategies (what is initialized from checkpoints and
what stays frozen); ``pretrain_source`` produces the RGB-pretrained
encoder those strategies consume.  Both share one deterministic loop:
given (config, seed) every batch, augmentation draw, and checkpoint byte
is reproducible.
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .autodiff import ComputeTape, NonFiniteError, ShapeMismatch, Tensor, Variable, record_op
from .backbone import (
    ChannelReplicate,
    ClassifierHead,
    ComposedModel,
    Encoder,
    TrainableFlags,
    checkpoint_components,
    compose,
    desk_encoder_config,
    load_checkpoint,
    restore_component,
    save_checkpoint,
)
from .colorizers import ColorizerConfig, ColorizerKind, build_colorizer, desk_config
from .datasets import apply_policy, compute_norm_stats, normalize_images
from .layers import Module
from .stats import roc_auc

__all__ = [
    "masked_bce_loss",
    "SgdConfig",
    "Sgd",
    "OneCycleConfig",
    "one_cycle_lr",
    "LrFinderConfig",
    "LrFindResult",
    "lr_find",
    "training_step_fn",
    "AugmentConfig",
    "augment",
    "Strategy",
    "StrategyConfig",
    "MissingDependencyError",
    "build_model",
    "restore_model",
    "TrainConfig",
    "CheckpointRecord",
    "TrainRun",
    "run_strategy",
    "pretrain_source",
    "predict_scores",
    "EvalReport",
    "evaluate_model",
]

STABILITY_BOUND = 50.0  # exponent arguments are clamped to [-50, 0]


def _stable_sigmoid(z):
    pos = z >= 0
    ez = np.exp(np.clip(np.where(pos, -z, z), -STABILITY_BOUND, 0.0))
    return np.where(pos, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def masked_bce_loss(logits, targets, mask):
    """Mean binary cross-entropy with logits over mask==1 entries.

    Numerically stable form: max(z,0) - z*t + log(1 + exp(-|z|)).  An
    all-zero mask yields a constant 0 loss with zero gradient (documented
    sentinel for fully-ignored batches).
    """
    targets = np.asarray(targets, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    shape = tuple(logits.shape)
    if targets.shape != shape or mask.shape != shape:
        raise ShapeMismatch("masked_bce_loss", shape, targets.shape)
    total = mask.sum()
    if total == 0.0:
        return Variable(Tensor(np.zeros(1)))

    z = logits.value.data.astype(np.float64)
    per = np.maximum(z, 0.0) - z * targets + np.log1p(
        np.exp(np.clip(-np.abs(z), -STABILITY_BOUND, 0.0))
    )
    value = (per * mask).sum() / total
    logits_var = logits
    # Cast once so the whole backward pass stays in the working dtype.
    grad_base = (mask * (_stable_sigmoid(z) - targets) / total).astype(logits.value.data.dtype)

    def vjp(g):
        return (g.reshape(-1)[0] * grad_base,)

    return record_op(np.array([value]), (logits_var,), vjp)


@dataclass(frozen=True)
class SgdConfig:
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"sgd: momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise ValueError(f"sgd: weight_decay must be >= 0, got {self.weight_decay}")


class Sgd:
    """SGD with momentum and decoupled-into-gradient weight decay.

    v <- momentum * v + grad + weight_decay * theta;  theta <- theta - lr * v.
    Only Variables flagged trainable are touched.
    """

    def __init__(self, params, config=SgdConfig()):
        self.params = [p for p in params if p.trainable]
        self.config = config
        self._velocity = {}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr):
        if lr <= 0.0 or not math.isfinite(lr):
            raise ValueError(f"sgd: lr must be positive and finite, got {lr}")
        cfg = self.config
        for p in self.params:
            g = p.grad.data
            if not np.isfinite(g).all():
                raise NonFiniteError(f"sgd: non-finite gradient for {p.name or 'parameter'}")
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.value.data
            vel = self._velocity.get(id(p))
            if vel is None:
                vel = np.zeros_like(p.value.data)
                self._velocity[id(p)] = vel
            vel *= cfg.momentum
            vel += g
            p.value.data -= lr * vel


@dataclass(frozen=True)
class OneCycleConfig:
    max_lr: float
    total_steps: int
    pct_start: float = 0.3
    div: float = 25.0
    final_div: float = 1e4

    def __post_init__(self):
        if self.max_lr <= 0:
            raise ValueError(f"one_cycle: max_lr must be positive, got {self.max_lr}")
        if self.total_steps < 1:
            raise ValueError(f"one_cycle: total_steps must be >= 1, got {self.total_steps}")
        if not 0.0 < self.pct_start < 1.0:
            raise ValueError(f"one_cycle: pct_start must be in (0, 1), got {self.pct_start}")
        if self.div <= 1.0 or self.final_div <= 1.0:
            raise ValueError(f"one_cycle: div and final_div must exceed 1, got {self}")


def one_cycle_lr(config, step):
    """Learning rate at an integer step of the one-cycle schedule.

    Linear warmup from max/div to max over the first pct_start of
    training, then cosine annealing down to max/final_div.  The three
    anchors (start, peak, end) are returned exactly.
    """
    if not 0 <= step <= config.total_steps:
        raise ValueError(f"one_cycle: step {step} outside [0, {config.total_steps}]")
    lo = config.max_lr / config.div
    final = config.max_lr / config.final_div
    peak = config.pct_start * config.total_steps
    if step == 0:
        return lo
    if step == config.total_steps:
        return final
    if step == peak:
        return config.max_lr
    if step < peak:
        return lo + (config.max_lr - lo) * (step / peak)
    t = (step - peak) / (config.total_steps - peak)
    return final + (config.max_lr - final) * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass(frozen=True)
class LrFinderConfig:
    lr_min: float = 1e-6
    lr_max: float = 1.0
    n_steps: int = 60
    smoothing: float = 0.98
    divergence_factor: float = 4.0

    def __post_init__(self):
        if not 0 < self.lr_min < self.lr_max:
            raise ValueError(f"lr_find: need 0 < lr_min < lr_max, got {self}")
        if self.n_steps < 2:
            raise ValueError(f"lr_find: n_steps must be >= 2, got {self.n_steps}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError(f"lr_find: smoothing must be in [0, 1), got {self.smoothing}")


@dataclass(frozen=True)
class LrFindResult:
    lr: float
    lrs: tuple
    losses: tuple
    smoothed: tuple


def lr_find(step_fn, config=LrFinderConfig()):
    """Geometric lr sweep; returns (lr at minimum smoothed loss) / 10.

    ``step_fn(lr)`` performs one optimization step and returns the raw
    training loss.  Losses are smoothed with a bias-corrected EMA; the
    sweep aborts once the smoothed loss exceeds divergence_factor times
    the best seen.  The returned lr is clamped into [lr_min, lr_max].
    """
    cfg = config
    ratio = cfg.lr_max / cfg.lr_min
    lrs, losses, smoothed = [], [], []
    ema = 0.0
    best = math.inf
    for i in range(cfg.n_steps):
        lr = cfg.lr_min * ratio ** (i / (cfg.n_steps - 1))
        loss = float(step_fn(lr))
        if not math.isfinite(loss):
            if i == 0:
                raise NonFiniteError(f"lr_find: immediate divergence at lr_min={cfg.lr_min}")
            break
        ema = cfg.smoothing * ema + (1.0 - cfg.smoothing) * loss
        corrected = ema / (1.0 - cfg.smoothing ** (i + 1))
        lrs.append(lr)
        losses.append(loss)
        smoothed.append(corrected)
        best = min(best, corrected)
        if corrected > cfg.divergence_factor * best:
            break
    pick = lrs[int(np.argmin(smoothed))] / 10.0
    pick = min(max(pick, cfg.lr_min), cfg.lr_max)
    return LrFindResult(lr=pick, lrs=tuple(lrs), losses=tuple(losses), smoothed=tuple(smoothed))


def training_step_fn(network, train_ds, policies, config):
    """Bind an ``lr -> loss`` closure over the real training loop for lr_find.

    Divergence inside the step (non-finite activations or gradients) is
    reported as an infinite loss rather than an exception so the sweep
    can abort cleanly.
    """
    stats = compute_norm_stats(train_ds)
    opt = Sgd(network.parameters(), config.sgd)
    sampler = _EpochSampler(len(train_ds), config.batch_size, config.seed)
    network.train(True)

    def step_fn(lr):
        epoch, idxs = sampler.next_batch()
        xb = _build_batch(train_ds.images, idxs, epoch, stats, config.augment, config.seed)
        targets, mask = apply_policy(train_ds.labels[idxs], policies)
        try:
            with ComputeTape() as tape:
                logits = network(Variable(Tensor(xb, copy=False)))
                loss = masked_bce_loss(logits, targets, mask)
            loss_val = loss.value.item()
            if not math.isfinite(loss_val):
                return loss_val
            tape.backward(loss)
            opt.step(lr)
        except NonFiniteError:
            return math.inf
        opt.zero_grad()
        return loss_val

    return step_fn


# --- augmentation -----------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    target: int = 32
    rotation_deg: float = 10.0
    zoom_max: float = 0.10
    apply_prob: float = 0.75

    def __post_init__(self):
        if self.target < 1:
            raise ValueError(f"augment: target size must be positive, got {self.target}")
        if self.rotation_deg < 0 or self.zoom_max < 0:
            raise ValueError(f"augment: rotation/zoom ranges must be >= 0: {self}")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValueError(f"augment: apply_prob must be in [0, 1], got {self.apply_prob}")


def _bilinear_sample(img, src_y, src_x):
    """Sample [C,H,W] at fractional coords; out-of-bounds reads are 0."""
    c, h, w = img.shape
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    fy = (src_y - y0).astype(img.dtype)
    fx = (src_x - x0).astype(img.dtype)

    out = np.zeros((c,) + src_y.shape, dtype=img.dtype)
    for dy in (0, 1):
        for dx in (0, 1):
            yy = y0 + dy
            xx = x0 + dx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            wy = np.where(dy == 1, fy, 1.0 - fy)
            wx = np.where(dx == 1, fx, 1.0 - fx)
            weight = (wy * wx * valid).astype(img.dtype)
            vals = img[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += vals * weight[None, :, :]
    return out


def augment(image, config, rng):
    """Crop-and-rescale to the target size, then random rotation and zoom.

    Rotation (uniform in +-rotation_deg) and zoom (uniform in
    [0, zoom_max]) are each applied with probability apply_prob.  One
    bilinear resample realizes the whole affine map; samples falling
    outside the source are zero.  Four rng draws happen unconditionally,
    so the stream layout does not depend on earlier draws.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ShapeMismatch("augment expects [C,H,W]", image.shape, ("C", "H", "W"))
    _, h, w = image.shape
    t = config.target

    rot_u = rng.random()
    angle_deg = rng.uniform(-config.rotation_deg, config.rotation_deg)
    zoom_u = rng.random()
    zoom_amt = rng.uniform(0.0, config.zoom_max)

    angle = math.radians(angle_deg) if rot_u < config.apply_prob else 0.0
    zoom = 1.0 + (zoom_amt if zoom_u < config.apply_prob else 0.0)

    scale_y = h / t / zoom
    scale_x = w / t / zoom
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    cy_out, cx_out = (t - 1) / 2.0, (t - 1) / 2.0
    cy_in, cx_in = (h - 1) / 2.0, (w - 1) / 2.0

    ys, xs = np.meshgrid(np.arange(t, dtype=np.float64), np.arange(t, dtype=np.float64), indexing="ij")
    dy = ys - cy_out
    dx = xs - cx_out
    # Inverse map: rotate by -angle, then scale out to source pixels.
    src_y = (cos_a * dy + sin_a * dx) * scale_y + cy_in
    src_x = (-sin_a * dy + cos_a * dx) * scale_x + cx_in
    return _bilinear_sample(image, src_y, src_x)


# --- strategies -------------------------------------------------------------


class Strategy(str, Enum):
    BASELINE = "baseline"
    BASELINE_ALL = "baseline-all"
    COLOR_MODULE = "color-module"
    ALL = "all"
    LAST_LAYER = "last-layer"


class MissingDependencyError(ValueError):
    """A strategy needs a checkpoint another stage has not produced."""


@dataclass(frozen=True)
class StrategyConfig:
    strategy: Strategy
    colorizer: ColorizerKind = None
    colorizer_config: ColorizerConfig = field(default_factory=desk_config)
    encoder_config: object = field(default_factory=desk_encoder_config)
    n_outputs: int = 4
    encoder_checkpoint: str = None
    colorizer_checkpoint: str = None
    transfer_checkpoint: str = None


_NEEDS_COLORIZER = (Strategy.COLOR_MODULE, Strategy.ALL, Strategy.LAST_LAYER)


def _load_required(path, what, hint):
    if path is None:
        raise MissingDependencyError(f"{what} checkpoint required; {hint}")
    path = Path(path)
    if not path.exists():
        raise MissingDependencyError(f"{what} checkpoint {path} not found; {hint}")
    return load_checkpoint(path)


def build_model(config, rng):
    """Assemble the composed model for one strategy, loading required weights."""
    strategy = Strategy(config.strategy)
    encoder = Encoder(config.encoder_config, rng)
    head = ClassifierHead(config.encoder_config.feature_dim, config.n_outputs, rng)

    if strategy in _NEEDS_COLORIZER:
        if config.colorizer is None:
            raise ValueError(f"strategy {strategy.value} needs a colorizer kind")
        front = build_colorizer(config.colorizer, config.colorizer_config, rng)
    else:
        front = ChannelReplicate()

    if strategy is Strategy.LAST_LAYER:
        entries = _load_required(
            config.transfer_checkpoint,
            "transfer {T,E}",
            "point transfer_checkpoint at a trained color-module or all run",
        )
        present = checkpoint_components(entries)
        if "T" not in present or "E" not in present:
            raise MissingDependencyError(
                f"transfer checkpoint must contain T and E, found {present}"
            )
        restore_component(front, entries, "T")
        restore_component(encoder, entries, "E")
        flags = TrainableFlags(front_end=False, encoder=False, head=True)
        return compose(front, encoder, head, flags)

    entries = _load_required(
        config.encoder_checkpoint,
        "pretrained encoder",
        "run pretrain-source first",
    )
    restore_component(encoder, entries, "E")

    if strategy is Strategy.BASELINE:
        flags = TrainableFlags(front_end=False, encoder=False, head=True)
    elif strategy is Strategy.BASELINE_ALL:
        flags = TrainableFlags(front_end=False, encoder=True, head=True)
    elif strategy is Strategy.COLOR_MODULE:
        flags = TrainableFlags(front_end=True, encoder=False, head=True)
    else:  # ALL
        color_entries = _load_required(
            config.colorizer_checkpoint,
            "color-module colorizer",
            "train the color-module strategy first",
        )
        if "T" not in checkpoint_components(color_entries):
            raise MissingDependencyError("colorizer checkpoint contains no T component")
        restore_component(front, color_entries, "T")
        flags = TrainableFlags(front_end=True, encoder=True, head=True)
    return compose(front, encoder, head, flags)


def restore_model(config, checkpoint_path):
    """Rebuild a composed model purely from a checkpoint, for evaluation.

    Architecture hyperparameters come from the StrategyConfig; every
    weight comes from the checkpoint, so the init rng is irrelevant.
    The model is returned in eval mode with nothing trainable.
    """
    entries = load_checkpoint(checkpoint_path)
    present = checkpoint_components(entries)
    strategy = Strategy(config.strategy)
    rng = np.random.default_rng(0)

    if strategy in _NEEDS_COLORIZER:
        if config.colorizer is None:
            raise ValueError(f"strategy {strategy.value} needs a colorizer kind")
        if "T" not in present:
            raise MissingDependencyError(
                f"checkpoint {checkpoint_path} has no colorizer (T) component"
            )
        front = build_colorizer(config.colorizer, config.colorizer_config, rng)
        restore_component(front, entries, "T")
    else:
        front = ChannelReplicate()

    for root in ("E", "C"):
        if root not in present:
            raise MissingDependencyError(
                f"checkpoint {checkpoint_path} is missing component {root}"
            )
    encoder = Encoder(config.encoder_config, rng)
    head = ClassifierHead(config.encoder_config.feature_dim, config.n_outputs, rng)
    restore_component(encoder, entries, "E")
    restore_component(head, entries, "C")
    model = compose(
        front, encoder, head, TrainableFlags(front_end=False, encoder=False, head=False)
    )
    model.eval()
    return model


# --- training loop ----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 32
    checkpoint_every: int = 200
    max_lr: float = 0.05
    sgd: SgdConfig = field(default_factory=SgdConfig)
    pct_start: float = 0.3
    div: float = 25.0
    final_div: float = 1e4
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def one_cycle(self):
        return OneCycleConfig(
            max_lr=self.max_lr,
            total_steps=self.steps,
            pct_start=self.pct_start,
            div=self.div,
            final_div=self.final_div,
        )


@dataclass
class CheckpointRecord:
    step: int
    path: str
    val_mean_auc: float


@dataclass
class TrainRun:
    strategy: str
    seed: int
    steps: int
    checkpoint_every: int
    records: list
    best_step: int
    best_path: str
    best_val_mean_auc: float
    initial_loss: float
    final_smoothed_loss: float
    out_dir: str

    def to_json(self):
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "steps": self.steps,
            "checkpoint_every": self.checkpoint_every,
            "checkpoints": [
                {"step": r.step, "path": r.path, "val_mean_auc": r.val_mean_auc}
                for r in self.records
            ],
            "best_step": self.best_step,
            "best_path": self.best_path,
            "best_val_mean_auc": self.best_val_mean_auc,
            "initial_loss": self.initial_loss,
            "final_smoothed_loss": self.final_smoothed_loss,
        }


class _EpochSampler:
    """Deterministic shuffled batch stream; reshuffles each epoch."""

    def __init__(self, n, batch_size, seed):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.seed = seed
        self.epoch = -1
        self._queue = []

    def next_batch(self):
        if len(self._queue) < self.batch_size:
            self.epoch += 1
            order = np.random.default_rng([self.seed, 2, self.epoch]).permutation(self.n)
            self._queue = list(order)
        batch = self._queue[: self.batch_size]
        self._queue = self._queue[self.batch_size :]
        return self.epoch, batch


def _build_batch(images, indices, epoch, stats, aug_cfg, seed):
    out = np.empty(
        (len(indices), images.shape[1], aug_cfg.target, aug_cfg.target), dtype=np.float32
    )
    for row, idx in enumerate(indices):
        rng = np.random.default_rng([seed, 3, epoch, int(idx)])
        out[row] = augment(images[idx], aug_cfg, rng)
    return normalize_images(out, stats)


def predict_scores(network, images, stats, batch_size=250):
    """Eval-mode sigmoid scores for a stack of raw [N,C,H,W] images."""
    network.eval()
    scores = []
    for start in range(0, images.shape[0], batch_size):
        xb = normalize_images(images[start : start + batch_size], stats)
        logits = network(Variable(Tensor(xb, copy=False)))
        scores.append(_stable_sigmoid(logits.value.data.astype(np.float64)))
    return np.concatenate(scores, axis=0)


@dataclass(frozen=True)
class EvalReport:
    per_observation: tuple  # float AUC or None where undefined
    mean: float
    n_samples: int
    errors: tuple


def evaluate_model(network, dataset, stats, policies, batch_size=250):
    """Masked per-observation AUC of a network on a dataset."""
    scores = predict_scores(network, dataset.images, stats, batch_size)
    targets, mask = apply_policy(dataset.labels, policies)
    per = []
    errors = []
    for j in range(targets.shape[1]):
        keep = mask[:, j] == 1.0
        try:
            per.append(roc_auc(scores[keep, j], targets[keep, j]))
            errors.append(None)
        except ValueError as exc:
            per.append(None)
            errors.append(str(exc))
    defined = [v for v in per if v is not None]
    if not defined:
        raise ValueError("evaluate_model: AUC undefined for every observation")
    return EvalReport(
        per_observation=tuple(per),
        mean=sum(defined) / len(defined),
        n_samples=len(dataset),
        errors=tuple(errors),
    )


def _train_network(network, save_components, train_ds, val_ds, policies, config, out_dir, label):
    """Shared loop: one-cycle SGD over shuffled augmented batches.

    Saves a checkpoint every ``checkpoint_every`` steps and at the end,
    scores each on validation mean AUC, and marks the best as best.bin.
    Returns a TrainRun.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stats = compute_norm_stats(train_ds)
    with open(out / "norm_stats.json", "w") as fh:
        json.dump({"mean": stats.mean, "std": stats.std}, fh, sort_keys=True)
        fh.write("\n")

    oc = config.one_cycle()
    opt = Sgd(network.parameters(), config.sgd)
    sampler = _EpochSampler(len(train_ds), config.batch_size, config.seed)
    images = train_ds.images
    labels = train_ds.labels

    records = []
    ema = 0.0
    beta = 0.98
    initial_loss = None
    smoothed = None
    metrics_rows = ["step,lr,loss,split"]

    network.train(True)
    for step in range(config.steps):
        lr = one_cycle_lr(oc, step)
        epoch, idxs = sampler.next_batch()
        xb = _build_batch(images, idxs, epoch, stats, config.augment, config.seed)
        targets, mask = apply_policy(labels[idxs], policies)
        with ComputeTape() as tape:
            logits = network(Variable(Tensor(xb, copy=False)))
            loss = masked_bce_loss(logits, targets, mask)
        tape.backward(loss)
        opt.step(lr)
        opt.zero_grad()

        loss_val = loss.value.item()
        if initial_loss is None:
            initial_loss = loss_val
        ema = beta * ema + (1 - beta) * loss_val
        smoothed = ema / (1 - beta ** (step + 1))
        metrics_rows.append(f"{step},{lr:.10g},{loss_val:.6f},train")

        if (step + 1) % config.checkpoint_every == 0 or step + 1 == config.steps:
            ckpt_path = out / f"step{step + 1:06d}.bin"
            save_checkpoint(save_components, ckpt_path)
            report = evaluate_model(network, val_ds, stats, policies)
            network.train(True)
            records.append(
                CheckpointRecord(step=step + 1, path=str(ckpt_path), val_mean_auc=report.mean)
            )
            metrics_rows.append(f"{step + 1},{lr:.10g},{report.mean:.6f},val")

    with open(out / "metrics.csv", "w") as fh:
        fh.write("\n".join(metrics_rows) + "\n")

    best = max(records, key=lambda r: (r.val_mean_auc, -r.step))
    best_path = out / "best.bin"
    shutil.copyfile(best.path, best_path)

    run = TrainRun(
        strategy=label,
        seed=config.seed,
        steps=config.steps,
        checkpoint_every=config.checkpoint_every,
        records=records,
        best_step=best.step,
        best_path=str(best_path),
        best_val_mean_auc=best.val_mean_auc,
        initial_loss=initial_loss,
        final_smoothed_loss=smoothed,
        out_dir=str(out),
    )
    with open(out / "run.json", "w") as fh:
        json.dump(run.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return run


def run_strategy(strategy_cfg, train_ds, val_ds, policies, train_cfg, out_dir):
    """Train one strategy cell and return its TrainRun."""
    if train_ds.images.shape[1] != 1:
        raise ShapeMismatch(
            "run_strategy expects grayscale targets", train_ds.images.shape, ("N", 1, "H", "W")
        )
    rng = np.random.default_rng([train_cfg.seed, 1])
    model = build_model(strategy_cfg, rng)
    save_components = {
        root: module
        for root, module in model.components().items()
        if list(module.named_parameters()) or list(module.named_buffers())
    }
    return _train_network(
        model,
        save_components,
        train_ds,
        val_ds,
        policies,
        train_cfg,
        out_dir,
        Strategy(strategy_cfg.strategy).value,
    )


class SourceModel(Module):
    """Encoder + head trained directly on 3-channel source images."""

    def __init__(self, encoder, head):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, x):
        return self.head(self.encoder(x))


def pretrain_source(encoder_config, n_outputs, train_ds, val_ds, train_cfg, out_dir):
    """Train encoder+head on the RGB source task; checkpoint has E and C."""
    if train_ds.images.shape[1] != 3:
        raise ShapeMismatch(
            "pretrain_source expects 3-channel source data", train_ds.images.shape, ("N", 3, "H", "W")
        )
    rng = np.random.default_rng([train_cfg.seed, 1])
    model = SourceModel(Encoder(encoder_config, rng), ClassifierHead(encoder_config.feature_dim, n_outputs, rng))
    policies = ["u-ignore"] * n_outputs  # source labels are clean; policy is inert
    return _train_network(
        model,
        {"E": model.encoder, "C": model.head},
        train_ds,
        val_ds,
        policies,
        train_cfg,
        out_dir,
        "pretrain-source",
    )
