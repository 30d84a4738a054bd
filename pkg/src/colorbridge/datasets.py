"""Synthetic multi-label image benchmark with controllable domain gaps.

Each task draws K binary observations per sample; a present observation
renders its pattern family into the image (uncertain ones at reduced
contrast).  The source domain is 3-channel with hue-coded patterns, so an
encoder pretrained there leans on cross-channel contrast that a replicated
grayscale input cannot provide.  Target domains are single-channel.

All generation is deterministic given (spec, n, seed); images are
quantized to the 8-bit grid at creation so PNG export round-trips exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from enum import Enum, IntEnum
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "LabelState",
    "UncertainPolicy",
    "apply_policy",
    "SyntheticTaskSpec",
    "LabeledSample",
    "SyntheticDataset",
    "generate_dataset",
    "subsample",
    "NormalizationStats",
    "compute_norm_stats",
    "normalize_images",
    "denormalize_images",
    "save_dataset",
    "load_dataset",
    "REFERENCE_DOMAINS",
    "REFERENCE_SPLIT_SIZES",
    "reference_task_spec",
    "reference_split",
]


class LabelState(IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    UNCERTAIN = 2


class UncertainPolicy(str, Enum):
    U_ONES = "u-ones"
    U_ZEROS = "u-zeros"
    U_IGNORE = "u-ignore"


def apply_policy(labels, policies):
    """Map label states to (target, mask) float arrays.

    Positive -> (1, 1); Negative -> (0, 1); Uncertain depends on the
    per-observation policy: u-ones (1, 1), u-zeros (0, 1), u-ignore (0, 0).
    """
    labels = np.asarray(labels)
    squeeze = labels.ndim == 1
    if squeeze:
        labels = labels[None, :]
    if labels.ndim != 2:
        raise ValueError(f"apply_policy: labels must be [N,K] or [K], got {labels.shape}")
    k = labels.shape[1]
    policies = [UncertainPolicy(p) for p in policies]
    if len(policies) != k:
        raise ValueError(f"apply_policy: {len(policies)} policies for {k} observations")
    invalid = ~np.isin(labels, [int(s) for s in LabelState])
    if invalid.any():
        raise ValueError(f"apply_policy: invalid label state {labels[invalid][0]}")

    targets = (labels == LabelState.POSITIVE).astype(np.float32)
    mask = np.ones_like(targets, dtype=np.float32)
    uncertain = labels == LabelState.UNCERTAIN
    for j, pol in enumerate(policies):
        col = uncertain[:, j]
        if pol is UncertainPolicy.U_ONES:
            targets[col, j] = 1.0
        elif pol is UncertainPolicy.U_ZEROS:
            targets[col, j] = 0.0
        else:
            targets[col, j] = 0.0
            mask[col, j] = 0.0
    if squeeze:
        return targets[0], mask[0]
    return targets, mask


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Full recipe for one domain: patterns, contrasts, noise, label rates."""

    domain: str
    channels: int
    image_size: int
    families: tuple
    contrasts: tuple
    base_level: float
    noise_sigma: float
    positive_rate: tuple
    uncertain_rate: tuple
    hues: tuple = None  # per-observation RGB weight triples; required when channels == 3
    uncertain_contrast: float = 0.4

    def __post_init__(self):
        k = len(self.families)
        if self.channels not in (1, 3):
            raise ValueError(f"task spec: channels must be 1 or 3, got {self.channels}")
        for name, seq in (
            ("contrasts", self.contrasts),
            ("positive_rate", self.positive_rate),
            ("uncertain_rate", self.uncertain_rate),
        ):
            if len(seq) != k:
                raise ValueError(f"task spec: {name} must have one entry per observation")
        if self.channels == 3:
            if self.hues is None or len(self.hues) != k:
                raise ValueError("task spec: 3-channel domains need one hue triple per observation")
        unknown = set(self.families) - set(_PATTERNS)
        if unknown:
            raise ValueError(f"task spec: unknown pattern families {sorted(unknown)}")

    @property
    def n_observations(self):
        return len(self.families)


@dataclass(frozen=True)
class LabeledSample:
    image: np.ndarray  # [C,H,W] float32 in [0,1]
    labels: np.ndarray  # [K] int8 LabelState values
    domain: str


class SyntheticDataset:
    """Array-backed sequence of LabeledSample."""

    def __init__(self, images, labels, domain, spec=None):
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int8)
        if images.ndim != 4 or labels.ndim != 2 or images.shape[0] != labels.shape[0]:
            raise ValueError(
                f"dataset arrays disagree: images {images.shape}, labels {labels.shape}"
            )
        self.images = images
        self.labels = labels
        self.domain = domain
        self.spec = spec

    def __len__(self):
        return self.images.shape[0]

    def __getitem__(self, idx):
        return LabeledSample(image=self.images[idx], labels=self.labels[idx], domain=self.domain)

    @property
    def n_observations(self):
        return self.labels.shape[1]


# --- pattern rendering ----------------------------------------------------
#
# Each renderer returns a mask in [0,1] with per-sample jitter drawn from
# the given rng.  Masks are additive; overlapping observations stack.


def _grid_coords(n):
    return np.meshgrid(np.arange(n), np.arange(n), indexing="ij")


def _pattern_h_band(rng, n):
    width = int(rng.integers(5, 8))
    row = int(rng.integers(2, n - width - 2))
    mask = np.zeros((n, n))
    mask[row : row + width, :] = 1.0
    return mask


def _pattern_v_band(rng, n):
    width = int(rng.integers(5, 8))
    col = int(rng.integers(2, n - width - 2))
    mask = np.zeros((n, n))
    mask[:, col : col + width] = 1.0
    return mask


def _pattern_disk(rng, n):
    cy = n / 2 + rng.uniform(-4, 4)
    cx = n / 2 + rng.uniform(-4, 4)
    radius = rng.uniform(4.5, 6.5)
    yy, xx = _grid_coords(n)
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def _pattern_ring(rng, n):
    cy = n / 2 + rng.uniform(-3, 3)
    cx = n / 2 + rng.uniform(-3, 3)
    r_in = rng.uniform(3.5, 4.5)
    r_out = r_in + rng.uniform(2.5, 3.5)
    yy, xx = _grid_coords(n)
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    outer = np.clip(r_out + 0.5 - dist, 0.0, 1.0)
    inner = np.clip(r_in + 0.5 - dist, 0.0, 1.0)
    return outer - inner


def _pattern_grid(rng, n):
    period = 4
    phase_y = int(rng.integers(0, period))
    phase_x = int(rng.integers(0, period))
    size = int(rng.integers(14, 20))
    top = int(rng.integers(1, n - size - 1))
    left = int(rng.integers(1, n - size - 1))
    yy, xx = _grid_coords(n)
    cells = (((yy + phase_y) % period) < 2) ^ (((xx + phase_x) % period) < 2)
    window = np.zeros((n, n), dtype=bool)
    window[top : top + size, left : left + size] = True
    return (cells & window).astype(np.float64)


def _pattern_diag_stripes(rng, n):
    period = 6
    phase = int(rng.integers(0, period))
    size = int(rng.integers(14, 20))
    top = int(rng.integers(1, n - size - 1))
    left = int(rng.integers(1, n - size - 1))
    yy, xx = _grid_coords(n)
    stripes = ((yy + xx + phase) % period) < 3
    window = np.zeros((n, n), dtype=bool)
    window[top : top + size, left : left + size] = True
    return (stripes & window).astype(np.float64)


def _pattern_corner_ramp(rng, n):
    corner = int(rng.integers(0, 4))
    half = n // 2
    ramp = np.linspace(0.0, 1.0, half)
    tile = np.minimum.outer(ramp, ramp)  # brightest at the far corner of the quadrant
    mask = np.zeros((n, n))
    if corner == 0:
        mask[:half, :half] = tile[::-1, ::-1]
    elif corner == 1:
        mask[:half, half:] = tile[::-1, :]
    elif corner == 2:
        mask[half:, :half] = tile[:, ::-1]
    else:
        mask[half:, half:] = tile
    return mask


def _pattern_blob(rng, n):
    cy = n / 2 + rng.uniform(-4, 4)
    cx = n / 2 + rng.uniform(-4, 4)
    sigma = rng.uniform(3.0, 4.5)
    yy, xx = _grid_coords(n)
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma))


_PATTERNS = {
    "h_band": _pattern_h_band,
    "v_band": _pattern_v_band,
    "disk": _pattern_disk,
    "ring": _pattern_ring,
    "grid": _pattern_grid,
    "diag_stripes": _pattern_diag_stripes,
    "corner_ramp": _pattern_corner_ramp,
    "blob": _pattern_blob,
}


def _quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).astype(np.float32) / 255.0


def _render_sample(spec, rng):
    n = spec.image_size
    k = spec.n_observations
    labels = np.empty(k, dtype=np.int8)
    # Label states first so the draw sequence is stable per sample.
    for j in range(k):
        if rng.random() < spec.positive_rate[j]:
            labels[j] = (
                LabelState.UNCERTAIN if rng.random() < spec.uncertain_rate[j] else LabelState.POSITIVE
            )
        else:
            labels[j] = LabelState.NEGATIVE
    img = spec.base_level + spec.noise_sigma * rng.standard_normal((spec.channels, n, n))
    for j in range(k):
        if labels[j] == LabelState.NEGATIVE:
            continue
        mask = _PATTERNS[spec.families[j]](rng, n)
        amp = spec.contrasts[j]
        if labels[j] == LabelState.UNCERTAIN:
            amp *= spec.uncertain_contrast
        if spec.channels == 1:
            img[0] += amp * mask
        else:
            hue = spec.hues[j]
            for c in range(3):
                img[c] += amp * hue[c] * mask
    return _quantize(img), labels


def generate_dataset(spec, n, seed):
    """Render n samples; sample i depends only on (spec, seed, i)."""
    if n < 1:
        raise ValueError(f"generate_dataset: n must be positive, got {n}")
    images = np.empty((n, spec.channels, spec.image_size, spec.image_size), dtype=np.float32)
    labels = np.empty((n, spec.n_observations), dtype=np.int8)
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        images[i], labels[i] = _render_sample(spec, rng)
    return SyntheticDataset(images, labels, spec.domain, spec=spec)


# --- stratified subsampling -------------------------------------------------


def _marginal_counts(labels):
    """[K,3] counts of each LabelState per observation."""
    k = labels.shape[1]
    counts = np.zeros((k, 3), dtype=np.int64)
    for s in range(3):
        counts[:, s] = (labels == s).sum(axis=0)
    return counts


def subsample(dataset, fraction, seed):
    """Stratified subset of round(fraction*N) samples.

    Per observation and label state, the selected count stays within +-1
    of the exact proportional share.  Selection is deterministic given the
    seed; fraction 1.0 returns the dataset unchanged.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"subsample: fraction must be in (0, 1], got {fraction}")
    n = len(dataset)
    m = round(fraction * n)
    if m < 1:
        raise ValueError(f"subsample: fraction {fraction} of {n} samples selects none")
    if fraction == 1.0:
        return dataset

    labels = dataset.labels
    keys = {}
    for i, row in enumerate(labels):
        keys.setdefault(tuple(int(v) for v in row), []).append(i)
    strata = sorted(keys.items())
    sizes = np.array([len(idx) for _, idx in strata], dtype=np.int64)

    # Largest-remainder allocation across joint label strata.
    exact = fraction * sizes
    quota = np.floor(exact).astype(np.int64)
    short = m - int(quota.sum())
    if short > 0:
        order = sorted(range(len(strata)), key=lambda j: (-(exact[j] - quota[j]), strata[j][0]))
        for j in order[:short]:
            quota[j] += 1
    elif short < 0:
        order = sorted(range(len(strata)), key=lambda j: (exact[j] - quota[j], strata[j][0]))
        for j in order:
            if short == 0:
                break
            if quota[j] > 0:
                quota[j] -= 1
                short += 1

    # Repair pass: shift whole units between strata until every
    # per-observation state count is within +-1 of proportional.
    key_mat = np.array([k for k, _ in strata], dtype=np.int64)  # [J,K]
    target = fraction * _marginal_counts(labels)  # [K,3] float

    def deviations(q):
        counts = np.zeros_like(target)
        for j in range(len(strata)):
            for obs, state in enumerate(key_mat[j]):
                counts[obs, state] += q[j]
        return counts - target

    def penalty(dev):
        return float(np.maximum(0.0, np.abs(dev) - 1.0).sum())

    dev = deviations(quota)
    for _ in range(500):
        cur = penalty(dev)
        if cur == 0.0:
            break
        best = None
        for j_from in range(len(strata)):
            if quota[j_from] == 0:
                continue
            for j_to in range(len(strata)):
                if j_to == j_from or quota[j_to] >= sizes[j_to]:
                    continue
                trial = dev.copy()
                for obs in range(key_mat.shape[1]):
                    trial[obs, key_mat[j_from, obs]] -= 1
                    trial[obs, key_mat[j_to, obs]] += 1
                p = penalty(trial)
                if p < cur and (best is None or p < best[0]):
                    best = (p, j_from, j_to, trial)
        if best is None:
            break
        _, j_from, j_to, dev = best
        quota[j_from] -= 1
        quota[j_to] += 1
    if penalty(dev) != 0.0:
        raise ValueError("subsample: could not satisfy the +-1 stratification bound")

    rng = np.random.default_rng([seed, 7])
    chosen = []
    for (key, idx), q in zip(strata, quota):
        if q == 0:
            continue
        perm = rng.permutation(len(idx))[:q]
        chosen.extend(idx[i] for i in perm)
    chosen.sort()
    sel = np.array(chosen, dtype=np.int64)
    return SyntheticDataset(
        dataset.images[sel].copy(), dataset.labels[sel].copy(), dataset.domain, spec=dataset.spec
    )


# --- normalization ----------------------------------------------------------


@dataclass(frozen=True)
class NormalizationStats:
    mean: float
    std: float


def compute_norm_stats(dataset):
    """Pooled pixel mean/std over a training split (float64 accumulation)."""
    images = dataset.images if isinstance(dataset, SyntheticDataset) else np.asarray(dataset)
    if images.size == 0:
        raise ValueError("compute_norm_stats: empty split")
    flat = images.astype(np.float64).reshape(-1)
    mean = float(flat.mean())
    std = float(flat.std())
    if std == 0.0:
        raise ValueError("compute_norm_stats: zero-variance split")
    return NormalizationStats(mean=mean, std=std)


def normalize_images(images, stats):
    return ((np.asarray(images) - stats.mean) / stats.std).astype(np.float32)


def denormalize_images(images, stats):
    return (np.asarray(images) * stats.std + stats.mean).astype(np.float32)


# --- PNG + CSV export -------------------------------------------------------

_STATE_TO_TEXT = {LabelState.NEGATIVE: "0", LabelState.POSITIVE: "1", LabelState.UNCERTAIN: "U"}
_TEXT_TO_STATE = {v: k for k, v in _STATE_TO_TEXT.items()}


def save_dataset(dataset, out_dir):
    """Write 8-bit PNGs plus an index CSV; re-export is byte-identical."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k = dataset.n_observations
    with open(out / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "file", "domain"] + [f"label_{j}" for j in range(k)])
        for i in range(len(dataset)):
            name = f"{i:06d}.png"
            img = np.round(dataset.images[i] * 255.0).astype(np.uint8)
            if img.shape[0] == 1:
                Image.fromarray(img[0], mode="L").save(out / name)
            else:
                Image.fromarray(img.transpose(1, 2, 0), mode="RGB").save(out / name)
            row = [str(i), name, dataset.domain]
            row += [_STATE_TO_TEXT[LabelState(int(s))] for s in dataset.labels[i]]
            writer.writerow(row)
    return out / "index.csv"


def load_dataset(in_dir):
    """Read a directory written by save_dataset."""
    index = Path(in_dir) / "index.csv"
    if not index.exists():
        raise FileNotFoundError(f"load_dataset: no index.csv under {in_dir}")
    images = []
    labels = []
    domain = None
    with open(index, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        label_cols = [i for i, name in enumerate(header) if name.startswith("label_")]
        for row in reader:
            domain = row[2]
            with Image.open(Path(in_dir) / row[1]) as im:
                arr = np.asarray(im, dtype=np.float32) / 255.0
            if arr.ndim == 2:
                arr = arr[None, :, :]
            else:
                arr = arr.transpose(2, 0, 1)
            images.append(arr)
            try:
                labels.append([int(_TEXT_TO_STATE[row[i]]) for i in label_cols])
            except KeyError as exc:
                raise ValueError(f"load_dataset: bad label token {exc} in {index}") from exc
    if not images:
        raise ValueError(f"load_dataset: empty index {index}")
    return SyntheticDataset(np.stack(images), np.array(labels, dtype=np.int8), domain)


# --- reference benchmark ----------------------------------------------------
#
# Frozen constants: the orderings the acceptance suite checks were
# calibrated against exactly these specs and seeds.  Change nothing here
# without re-running the calibration grid.

REFERENCE_DOMAINS = ("source_rgb", "target_a", "target_a_prime", "target_b")
REFERENCE_SPLIT_SIZES = {"train": 2000, "val": 500, "test": 500}

_K = 4
_LUMINANCE = 0.10
_CHROMA = (
    (1.0, -0.5, -0.5),
    (-0.5, 1.0, -0.5),
    (-0.5, -0.5, 1.0),
    (0.5, 0.5, -1.0),
)
_HUES = tuple(
    tuple(_LUMINANCE + c for c in chroma) for chroma in _CHROMA
)

_BASE_SPECS = {
    "source_rgb": dict(
        channels=3,
        families=("h_band", "disk", "grid", "corner_ramp"),
        contrasts=(0.30, 0.30, 0.28, 0.30),
        base_level=0.45,
        noise_sigma=0.08,
        hues=_HUES,
    ),
    "target_a": dict(
        channels=1,
        families=("h_band", "disk", "grid", "corner_ramp"),
        contrasts=(0.30, 0.26, 0.24, 0.28),
        base_level=0.35,
        noise_sigma=0.10,
    ),
    "target_a_prime": dict(
        channels=1,
        families=("h_band", "disk", "grid", "corner_ramp"),
        contrasts=(0.26, 0.22, 0.20, 0.24),
        base_level=0.45,
        noise_sigma=0.13,
    ),
    "target_b": dict(
        channels=1,
        families=("v_band", "ring", "diag_stripes", "blob"),
        contrasts=(0.28, 0.26, 0.25, 0.27),
        base_level=0.35,
        noise_sigma=0.10,
    ),
}

_TRAIN_UNCERTAIN_RATE = 0.12
_DOMAIN_SEEDS = {"source_rgb": 11, "target_a": 23, "target_a_prime": 37, "target_b": 53}
_SPLIT_OFFSETS = {"train": 0, "val": 1, "test": 2}


def reference_task_spec(domain, split="train"):
    """Spec for one reference domain.

    Only training splits carry uncertain labels; validation and test
    splits are generated clean, mirroring hand-labelled evaluation sets.
    """
    if domain not in _BASE_SPECS:
        raise ValueError(f"unknown reference domain {domain!r}; expected one of {REFERENCE_DOMAINS}")
    if split not in _SPLIT_OFFSETS:
        raise ValueError(f"unknown split {split!r}")
    base = _BASE_SPECS[domain]
    uncertain = _TRAIN_UNCERTAIN_RATE if (split == "train" and base["channels"] == 1) else 0.0
    return SyntheticTaskSpec(
        domain=domain,
        image_size=32,
        positive_rate=(0.5,) * _K,
        uncertain_rate=(uncertain,) * _K,
        **base,
    )


def reference_split(domain, split, n=None):
    """Generate one canonical reference split."""
    if n is None:
        n = REFERENCE_SPLIT_SIZES[split]
    spec = reference_task_spec(domain, split)
    seed = 1000 * _DOMAIN_SEEDS[domain] + _SPLIT_OFFSETS[split]
    return generate_dataset(spec, n, seed)
