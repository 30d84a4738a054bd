"""Encoder backbone, classifier head, and the composed three-part model.

A composed model is front_end -> encoder -> head where the front end is
either a colorizer network or channel replication of the grayscale input.
Each component carries its own trainable flag; frozen components run their
BatchNorm layers in eval mode (running statistics stay fixed) regardless
of the model mode.

Checkpoints are a flat binary container of named float32 tensors; see
``save_checkpoint`` for the wire format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeMismatch, needs_grad, record_op
from .layers import (
    BatchNorm2d,
    Conv2d,
    Conv2dSpec,
    GlobalAvgPool,
    LeakyReLU,
    Linear,
    MaxPool2d,
    Module,
    ResidualBlock,
    Sequential,
)

__all__ = [
    "StageSpec",
    "EncoderConfig",
    "desk_encoder_config",
    "full_scale_encoder_config",
    "Encoder",
    "ClassifierHead",
    "ChannelReplicate",
    "replicate_gray",
    "TrainableFlags",
    "ComposedModel",
    "compose",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "component_state",
    "restore_component",
    "checkpoint_trainable_flags",
]


@dataclass(frozen=True)
class StageSpec:
    channels: int
    blocks: int
    stride: int

    def __post_init__(self):
        if self.channels < 1 or self.blocks < 1 or self.stride < 1:
            raise ValueError(f"stage spec fields must be positive: {self}")


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    stem_channels: int = 16
    stem_kernel: int = 3
    stem_stride: int = 1
    stem_pool: bool = False
    stages: tuple = (StageSpec(16, 1, 2), StageSpec(32, 1, 2))

    @property
    def feature_dim(self):
        return self.stages[-1].channels


def desk_encoder_config():
    """Small encoder for 32x32 experiments: stem conv3 + two strided stages."""
    return EncoderConfig()


def full_scale_encoder_config():
    """18-layer-class residual encoder (used here only for parameter counting)."""
    return EncoderConfig(
        stem_channels=64,
        stem_kernel=7,
        stem_stride=2,
        stem_pool=True,
        stages=(
            StageSpec(64, 2, 1),
            StageSpec(128, 2, 2),
            StageSpec(256, 2, 2),
            StageSpec(512, 2, 2),
        ),
    )


class ProjectionResidualBlock(Module):
    """Residual block whose first conv changes stride/width.

    The skip is a 1x1 strided conv + BN whenever shape changes, identity
    otherwise.
    """

    def __init__(self, c_in, c_out, stride, rng):
        super().__init__()
        self.conv1 = Conv2d(Conv2dSpec(c_in, c_out, kernel=3, stride=stride, padding=1, bias=False), rng)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(Conv2dSpec(c_out, c_out, kernel=3, stride=1, padding=1, bias=False), rng)
        self.bn2 = BatchNorm2d(c_out)
        self.act = LeakyReLU(0.0)
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(Conv2dSpec(c_in, c_out, kernel=1, stride=stride, padding=0, bias=False), rng)
            self.proj_bn = BatchNorm2d(c_out)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x):
        y = self.act(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        skip = x if self.proj is None else self.proj_bn(self.proj(x))
        return self.act(y + skip)


class Encoder(Module):
    """Residual encoder ending in global average pooling: [N,3,H,W] -> [N,F]."""

    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        pad = config.stem_kernel // 2
        stem = [
            Conv2d(
                Conv2dSpec(
                    config.in_channels,
                    config.stem_channels,
                    kernel=config.stem_kernel,
                    stride=config.stem_stride,
                    padding=pad,
                    bias=False,
                ),
                rng,
            ),
            BatchNorm2d(config.stem_channels),
            LeakyReLU(0.0),
        ]
        if config.stem_pool:
            stem.append(MaxPool2d(2))
        self.stem = Sequential(stem, label="encoder.stem")

        stages = []
        c_prev = config.stem_channels
        for spec in config.stages:
            blocks = [ProjectionResidualBlock(c_prev, spec.channels, spec.stride, rng)]
            blocks.extend(ResidualBlock(spec.channels, rng) for _ in range(spec.blocks - 1))
            stages.append(Sequential(blocks, label=f"encoder.stage{len(stages)}"))
            c_prev = spec.channels
        self.stages = stages
        self.pool = GlobalAvgPool()

    def forward(self, x):
        if tuple(x.shape)[1] != self.config.in_channels:
            raise ShapeMismatch(
                "encoder input channels", tuple(x.shape), ("N", self.config.in_channels, "H", "W")
            )
        y = self.stem(x)
        for stage in self.stages:
            y = stage(y)
        return self.pool(y)


class ClassifierHead(Module):
    """Linear observation scorer: [N,F] -> [N,K] logits."""

    def __init__(self, feature_dim, n_outputs, rng):
        super().__init__()
        self.linear = Linear(feature_dim, n_outputs, rng)

    def forward(self, x):
        return self.linear(x)


def replicate_gray(x):
    """Copy the single gray channel into three: [N,1,H,W] -> [N,3,H,W]."""
    shape = tuple(x.shape)
    if len(shape) != 4 or shape[1] != 1:
        raise ShapeMismatch("replicate_gray expects [N,1,H,W]", shape, ("N", 1, "H", "W"))
    y = np.repeat(x.value.data, 3, axis=1)
    x_var = x

    def vjp(g):
        if not needs_grad(x_var):
            return (None,)
        return (g.sum(axis=1, keepdims=True),)

    return record_op(y, (x,), vjp)


class ChannelReplicate(Module):
    """Parameter-free front end: replicate gray input to three channels."""

    kind = None  # not a colorizer

    def forward(self, x):
        return replicate_gray(x)


@dataclass(frozen=True)
class TrainableFlags:
    front_end: bool
    encoder: bool
    head: bool


class ComposedModel(Module):
    """front_end -> encoder -> head with per-component freezing.

    Mode handling: ``train()`` puts only the trainable components in train
    mode; frozen components always run in eval mode, so their BatchNorm
    running statistics are both used and left untouched.
    """

    def __init__(self, front_end, encoder, head, flags):
        super().__init__()
        self.front_end = front_end
        self.encoder = encoder
        self.head = head
        self.flags = flags
        self.front_end.set_trainable(flags.front_end)
        self.encoder.set_trainable(flags.encoder)
        self.head.set_trainable(flags.head)
        self.eval()

    def components(self):
        return {"T": self.front_end, "E": self.encoder, "C": self.head}

    def train(self, mode=True):
        self.training = mode
        self.front_end.train(mode and self.flags.front_end)
        self.encoder.train(mode and self.flags.encoder)
        self.head.train(mode and self.flags.head)
        return self

    def forward(self, x):
        shape = tuple(x.shape)
        if len(shape) != 4 or shape[1] != 1:
            raise ShapeMismatch("composed model input", shape, ("N", 1, "H", "W"))
        rgb = self.front_end(x)
        if tuple(rgb.shape)[1] != 3:
            raise ShapeMismatch("front end must emit 3 channels", tuple(rgb.shape), ("N", 3, "H", "W"))
        return self.head(self.encoder(rgb))

    def trainable_parameters(self):
        return [v for v in self.parameters() if v.trainable]


def compose(front_end, encoder, head, flags):
    """Assemble a composed model, validating channel compatibility."""
    if encoder.config.in_channels != 3:
        raise ShapeMismatch("compose: encoder must take 3 channels", (encoder.config.in_channels,), (3,))
    if head.linear.in_features != encoder.config.feature_dim:
        raise ShapeMismatch(
            "compose: head input must match encoder features",
            (head.linear.in_features,),
            (encoder.config.feature_dim,),
        )
    return ComposedModel(front_end, encoder, head, flags)


# --------------------------------------------------------------------------
# Checkpoint container
#
# Layout (all integers little-endian):
#   magic            4 bytes  b"CLRB"
#   format version   1 byte   (currently 1)
#   entry count      uint32
#   per entry:
#     name length    uint32
#     name           UTF-8 bytes
#     rank           uint32
#     dims           uint32 * rank
#     data           float32 * prod(dims)
#
# Entry names are dotted paths rooted at the component letter (T/E/C),
# e.g. "E.stages.0.stack.0.conv1.weight".  Running statistics are stored
# alongside parameters.  Two bookkeeping entries make the container
# self-describing: "_manifest" (component codes present) and
# "<comp>._trainable" (one float, 0 or 1).

_MAGIC = b"CLRB"
_FORMAT_VERSION = 1
_COMPONENT_CODES = {"T": 1.0, "E": 2.0, "C": 3.0}


class CheckpointError(ValueError):
    """Malformed checkpoint container."""


def _write_entry(fh, name, array):
    data = np.ascontiguousarray(array, dtype="<f4")
    name_b = name.encode("utf-8")
    fh.write(struct.pack("<I", len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<I", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(data.tobytes())


def component_state(module, root):
    """Named float32 tensors of one component, rooted at its letter."""
    state = {}
    for name, var in module.named_parameters():
        state[f"{root}.{name}"] = var.value.data
    for name, buf in module.named_buffers():
        state[f"{root}.{name}"] = buf.data
    return state


def save_checkpoint(model, path):
    """Write all components of a composed model (or a dict of modules).

    Accepts either a ComposedModel or a mapping ``{"T": module, ...}``
    with any subset of the three component letters.
    """
    components = model.components() if isinstance(model, ComposedModel) else dict(model)
    for root in components:
        if root not in _COMPONENT_CODES:
            raise CheckpointError(f"unknown component root {root!r}, expected one of T/E/C")
    entries = {}
    manifest = []
    for root in ("T", "E", "C"):
        if root not in components:
            continue
        module = components[root]
        manifest.append(_COMPONENT_CODES[root])
        params = module.parameters()
        trainable = 1.0 if params and all(v.trainable for v in params) else 0.0
        entries[f"{root}._trainable"] = np.array([trainable], dtype=np.float32)
        entries.update(component_state(module, root))
    entries["_manifest"] = np.array(manifest or [0.0], dtype=np.float32)

    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<B", _FORMAT_VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for name, array in entries.items():
            _write_entry(fh, name, array)


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path):
    """Read a checkpoint container into {name: float32 ndarray}."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != _MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {_MAGIC!r}")
        (version,) = struct.unpack("<B", _read_exact(fh, 1, "format version"))
        if version != _FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "entry count"))
        entries = {}
        for i in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, f"entry {i} name length"))
            name = _read_exact(fh, name_len, f"entry {i} name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"{name}: rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"{name}: dims"))
            n_items = 1
            for d in dims:
                n_items *= d
            raw = _read_exact(fh, 4 * n_items, f"{name}: data")
            entries[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after final entry")
    return entries


def checkpoint_components(entries):
    """Component letters present in a loaded checkpoint."""
    codes = {v: k for k, v in _COMPONENT_CODES.items()}
    manifest = entries.get("_manifest")
    if manifest is None:
        raise CheckpointError("checkpoint has no _manifest entry")
    return [codes[c] for c in manifest.tolist() if c in codes]


def checkpoint_trainable_flags(entries):
    """{component: bool} trainability as recorded at save time."""
    out = {}
    for root in checkpoint_components(entries):
        flag = entries.get(f"{root}._trainable")
        if flag is None:
            raise CheckpointError(f"checkpoint missing {root}._trainable")
        out[root] = bool(flag[0])
    return out


def restore_component(module, entries, root):
    """Load parameters and buffers of one component by name.

    Every tensor of the module must be present under the given root with
    a matching shape; extra entries under other roots are ignored.
    """
    named = dict(module.named_parameters())
    buffers = dict(module.named_buffers())
    for name, var in named.items():
        key = f"{root}.{name}"
        if key not in entries:
            raise CheckpointError(f"checkpoint missing parameter {key}")
        arr = entries[key]
        if tuple(arr.shape) != tuple(var.value.shape):
            raise CheckpointError(
                f"shape mismatch for {key}: checkpoint {tuple(arr.shape)} vs model {tuple(var.value.shape)}"
            )
        var.value.data[...] = arr
    for name, buf in buffers.items():
        key = f"{root}.{name}"
        if key not in entries:
            raise CheckpointError(f"checkpoint missing buffer {key}")
        arr = entries[key]
        if tuple(arr.shape) != tuple(buf.shape):
            raise CheckpointError(
                f"shape mismatch for {key}: checkpoint {tuple(arr.shape)} vs model {tuple(buf.shape)}"
            )
        buf.data[...] = arr
    return module
