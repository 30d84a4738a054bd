"""Neural network layers over the autodiff core.

Every layer computes its forward pass in vectorized numpy and registers a
hand-written vector-Jacobian product on the active tape.  Convolutions are
cross-correlations (no kernel flip) built on im2col/col2im.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    NonFiniteError,
    ShapeMismatch,
    Tensor,
    Variable,
    needs_grad,
    record_op,
)

__all__ = [
    "Module",
    "Sequential",
    "Conv2dSpec",
    "Conv2d",
    "ConvTranspose2d",
    "PixelShuffle",
    "pixel_unshuffle",
    "BatchNorm2d",
    "LeakyReLU",
    "MaxPool2d",
    "GlobalAvgPool",
    "Linear",
    "ResidualBlock",
]


class Module:
    """Minimal container: tracks child modules, parameters and buffers.

    Attribute order is discovery order, so parameter names are stable
    across runs of the same build code.  Lists of modules are supported
    and contribute ``<attr>.<index>`` name segments.
    """

    def __init__(self):
        self.training = True

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def children(self):
        for attr, value in vars(self).items():
            if isinstance(value, Module):
                yield attr, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{attr}.{i}", item

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix=""):
        out = []
        for attr, value in vars(self).items():
            if isinstance(value, Variable):
                out.append((prefix + attr, value))
        for attr, child in self.children():
            out.extend(child.named_parameters(prefix + attr + "."))
        return out

    def parameters(self):
        return [v for _, v in self.named_parameters()]

    def named_buffers(self, prefix=""):
        out = []
        for attr, value in vars(self).items():
            if isinstance(value, Tensor):
                out.append((prefix + attr, value))
        for attr, child in self.children():
            out.extend(child.named_buffers(prefix + attr + "."))
        return out

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def set_trainable(self, flag):
        for v in self.parameters():
            v.trainable = bool(flag)
            v._tracked = bool(flag)
        return self

    def count_params(self, trainable_only=False):
        return sum(
            v.value.size
            for v in self.parameters()
            if v.trainable or not trainable_only
        )


def _check_activations(x, where):
    if not np.isfinite(x.value.data).all():
        raise NonFiniteError(f"non-finite activations after {where}")


class Sequential(Module):
    """Run layers in order, checking activations stay finite after each.

    ``label`` names the stack in error messages; failures report the index
    and class of the offending layer.
    """

    def __init__(self, stack, label="stack"):
        super().__init__()
        self.stack = list(stack)
        self.label = label

    def forward(self, x):
        for i, layer in enumerate(self.stack):
            x = layer(x)
            _check_activations(x, f"{self.label} layer {i} ({type(layer).__name__})")
        return x


def _he_init(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def _conv_out_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x, kernel, stride, padding):
    """[N,C,H,W] -> [N, C*k*k, Ho*Wo] patch matrix."""
    n, c, h, w = x.shape
    ho = _conv_out_size(h, kernel, stride, padding)
    wo = _conv_out_size(w, kernel, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kernel, kernel, ho, wo), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kernel * kernel, ho * wo), ho, wo


def _col2im(cols, in_shape, kernel, stride, padding):
    """Adjoint of _im2col: scatter-add patches back to [N,C,H,W]."""
    n, c, h, w = in_shape
    ho = _conv_out_size(h, kernel, stride, padding)
    wo = _conv_out_size(w, kernel, stride, padding)
    cols = cols.reshape(n, c, kernel, kernel, ho, wo)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                :, :, i, j
            ]
    if padding:
        out = out[:, :, padding : padding + h, padding : padding + w]
    return out


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    bias: bool = True

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel, self.stride) < 1:
            raise ValueError(f"conv spec fields must be positive: {self}")
        if self.padding < 0:
            raise ValueError(f"conv padding must be >= 0: {self}")


def _check_image_input(x, in_channels, where):
    shape = tuple(x.shape)
    if len(shape) != 4:
        raise ShapeMismatch(where, shape, ("N", in_channels, "H", "W"))
    if shape[1] != in_channels:
        raise ShapeMismatch(
            f"{where}: input has {shape[1]} channels, layer expects {in_channels}",
            shape,
            ("N", in_channels, "H", "W"),
        )


class Conv2d(Module):
    """2-d cross-correlation with optional bias.  Weight: [out, in, k, k]."""

    def __init__(self, spec, rng):
        super().__init__()
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        self.weight = Variable(
            Tensor(
                _he_init(rng, (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel), fan_in),
                copy=False,
            ),
            trainable=True,
        )
        self.bias = (
            Variable(Tensor.zeros((spec.out_channels,)), trainable=True) if spec.bias else None
        )

    def forward(self, x):
        s = self.spec
        _check_image_input(x, s.in_channels, "conv2d")
        n, _, h, w = x.shape
        if h + 2 * s.padding < s.kernel or w + 2 * s.padding < s.kernel:
            raise ShapeMismatch(
                f"conv2d: padded input smaller than kernel {s.kernel}", x.shape, (s.kernel, s.kernel)
            )
        xv = x.value.data
        wv = self.weight.value.data
        cols, ho, wo = _im2col(xv, s.kernel, s.stride, s.padding)
        w2 = wv.reshape(s.out_channels, -1)
        y = np.matmul(w2, cols)
        if self.bias is not None:
            y = y + self.bias.value.data.reshape(1, -1, 1)
        y = y.reshape(n, s.out_channels, ho, wo)

        inputs = (x, self.weight) if self.bias is None else (x, self.weight, self.bias)
        x_var, w_var = x, self.weight
        b_var = self.bias
        in_shape = xv.shape

        def vjp(g):
            g2 = g.reshape(n, s.out_channels, ho * wo)
            gx = gw = gb = None
            if needs_grad(x_var):
                gcols = np.matmul(w2.T.astype(g2.dtype, copy=False), g2)
                gx = _col2im(gcols, in_shape, s.kernel, s.stride, s.padding)
            if needs_grad(w_var):
                patches = cols.astype(g2.dtype, copy=False)
                gw = np.matmul(g2, patches.transpose(0, 2, 1)).sum(axis=0)
                gw = gw.reshape(wv.shape)
            if b_var is not None and needs_grad(b_var):
                gb = g2.sum(axis=(0, 2))
            return (gx, gw) if b_var is None else (gx, gw, gb)

        return record_op(y, inputs, vjp)


class ConvTranspose2d(Module):
    """Adjoint of Conv2d for matching (kernel, stride, padding).

    Weight: [in, out, k, k].  Output spatial size is
    (H - 1) * stride - 2 * padding + kernel.
    """

    def __init__(self, spec, rng):
        super().__init__()
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        self.weight = Variable(
            Tensor(
                _he_init(rng, (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel), fan_in),
                copy=False,
            ),
            trainable=True,
        )
        self.bias = (
            Variable(Tensor.zeros((spec.out_channels,)), trainable=True) if spec.bias else None
        )

    def forward(self, x):
        s = self.spec
        _check_image_input(x, s.in_channels, "conv_transpose2d")
        n, _, h, w = x.shape
        ho = (h - 1) * s.stride - 2 * s.padding + s.kernel
        wo = (w - 1) * s.stride - 2 * s.padding + s.kernel
        if ho < 1 or wo < 1:
            raise ShapeMismatch("conv_transpose2d: empty output", x.shape, (ho, wo))
        xv = x.value.data
        wv = self.weight.value.data
        w2 = wv.reshape(s.in_channels, -1)  # [in, out*k*k]
        x2 = xv.reshape(n, s.in_channels, h * w)
        cols = np.matmul(w2.T, x2)
        y = _col2im(cols, (n, s.out_channels, ho, wo), s.kernel, s.stride, s.padding)
        if self.bias is not None:
            y = y + self.bias.value.data.reshape(1, -1, 1, 1)

        inputs = (x, self.weight) if self.bias is None else (x, self.weight, self.bias)
        x_var, w_var = x, self.weight
        b_var = self.bias

        def vjp(g):
            gx = gw = gb = None
            gcols = None
            if needs_grad(x_var) or needs_grad(w_var):
                gcols, _, _ = _im2col(g, s.kernel, s.stride, s.padding)  # [N, out*k*k, H*W]
            if needs_grad(x_var):
                gx = np.matmul(w2.astype(g.dtype, copy=False), gcols).reshape(n, s.in_channels, h, w)
            if needs_grad(w_var):
                gw = np.matmul(x2.astype(g.dtype, copy=False), gcols.transpose(0, 2, 1)).sum(axis=0)
                gw = gw.reshape(wv.shape)
            if b_var is not None and needs_grad(b_var):
                gb = g.sum(axis=(0, 2, 3))
            return (gx, gw) if b_var is None else (gx, gw, gb)

        return record_op(y, inputs, vjp)


class PixelShuffle(Module):
    """Rearrange [N, C*r^2, H, W] -> [N, C, H*r, W*r].

    out[n, c, h*r + i, w*r + j] == in[n, c*r^2 + i*r + j, h, w]
    """

    def __init__(self, upscale):
        super().__init__()
        if upscale < 1:
            raise ValueError(f"pixel_shuffle: upscale must be >= 1, got {upscale}")
        self.upscale = int(upscale)

    def forward(self, x):
        r = self.upscale
        shape = tuple(x.shape)
        if len(shape) != 4 or shape[1] % (r * r) != 0:
            raise ShapeMismatch(
                f"pixel_shuffle: channels must divide by {r * r}", shape, ("N", f"C*{r * r}", "H", "W")
            )
        n, crr, h, w = shape
        c = crr // (r * r)
        y = (
            x.value.data.reshape(n, c, r, r, h, w)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, c, h * r, w * r)
        )
        x_var = x

        def vjp(g):
            if not needs_grad(x_var):
                return (None,)
            gx = (
                g.reshape(n, c, h, r, w, r)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(n, crr, h, w)
            )
            return (gx,)

        return record_op(y, (x,), vjp)


def pixel_unshuffle(x, downscale):
    """Inverse of PixelShuffle: [N, C, H*r, W*r] -> [N, C*r^2, H, W]."""
    r = int(downscale)
    shape = tuple(x.shape)
    if len(shape) != 4 or shape[2] % r != 0 or shape[3] % r != 0:
        raise ShapeMismatch(
            f"pixel_unshuffle: spatial dims must divide by {r}", shape, ("N", "C", f"H*{r}", f"W*{r}")
        )
    n, c, hr, wr = shape
    h, w = hr // r, wr // r
    y = (
        x.value.data.reshape(n, c, h, r, w, r)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, c * r * r, h, w)
    )
    x_var = x

    def vjp(g):
        if not needs_grad(x_var):
            return (None,)
        gx = (
            g.reshape(n, c, r, r, h, w)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, c, hr, wr)
        )
        return (gx,)

    return record_op(y, (x,), vjp)


class BatchNorm2d(Module):
    """Per-channel batch normalization for [N,C,H,W] inputs.

    Train mode normalizes with biased batch statistics and updates running
    stats with momentum; eval mode normalizes with the stored running
    stats and never writes them.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        if eps <= 0:
            raise ValueError(f"batch_norm: eps must be positive, got {eps}")
        if not 0.0 < momentum <= 1.0:
            raise ValueError(f"batch_norm: momentum must be in (0, 1], got {momentum}")
        self.channels = int(channels)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = Variable(Tensor(np.ones(channels, dtype=np.float32), copy=False), trainable=True)
        self.beta = Variable(Tensor.zeros((channels,)), trainable=True)
        self.running_mean = Tensor.zeros((channels,))
        self.running_var = Tensor(np.ones(channels, dtype=np.float32), copy=False)

    def forward(self, x):
        _check_image_input(x, self.channels, "batch_norm")
        xv = x.value.data
        n, c, h, w = xv.shape
        gv = self.gamma.value.data
        bv = self.beta.value.data
        x_var, g_var, b_var = x, self.gamma, self.beta

        if self.training:
            m = n * h * w
            if m < 2:
                raise ValueError(f"batch_norm: degenerate batch, {m} value(s) per channel")
            mu = xv.mean(axis=(0, 2, 3))
            var = xv.var(axis=(0, 2, 3))
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (xv - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
            # Running stats use the unbiased variance; stored in float32.
            mom = self.momentum
            self.running_mean.data[...] = (1 - mom) * self.running_mean.data + mom * mu.astype(
                np.float32
            )
            self.running_var.data[...] = (1 - mom) * self.running_var.data + mom * (
                var * (m / (m - 1))
            ).astype(np.float32)
            y = gv.reshape(1, c, 1, 1) * xhat + bv.reshape(1, c, 1, 1)

            def vjp(grad):
                gx = gg = gb = None
                if needs_grad(g_var):
                    gg = (grad * xhat).sum(axis=(0, 2, 3))
                if needs_grad(b_var):
                    gb = grad.sum(axis=(0, 2, 3))
                if needs_grad(x_var):
                    dxhat = grad * gv.reshape(1, c, 1, 1)
                    mean_d = dxhat.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    gx = inv.reshape(1, c, 1, 1) * (dxhat - mean_d - xhat * mean_dx)
                return (gx, gg, gb)

        else:
            inv = 1.0 / np.sqrt(self.running_var.data.astype(xv.dtype) + self.eps)
            xhat = (xv - self.running_mean.data.astype(xv.dtype).reshape(1, c, 1, 1)) * inv.reshape(
                1, c, 1, 1
            )
            y = gv.reshape(1, c, 1, 1) * xhat + bv.reshape(1, c, 1, 1)

            def vjp(grad):
                gx = gg = gb = None
                if needs_grad(g_var):
                    gg = (grad * xhat).sum(axis=(0, 2, 3))
                if needs_grad(b_var):
                    gb = grad.sum(axis=(0, 2, 3))
                if needs_grad(x_var):
                    gx = grad * (gv * inv.astype(gv.dtype, copy=False)).reshape(1, c, 1, 1)
                return (gx, gg, gb)

        return record_op(y, (x, self.gamma, self.beta), vjp)


class LeakyReLU(Module):
    """max(x, slope*x) with slope in [0, 1); slope 0 is plain ReLU."""

    def __init__(self, slope=0.01):
        super().__init__()
        if not 0.0 <= slope < 1.0:
            raise ValueError(f"leaky_relu: slope must be in [0, 1), got {slope}")
        self.slope = float(slope)

    def forward(self, x):
        xv = x.value.data
        pos = xv > 0
        y = np.where(pos, xv, self.slope * xv)
        x_var = x
        slope = self.slope

        def vjp(g):
            if not needs_grad(x_var):
                return (None,)
            return (np.where(pos, g, slope * g),)

        return record_op(y, (x,), vjp)


class MaxPool2d(Module):
    """Spatial max pooling; stride defaults to the window size."""

    def __init__(self, kernel, stride=None):
        super().__init__()
        self.kernel = int(kernel)
        self.stride = int(stride) if stride is not None else int(kernel)
        if self.kernel < 1 or self.stride < 1:
            raise ValueError(f"max_pool: kernel/stride must be positive, got {kernel}/{stride}")

    def forward(self, x):
        k, s = self.kernel, self.stride
        shape = tuple(x.shape)
        if len(shape) != 4:
            raise ShapeMismatch("max_pool", shape, ("N", "C", "H", "W"))
        n, c, h, w = shape
        if h < k or w < k:
            raise ShapeMismatch(f"max_pool: window {k} larger than input", shape, (k, k))
        cols, ho, wo = _im2col(x.value.data, k, s, 0)
        cols = cols.reshape(n, c, k * k, ho * wo)
        idx = cols.argmax(axis=2)
        y = np.take_along_axis(cols, idx[:, :, None, :], axis=2)[:, :, 0, :].reshape(n, c, ho, wo)
        x_var = x
        in_shape = x.value.data.shape

        def vjp(g):
            if not needs_grad(x_var):
                return (None,)
            gcols = np.zeros((n, c, k * k, ho * wo), dtype=g.dtype)
            np.put_along_axis(gcols, idx[:, :, None, :], g.reshape(n, c, 1, ho * wo), axis=2)
            return (_col2im(gcols.reshape(n, c * k * k, ho * wo), in_shape, k, s, 0),)

        return record_op(y, (x,), vjp)


class GlobalAvgPool(Module):
    """[N,C,H,W] -> [N,C] spatial mean."""

    def forward(self, x):
        shape = tuple(x.shape)
        if len(shape) != 4:
            raise ShapeMismatch("global_avg_pool", shape, ("N", "C", "H", "W"))
        n, c, h, w = shape
        y = x.value.data.mean(axis=(2, 3))
        x_var = x

        def vjp(g):
            if not needs_grad(x_var):
                return (None,)
            return (np.broadcast_to(g.reshape(n, c, 1, 1), (n, c, h, w)) / (h * w),)

        return record_op(y, (x,), vjp)


class Linear(Module):
    """Affine map [N, in] -> [N, out]."""

    def __init__(self, in_features, out_features, rng, bias=True):
        super().__init__()
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        w = (rng.standard_normal((out_features, in_features)) / np.sqrt(in_features)).astype(
            np.float32
        )
        self.weight = Variable(Tensor(w, copy=False), trainable=True)
        self.bias = Variable(Tensor.zeros((out_features,)), trainable=True) if bias else None

    def forward(self, x):
        shape = tuple(x.shape)
        if len(shape) != 2 or shape[1] != self.in_features:
            raise ShapeMismatch("linear", shape, ("N", self.in_features))
        xv = x.value.data
        wv = self.weight.value.data
        y = xv @ wv.T
        if self.bias is not None:
            y = y + self.bias.value.data
        inputs = (x, self.weight) if self.bias is None else (x, self.weight, self.bias)
        x_var, w_var, b_var = x, self.weight, self.bias

        def vjp(g):
            gx = gw = gb = None
            if needs_grad(x_var):
                gx = g @ wv.astype(g.dtype, copy=False)
            if needs_grad(w_var):
                gw = g.T @ xv.astype(g.dtype, copy=False)
            if b_var is not None and needs_grad(b_var):
                gb = g.sum(axis=0)
            return (gx, gw) if b_var is None else (gx, gw, gb)

        return record_op(y, inputs, vjp)


class ResidualBlock(Module):
    """conv3x3 -> BN -> ReLU -> conv3x3 -> BN, identity skip, ReLU after add.

    Shape preserving.  With all conv weights zero and BN at (gamma=1,
    beta=0) the block reduces to ReLU(x).
    """

    def __init__(self, channels, rng):
        super().__init__()
        spec = Conv2dSpec(channels, channels, kernel=3, stride=1, padding=1, bias=False)
        self.conv1 = Conv2d(spec, rng)
        self.bn1 = BatchNorm2d(channels)
        self.conv2 = Conv2d(spec, rng)
        self.bn2 = BatchNorm2d(channels)
        self.act = LeakyReLU(0.0)

    def forward(self, x):
        y = self.act(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return self.act(y + x)
