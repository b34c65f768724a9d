"""Composable, shape-checked building blocks over sequence features.

All blocks operate on [B, L, C] tensors, use kernel-size-1 convolutions, and
preserve the position count L. Parameter tables include batch-norm running
statistics (4 entries per normalized channel), which is the convention the
published totals follow.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Parameter


class Layer:
    """Base: a named unit holding parameters and child layers."""

    def __init__(self, name):
        self.name = name
        self._params = []
        self._children = []

    def _param(self, suffix, data, trainable=True):
        p = Parameter(data, name=f"{self.name}.{suffix}", trainable=trainable)
        self._params.append(p)
        return p

    def _child(self, layer):
        self._children.append(layer)
        return layer

    def parameters(self):
        out = list(self._params)
        for c in self._children:
            out.extend(c.parameters())
        return out

    def param_count(self):
        return sum(p.data.size for p in self.parameters())

    def forward(self, x, train=False):
        raise NotImplementedError


class PointwiseConv(Layer):
    """1x1 convolution: a per-position linear map across channels."""

    def __init__(self, rng, cin, cout, name, bias=True, dtype=None):
        super().__init__(name)
        self.cin, self.cout = cin, cout
        self.w = self._param("w", T.glorot_uniform(rng, (cin, cout), cin, cout, dtype))
        self.b = self._param("b", np.zeros(cout, dtype=self.w.data.dtype)) if bias else None

    def forward(self, x, train=False):
        return T.pointwise_conv(x, self.w, self.b)


class Dense(Layer):
    def __init__(self, rng, cin, cout, name, dtype=None):
        super().__init__(name)
        self.w = self._param("w", T.glorot_uniform(rng, (cin, cout), cin, cout, dtype))
        self.b = self._param("b", np.zeros(cout, dtype=self.w.data.dtype))

    def forward(self, x, train=False):
        return T.dense(x, self.w, self.b)


class DepthwiseScale(Layer):
    """Per-channel scalar stage of a kernel-size-1 separable convolution (no bias)."""

    def __init__(self, rng, channels, name, dtype=None):
        super().__init__(name)
        self.d = self._param("d", T.glorot_uniform(rng, (channels,), 1, 1, dtype))

    def forward(self, x, train=False):
        return T.depthwise_scale(x, self.d)


class BatchNorm(Layer):
    """Channel-wise batch normalization with running statistics.

    The running mean/var buffers sit in the parameter table (non-trainable) so
    counts and checkpoints match the 4-entries-per-channel convention.
    """

    def __init__(self, channels, name, dtype=None):
        super().__init__(name)
        dt = dtype or T.default_dtype()
        self.gamma = self._param("gamma", np.ones(channels, dtype=dt))
        self.beta = self._param("beta", np.zeros(channels, dtype=dt))
        self.running_mean = self._param("mean", np.zeros(channels, dtype=dt), trainable=False)
        self.running_var = self._param("var", np.ones(channels, dtype=dt), trainable=False)

    def forward(self, x, train=False):
        return T.batch_norm(x, self.gamma, self.beta,
                            self.running_mean, self.running_var, train)


class Conv2d(Layer):
    def __init__(self, rng, k, cin, cout, name, padding="same", stride=1, dtype=None):
        super().__init__(name)
        self.padding, self.stride = padding, stride
        fan_in, fan_out = k * k * cin, k * k * cout
        self.w = self._param("w", T.glorot_uniform(rng, (k, k, cin, cout), fan_in, fan_out, dtype))
        self.b = self._param("b", np.zeros(cout, dtype=self.w.data.dtype))

    def forward(self, x, train=False):
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class SeparableUnit(Layer):
    """Depthwise scaling then pointwise mixing, optional batch norm, ReLU.

    Parameter count is Cin + Cin*Cout + Cout, plus 4*Cout when normalized.
    """

    def __init__(self, rng, cin, cout, name, with_bn, dtype=None):
        super().__init__(name)
        self.dw = self._child(DepthwiseScale(rng, cin, f"{name}.dw", dtype))
        self.pw = self._child(PointwiseConv(rng, cin, cout, f"{name}.pw", dtype=dtype))
        self.bn = self._child(BatchNorm(cout, f"{name}.bn", dtype)) if with_bn else None

    def forward(self, x, train=False):
        x = self.dw.forward(x, train)
        x = self.pw.forward(x, train)
        if self.bn is not None:
            x = self.bn.forward(x, train)
        return T.relu(x)


class InceptionBlock(Layer):
    """Four parallel kernel-1 paths concatenated along channels.

    Filter plan {(f1), (f2, f3), (f4, f5), (f6)}; every convolution is
    followed by ReLU; the pooling path max-pools (window 3, stride 1, same)
    before its 1x1 convolution. Output channels = f1 + f3 + f5 + f6.
    """

    def __init__(self, rng, cin, filters=(64, 64, 64, 64, 64, 64), name="inception", dtype=None):
        super().__init__(name)
        f1, f2, f3, f4, f5, f6 = filters
        self.cin = cin
        self.out_channels = f1 + f3 + f5 + f6
        self.p1 = self._child(PointwiseConv(rng, cin, f1, f"{name}.p1.conv", dtype=dtype))
        self.p2a = self._child(PointwiseConv(rng, cin, f2, f"{name}.p2.conv1", dtype=dtype))
        self.p2b = self._child(PointwiseConv(rng, f2, f3, f"{name}.p2.conv2", dtype=dtype))
        self.p3a = self._child(PointwiseConv(rng, cin, f4, f"{name}.p3.conv1", dtype=dtype))
        self.p3b = self._child(PointwiseConv(rng, f4, f5, f"{name}.p3.conv2", dtype=dtype))
        self.p4 = self._child(PointwiseConv(rng, cin, f6, f"{name}.p4.conv", dtype=dtype))

    def forward(self, x, train=False):
        if x.data.shape[-1] != self.cin:
            raise DimensionError(f"{self.name}: expected {self.cin} channels, got {x.data.shape}")
        a = T.relu(self.p1.forward(x, train))
        b = T.relu(self.p2b.forward(T.relu(self.p2a.forward(x, train)), train))
        c = T.relu(self.p3b.forward(T.relu(self.p3a.forward(x, train)), train))
        d = T.relu(self.p4.forward(T.maxpool_seq(x, 3), train))
        return T.concat([a, b, c, d], axis=-1)


class IdentityBlock(Layer):
    """Residual unit whose output shape equals its input shape.

    conv/BN/ReLU chain with filters (n1, n2, n3); n3 must equal the input
    channel count so the skip connection adds cleanly.
    """

    def __init__(self, rng, cin, filters=(64, 64, 256), name="identity", dtype=None):
        super().__init__(name)
        n1, n2, n3 = filters
        if n3 != cin:
            raise DimensionError(f"{name}: final filters {n3} must equal input channels {cin}")
        self.cin = cin
        self.conv1 = self._child(PointwiseConv(rng, cin, n1, f"{name}.conv1", dtype=dtype))
        self.bn1 = self._child(BatchNorm(n1, f"{name}.bn1", dtype))
        self.conv2 = self._child(PointwiseConv(rng, n1, n2, f"{name}.conv2", dtype=dtype))
        self.bn2 = self._child(BatchNorm(n2, f"{name}.bn2", dtype))
        self.conv3 = self._child(PointwiseConv(rng, n2, n3, f"{name}.conv3", dtype=dtype))
        self.bn3 = self._child(BatchNorm(n3, f"{name}.bn3", dtype))

    def _main(self, x, train):
        h = T.relu(self.bn1.forward(self.conv1.forward(x, train), train))
        h = T.relu(self.bn2.forward(self.conv2.forward(h, train), train))
        return self.bn3.forward(self.conv3.forward(h, train), train)

    def forward(self, x, train=False):
        if x.data.shape[-1] != self.cin:
            raise DimensionError(f"{self.name}: expected {self.cin} channels, got {x.data.shape}")
        return T.relu(T.add(self._main(x, train), x))


class ConvBlock(Layer):
    """Residual unit with a projected shortcut (1x1 conv + BN), so the output
    channel count n3 is independent of the input."""

    def __init__(self, rng, cin, filters=(64, 64, 256), name="convblock", dtype=None):
        super().__init__(name)
        n1, n2, n3 = filters
        self.cin = cin
        self.conv1 = self._child(PointwiseConv(rng, cin, n1, f"{name}.conv1", dtype=dtype))
        self.bn1 = self._child(BatchNorm(n1, f"{name}.bn1", dtype))
        self.conv2 = self._child(PointwiseConv(rng, n1, n2, f"{name}.conv2", dtype=dtype))
        self.bn2 = self._child(BatchNorm(n2, f"{name}.bn2", dtype))
        self.conv3 = self._child(PointwiseConv(rng, n2, n3, f"{name}.conv3", dtype=dtype))
        self.bn3 = self._child(BatchNorm(n3, f"{name}.bn3", dtype))
        self.proj = self._child(PointwiseConv(rng, cin, n3, f"{name}.proj", dtype=dtype))
        self.proj_bn = self._child(BatchNorm(n3, f"{name}.proj_bn", dtype))

    def forward(self, x, train=False):
        h = T.relu(self.bn1.forward(self.conv1.forward(x, train), train))
        h = T.relu(self.bn2.forward(self.conv2.forward(h, train), train))
        h = self.bn3.forward(self.conv3.forward(h, train), train)
        s = self.proj_bn.forward(self.proj.forward(x, train), train)
        return T.relu(T.add(h, s))


class XceptionBlock(Layer):
    """Two parallel paths merged by addition.

    Main path: three kernel-1 separable units (batch norm on the first two
    only); shortcut: pointwise conv + batch norm. Both paths end at the same
    channel count before the add.
    """

    def __init__(self, rng, cin, filters=(64, 64, 64), name="xception", dtype=None):
        super().__init__(name)
        f1, f2, f3 = filters
        self.cin = cin
        self.out_channels = f3
        self.sep1 = self._child(SeparableUnit(rng, cin, f1, f"{name}.sep1", with_bn=True, dtype=dtype))
        self.sep2 = self._child(SeparableUnit(rng, f1, f2, f"{name}.sep2", with_bn=True, dtype=dtype))
        self.sep3 = self._child(SeparableUnit(rng, f2, f3, f"{name}.sep3", with_bn=False, dtype=dtype))
        self.shortcut = self._child(PointwiseConv(rng, cin, f3, f"{name}.shortcut.conv", dtype=dtype))
        self.shortcut_bn = self._child(BatchNorm(f3, f"{name}.shortcut.bn", dtype))

    def forward(self, x, train=False):
        if x.data.shape[-1] != self.cin:
            raise DimensionError(f"{self.name}: expected {self.cin} channels, got {x.data.shape}")
        a = self.sep3.forward(self.sep2.forward(self.sep1.forward(x, train), train), train)
        b = self.shortcut_bn.forward(self.shortcut.forward(x, train), train)
        return T.relu(T.add(a, b))
