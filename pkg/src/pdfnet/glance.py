"""The glance block: three same-dilation 3x3 convolutions with a residual skip."""
from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .layers import ConvLayer, OpRecord, SepConvLayer
from .tensor import ConfigurationError, DimensionError

GLANCE_WIDTH = 32

# residual wiring options
SKIP_AROUND_CONV23 = "conv23"  # out = conv3(conv2(y1)) + y1
SKIP_AROUND_CONV2 = "conv2"    # out = conv3(conv2(y1) + y1)


@dataclass(frozen=True)
class GlanceConfig:
    in_channels: int
    dilation: int = 1
    first_conv_regular: bool = False
    family: str = "PDF"  # "PDF" or "DF"; DF always uses a regular first conv
    stride: int = 1
    bn_after: str = "both"
    residual: str = SKIP_AROUND_CONV23
    preact_add: bool = False


class GlanceModule:
    """conv1 maps ``in_channels`` to 32; conv2 and conv3 keep 32 channels.

    conv1 is depthwise-separable unless the config asks for a regular 3x3
    (first glance of the network, or every glance of the DF family).
    """

    def __init__(self, cfg: GlanceConfig, name="glance"):
        if cfg.dilation < 1:
            raise ConfigurationError(f"glance dilation must be >= 1, got {cfg.dilation}")
        if cfg.in_channels < 1:
            raise ConfigurationError(f"glance in_channels must be >= 1, got {cfg.in_channels}")
        if cfg.family not in ("PDF", "DF"):
            raise ConfigurationError(f"unknown glance family {cfg.family!r}")
        if cfg.residual not in (SKIP_AROUND_CONV23, SKIP_AROUND_CONV2):
            raise ConfigurationError(f"unknown residual wiring {cfg.residual!r}")
        self.cfg = cfg
        self.name = name
        d = cfg.dilation
        if cfg.first_conv_regular or cfg.family == "DF":
            self.conv1 = ConvLayer(cfg.in_channels, GLANCE_WIDTH, 3, cfg.stride, d, name=f"{name}.conv1")
        else:
            self.conv1 = SepConvLayer(cfg.in_channels, GLANCE_WIDTH, d, cfg.stride, cfg.bn_after,
                                      name=f"{name}.conv1")
        self.conv2 = SepConvLayer(GLANCE_WIDTH, GLANCE_WIDTH, d, bn_after=cfg.bn_after, name=f"{name}.conv2")
        self.conv3 = SepConvLayer(GLANCE_WIDTH, GLANCE_WIDTH, d, bn_after=cfg.bn_after, name=f"{name}.conv3")
        if cfg.preact_add:
            self.conv3.pointwise.has_relu = False

    @property
    def in_channels(self):
        return self.cfg.in_channels

    @property
    def out_channels(self):
        return GLANCE_WIDTH

    def init_params(self, rng, dtype=T.DEFAULT_DTYPE):
        for conv in (self.conv1, self.conv2, self.conv3):
            conv.init_params(rng, dtype)
        return self

    def convs(self):
        return [self.conv1, self.conv2, self.conv3]

    def param_count(self):
        return sum(c.param_count() for c in self.convs())

    def named_parameters(self):
        return [p for c in self.convs() for p in c.named_parameters()]

    def named_buffers(self):
        return [b for c in self.convs() for b in c.named_buffers()]

    def __call__(self, x, train=False):
        if x.shape[1] != self.cfg.in_channels:
            raise DimensionError(
                f"{self.name}: channel axis is {x.shape[1]}, module expects {self.cfg.in_channels}"
            )
        y1 = self.conv1(x, train)
        if self.cfg.residual == SKIP_AROUND_CONV2:
            return self._finish(self.conv3(T.add(self.conv2(y1, train), y1), train), None)
        return self._finish(self.conv3(self.conv2(y1, train), train), y1)

    def _finish(self, y3, skip):
        if skip is not None:
            y3 = T.add(y3, skip)
        if self.cfg.preact_add:
            y3 = T.relu(y3)
        return y3

    def trace(self, shape, part="encoder"):
        s1, recs = self.conv1.trace(shape, part)
        s2, r = self.conv2.trace(s1, part)
        recs += r
        if self.cfg.residual == SKIP_AROUND_CONV2:
            recs.append(OpRecord(f"{self.name}.add", "add", s2, s2, part))
        s3, r = self.conv3.trace(s2, part)
        recs += r
        if self.cfg.residual == SKIP_AROUND_CONV23:
            recs.append(OpRecord(f"{self.name}.add", "add", s3, s3, part))
        if self.cfg.preact_add:
            recs.append(OpRecord(f"{self.name}.relu", "relu", s3, s3, part))
        return s3, recs


def build_glance(cfg: GlanceConfig, rng=None, name="glance", dtype=T.DEFAULT_DTYPE):
    """Construct a glance module; parameters are initialised when ``rng`` is given."""
    module = GlanceModule(cfg, name)
    if rng is not None:
        module.init_params(rng, dtype)
    return module
