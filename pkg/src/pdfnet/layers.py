"""Parameterised layers, deterministic initialisation and checkpoints."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError, DimensionError, Tensor


@dataclass
class RngState:
    """Seeded source of independent parameter streams.

    Each call to :meth:`generator` hands out a fresh PCG64 stream keyed by
    ``(seed, counter)``, so the k-th layer always gets the same numbers.
    """

    seed: int = 42
    counter: int = 0

    def generator(self):
        gen = np.random.Generator(np.random.PCG64([self.seed, self.counter]))
        self.counter += 1
        return gen


@dataclass(frozen=True)
class OpRecord:
    """One primitive op of a network evaluated at a concrete input shape."""

    name: str
    kind: str  # conv | bn | relu | add | pool | resize
    in_shape: tuple
    out_shape: tuple
    part: str = "encoder"
    layer: object = None


class BatchNorm:
    def __init__(self, channels, dtype=T.DEFAULT_DTYPE):
        self.channels = channels
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x, train):
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var, train)

    def param_count(self):
        return 2 * self.channels


class ConvLayer:
    """Convolution optionally followed by batch norm and ReLU.

    Convolutions feeding a batch norm carry no bias.  Arrays are allocated by
    :meth:`init_params`; shapes, counts and :meth:`trace` work before that,
    which is all the cost model needs.
    """

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, dilation=1,
                 groups=1, bias=False, bn=True, relu=True, padding=None, name="conv"):
        if kernel not in (1, 3):
            raise ConfigurationError(f"kernel must be 1 or 3, got {kernel}")
        if groups < 1 or in_channels % groups or out_channels % groups:
            raise ConfigurationError(
                f"{name}: groups={groups} must divide in={in_channels} and out={out_channels}"
            )
        if dilation < 1 or stride < 1:
            raise ConfigurationError(f"{name}: stride and dilation must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.dilation = dilation
        self.groups = groups
        self.has_bias = bias
        self.has_bn = bn
        self.has_relu = relu
        # "same" padding for stride 1
        self.padding = dilation * (kernel - 1) // 2 if padding is None else padding
        self.name = name
        self.weight = None
        self.bias = None
        self.bn = None

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    @property
    def fan_in(self):
        return (self.in_channels // self.groups) * self.kernel * self.kernel

    def init_params(self, rng, dtype=T.DEFAULT_DTYPE):
        """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero bias, identity BN."""
        bound = np.sqrt(6.0 / self.fan_in)
        w = rng.generator().uniform(-bound, bound, size=self.weight_shape)
        self.weight = Tensor(w, requires_grad=True, dtype=dtype, name=f"{self.name}.weight")
        if self.has_bias:
            self.bias = Tensor(np.zeros(self.out_channels), requires_grad=True, dtype=dtype,
                               name=f"{self.name}.bias")
        if self.has_bn:
            self.bn = BatchNorm(self.out_channels, dtype)
        return self

    def param_count(self):
        count = int(np.prod(self.weight_shape))
        if self.has_bias:
            count += self.out_channels
        if self.has_bn:
            count += 2 * self.out_channels
        return count

    def output_hw(self, h, w):
        return (
            T.conv_output_size(h, self.kernel, self.stride, self.dilation, self.padding),
            T.conv_output_size(w, self.kernel, self.stride, self.dilation, self.padding),
        )

    def trace(self, shape, part="encoder"):
        if shape[1] != self.in_channels:
            raise DimensionError(
                f"{self.name}: channel axis is {shape[1]}, layer expects {self.in_channels}"
            )
        out = (shape[0], self.out_channels) + self.output_hw(shape[2], shape[3])
        recs = [OpRecord(self.name, "conv", shape, out, part, self)]
        if self.has_bn:
            recs.append(OpRecord(f"{self.name}.bn", "bn", out, out, part))
        if self.has_relu:
            recs.append(OpRecord(f"{self.name}.relu", "relu", out, out, part))
        return out, recs

    def named_parameters(self):
        out = [(f"{self.name}.weight", self.weight)]
        if self.has_bias:
            out.append((f"{self.name}.bias", self.bias))
        if self.has_bn:
            out += [(f"{self.name}.bn.gamma", self.bn.gamma), (f"{self.name}.bn.beta", self.bn.beta)]
        return out

    def named_buffers(self):
        if not self.has_bn:
            return []
        return [(f"{self.name}.bn.running_mean", self.bn.running_mean),
                (f"{self.name}.bn.running_var", self.bn.running_var)]

    def conv_layers(self):
        return [self]

    def __call__(self, x, train=False):
        if x.shape[1] != self.in_channels:
            raise DimensionError(
                f"{self.name}: channel axis is {x.shape[1]}, layer expects {self.in_channels}"
            )
        try:
            y = T.conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.padding, self.groups)
            if self.has_bn:
                y = self.bn(y, train)
            if self.has_relu:
                y = T.relu(y)
        except FloatingPointError as exc:
            raise FloatingPointError(f"non-finite activations first produced by layer {self.name} ({exc})") from None
        return y


class SepConvLayer:
    """Depthwise 3x3 (dilated) convolution followed by a pointwise 1x1.

    ``bn_after`` selects where batch norm + ReLU sit: ``"both"`` puts a pair
    after each sub-convolution, ``"pointwise"`` only after the 1x1.
    """

    def __init__(self, in_channels, out_channels, dilation=1, stride=1, bn_after="both", name="sep"):
        if bn_after not in ("both", "pointwise"):
            raise ConfigurationError(f"bn_after must be 'both' or 'pointwise', got {bn_after!r}")
        both = bn_after == "both"
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.dilation = dilation
        self.stride = stride
        self.name = name
        self.depthwise = ConvLayer(in_channels, in_channels, 3, stride, dilation, groups=in_channels,
                                   bn=both, relu=both, name=f"{name}.dw")
        self.pointwise = ConvLayer(in_channels, out_channels, 1, name=f"{name}.pw")

    def init_params(self, rng, dtype=T.DEFAULT_DTYPE):
        self.depthwise.init_params(rng, dtype)
        self.pointwise.init_params(rng, dtype)
        return self

    def param_count(self):
        return self.depthwise.param_count() + self.pointwise.param_count()

    def output_hw(self, h, w):
        return self.depthwise.output_hw(h, w)

    def trace(self, shape, part="encoder"):
        mid, r1 = self.depthwise.trace(shape, part)
        out, r2 = self.pointwise.trace(mid, part)
        return out, r1 + r2

    def named_parameters(self):
        return self.depthwise.named_parameters() + self.pointwise.named_parameters()

    def named_buffers(self):
        return self.depthwise.named_buffers() + self.pointwise.named_buffers()

    def conv_layers(self):
        return [self.depthwise, self.pointwise]

    def __call__(self, x, train=False):
        if x.shape[1] != self.in_channels:
            raise DimensionError(
                f"{self.name}: channel axis is {x.shape[1]}, layer expects {self.in_channels}"
            )
        return self.pointwise(self.depthwise(x, train), train)


def layer_param_count(layer):
    return layer.param_count()


# ---------------------------------------------------------------- checkpoints

MAGIC = b"PDFN"
VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}
KIND_PARAM, KIND_BUFFER = 0, 1


def save_checkpoint(path, params, buffers=(), metadata=""):
    """Write named arrays to a flat little-endian binary file.

    Layout: magic ``PDFN``, u32 version, u32 metadata length + UTF-8 text,
    u32 entry count, then per entry: u32 name length, name, u8 kind
    (0 parameter, 1 buffer), u8 scalar width, u32 rank, u32 dims, payload.
    """
    entries = [(n, KIND_PARAM, t.data if isinstance(t, Tensor) else t) for n, t in params]
    entries += [(n, KIND_BUFFER, a) for n, a in buffers]
    meta = metadata.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(entries)))
        for name, kind, arr in entries:
            arr = np.asarray(arr)
            width = arr.dtype.itemsize
            if width not in _DTYPES:
                raise ValueError(f"unsupported dtype {arr.dtype} for {name}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BBI", kind, width, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[width]).tobytes())


@dataclass
class Checkpoint:
    metadata: str
    params: dict
    buffers: dict

    def param_scalars(self):
        return sum(a.size for a in self.params.values())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = 4
    version, meta_len = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    metadata = blob[pos:pos + meta_len].decode("utf-8")
    pos += meta_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    params, buffers = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        kind, width, ndim = struct.unpack_from("<BBI", blob, pos)
        pos += 6
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        dt = _DTYPES[width]
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype=dt, count=size, offset=pos).reshape(shape).astype(dt.newbyteorder("="))
        pos += size * width
        (params if kind == KIND_PARAM else buffers)[name] = arr
    return Checkpoint(metadata, params, buffers)
