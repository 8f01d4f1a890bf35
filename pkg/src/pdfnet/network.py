"""Builder and forward pass for the PDFNet / DFNet family."""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .glance import GLANCE_WIDTH, SKIP_AROUND_CONV23, GlanceConfig, GlanceModule
from .layers import ConvLayer, OpRecord, RngState
from .tensor import ConfigurationError, DimensionError

FAMILIES = ("PDFNet", "DFNet")
DEPTHS = (3, 6, 9, 12)
DILATION_CYCLE = (1, 2, 3)
MIN_INPUT = 16

# Readings of "drop the first stage and stride the first conv".
STEM_GLANCE = "stem_glance"        # strided 3->32 conv + one glance feeding stage 2 at H/2
STRIDED_GLANCE = "strided_glance"  # stage 2 sees the image; its first conv has stride 2


@dataclass(frozen=True)
class VariantSpec:
    family: str = "PDFNet"
    depth: int = 3
    two_stride: bool = False
    num_classes: int = 20
    in_channels: int = 3
    decoder_width: int = 20

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.depth not in DEPTHS:
            raise ConfigurationError(f"unsupported depth {self.depth}; expected one of {DEPTHS}")
        if self.two_stride and self.family == "DFNet":
            raise ConfigurationError("DFNet is only defined without the strided (2S) stem")
        if self.num_classes < 1 or self.in_channels < 1:
            raise ConfigurationError("num_classes and in_channels must be positive")

    @property
    def name(self):
        base = f"{self.family.lower()}{self.depth}"
        return base + "-2s" if self.two_stride else base

    @property
    def stage_depths(self):
        return [3, self.depth, self.depth, self.depth]


@dataclass(frozen=True)
class ArchOptions:
    """Wiring choices left open by the published description; defaults are the calibrated ones."""

    bn_after: str = "pointwise"
    stem_2s: str = STRIDED_GLANCE
    residual: str = SKIP_AROUND_CONV23
    preact_add: bool = False


DEFAULT_OPTIONS = ArchOptions()


def variant_names():
    names = [f"pdfnet{d}" for d in DEPTHS]
    names += [f"pdfnet{d}-2s" for d in DEPTHS]
    names += [f"dfnet{d}" for d in DEPTHS]
    return names


def parse_variant(name, num_classes=20):
    m = re.fullmatch(r"(pdfnet|dfnet)(\d+)(-2s)?", name.strip().lower())
    if not m:
        raise ConfigurationError(f"unknown variant {name!r}; valid: {', '.join(variant_names())}")
    family = "PDFNet" if m.group(1) == "pdfnet" else "DFNet"
    return VariantSpec(family, int(m.group(2)), bool(m.group(3)), num_classes)


def _parse_bool(v):
    v = v.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {v!r}")


def parse_config_text(text):
    """Parse ``key=value`` lines (``#`` comments allowed) into a dict of strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def spec_from_config(cfg):
    """Build ``(VariantSpec, ArchOptions)`` from a key=value mapping."""
    known = {"family", "depth", "two_stride", "num_classes", "in_channels", "decoder_width",
             "bn_after", "stem_2s", "residual", "preact_add", "variant"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    spec = parse_variant(cfg["variant"]) if "variant" in cfg else VariantSpec()
    fam = cfg.get("family")
    if fam is not None:
        fam = {"pdfnet": "PDFNet", "dfnet": "DFNet", "pdf": "PDFNet", "df": "DFNet"}.get(fam.lower(), fam)
    spec = VariantSpec(
        family=fam or spec.family,
        depth=int(cfg.get("depth", spec.depth)),
        two_stride=_parse_bool(cfg["two_stride"]) if "two_stride" in cfg else spec.two_stride,
        num_classes=int(cfg.get("num_classes", spec.num_classes)),
        in_channels=int(cfg.get("in_channels", spec.in_channels)),
        decoder_width=int(cfg.get("decoder_width", spec.decoder_width)),
    )
    opts = DEFAULT_OPTIONS
    for key in ("bn_after", "stem_2s", "residual"):
        if key in cfg:
            opts = replace(opts, **{key: cfg[key]})
    if "preact_add" in cfg:
        opts = replace(opts, preact_add=_parse_bool(cfg["preact_add"]))
    return spec, opts


def config_text(spec, options=DEFAULT_OPTIONS):
    return "\n".join([
        f"family={spec.family}", f"depth={spec.depth}", f"two_stride={str(spec.two_stride).lower()}",
        f"num_classes={spec.num_classes}", f"in_channels={spec.in_channels}",
        f"decoder_width={spec.decoder_width}", f"bn_after={options.bn_after}",
        f"stem_2s={options.stem_2s}", f"residual={options.residual}",
        f"preact_add={str(options.preact_add).lower()}",
    ]) + "\n"


def stage_channel_table(spec, options=DEFAULT_OPTIONS):
    """Channel count of every stage output that feeds the decoder."""
    depths = spec.stage_depths
    if not spec.two_stride:
        channels, c = [2 * GLANCE_WIDTH], 2 * GLANCE_WIDTH
    elif options.stem_2s == STEM_GLANCE:
        channels, c = [], 2 * GLANCE_WIDTH
    elif options.stem_2s == STRIDED_GLANCE:
        channels, c = [], 0
    else:
        raise ConfigurationError(f"unknown 2S stem reading {options.stem_2s!r}")
    for n in depths:
        c += n * GLANCE_WIDTH
        channels.append(c)
    return channels


@dataclass
class Stage:
    """A dense block: each block sees the concat of everything before it."""

    name: str
    blocks: list
    include_input: bool = True
    pool_before: bool = True
    tap: bool = True
    in_channels: int = 0

    @property
    def out_channels(self):
        return (self.in_channels if self.include_input else 0) + sum(b.out_channels for b in self.blocks)

    def __call__(self, x, train):
        if self.pool_before:
            x = T.avg_pool2d(x, 2, 2)
        feats = [x] if self.include_input else []
        for k, block in enumerate(self.blocks):
            inp = x if (k == 0 and not self.include_input) else T.concat_channels(feats)
            feats.append(block(inp, train))
        return T.concat_channels(feats)

    def trace(self, shape, part="encoder"):
        recs = []
        if self.pool_before:
            pooled = (shape[0], shape[1], shape[2] // 2, shape[3] // 2)
            recs.append(OpRecord(f"{self.name}.pool", "pool", shape, pooled, part))
            shape = pooled
        channels = shape[1] if self.include_input else 0
        hw = tuple(shape[2:])
        for k, block in enumerate(self.blocks):
            inp = shape if (k == 0 and not self.include_input) else (shape[0], channels) + hw
            out, r = block.trace(inp, part)
            recs += r
            hw = tuple(out[2:])
            channels += out[1]
        return (shape[0], channels) + hw, recs


class Network:
    """Encoder stages, per-stage 1x1 projections and a 1x1 fusion head."""

    def __init__(self, spec: VariantSpec, options: ArchOptions = DEFAULT_OPTIONS):
        self.spec = spec
        self.options = options
        self.stages = []
        self.detached_taps = set()
        self.ablated_taps = set()
        self._build_encoder()
        table = stage_channel_table(spec, options)
        w = spec.decoder_width
        self.projections = [
            ConvLayer(c, w, kernel=1, name=f"decoder.proj{k}") for k, c in enumerate(table)
        ]
        self.fusion = ConvLayer(w * len(table), spec.num_classes, kernel=1, bias=True, bn=False,
                                relu=False, name="decoder.fusion")

    def _glance(self, name, in_channels, dilation, first_regular=False, stride=1):
        cfg = GlanceConfig(
            in_channels=in_channels, dilation=dilation, first_conv_regular=first_regular,
            family="DF" if self.spec.family == "DFNet" else "PDF", stride=stride,
            bn_after=self.options.bn_after, residual=self.options.residual,
            preact_add=self.options.preact_add,
        )
        return GlanceModule(cfg, name)

    def _dense_stage(self, idx, in_channels, n, include_input=True, pool_before=True, first_stride=1):
        blocks, c = [], in_channels if include_input else 0
        for k in range(n):
            if k == 0 and not include_input:
                cin, first_regular, stride = in_channels, True, first_stride
            else:
                cin, first_regular, stride = c, False, 1
            blocks.append(self._glance(f"stage{idx}.glance{k}", cin,
                                       DILATION_CYCLE[k % len(DILATION_CYCLE)], first_regular, stride))
            c += GLANCE_WIDTH
        return Stage(f"stage{idx}", blocks, include_input, pool_before, True, in_channels)

    def _build_encoder(self):
        spec, opts = self.spec, self.options
        cin = spec.in_channels
        if not spec.two_stride:
            g0 = self._glance("stage1.glance0", cin, 1, first_regular=True)
            g1 = self._glance("stage1.glance1", GLANCE_WIDTH, 1)
            self.stages.append(Stage("stage1", [g0, g1], include_input=False, pool_before=False,
                                     tap=True, in_channels=cin))
            c = 2 * GLANCE_WIDTH
            first = self._dense_stage(2, c, 3)
        elif opts.stem_2s == STEM_GLANCE:
            conv = ConvLayer(cin, GLANCE_WIDTH, 3, stride=2, name="stem.conv")
            g = self._glance("stem.glance0", GLANCE_WIDTH, 1)
            self.stages.append(Stage("stem", [conv, g], include_input=False, pool_before=False,
                                     tap=False, in_channels=cin))
            first = self._dense_stage(2, 2 * GLANCE_WIDTH, 3, pool_before=False)
        elif opts.stem_2s == STRIDED_GLANCE:
            first = self._dense_stage(2, cin, 3, include_input=False, pool_before=False, first_stride=2)
        else:
            raise ConfigurationError(f"unknown 2S stem reading {opts.stem_2s!r}")
        self.stages.append(first)
        c = first.out_channels
        for idx in (3, 4, 5):
            st = self._dense_stage(idx, c, spec.depth)
            self.stages.append(st)
            c = st.out_channels

    # ---------------------------------------------------------------- params

    def init_params(self, rng, dtype=T.DEFAULT_DTYPE):
        for layer in self.layers():
            layer.init_params(rng, dtype)
        return self

    def layers(self):
        """Top-level parameterised blocks in construction order."""
        out = [b for st in self.stages for b in st.blocks]
        return out + self.projections + [self.fusion]

    def conv_layers(self):
        out = []
        for layer in self.layers():
            if isinstance(layer, GlanceModule):
                for conv in layer.convs():
                    out += conv.conv_layers()
            else:
                out += layer.conv_layers()
        return out

    def named_parameters(self):
        return [p for layer in self.layers() for p in layer.named_parameters()]

    def named_buffers(self):
        return [b for layer in self.layers() for b in layer.named_buffers()]

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def param_count(self):
        return sum(layer.param_count() for layer in self.layers())

    @property
    def taps(self):
        return [st for st in self.stages if st.tap]

    @property
    def fusion_width(self):
        return self.fusion.in_channels

    # --------------------------------------------------------------- forward

    def check_input(self, h, w):
        if h < MIN_INPUT or w < MIN_INPUT:
            raise DimensionError(f"input {h}x{w} too small; height and width must be >= {MIN_INPUT}")
        if self.spec.two_stride and (h % 2 or w % 2):
            raise DimensionError(f"2S variants need even input sizes, got {h}x{w}")

    def forward(self, x, train=False, return_features=False):
        x = T.as_tensor(x)
        if x.data.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise DimensionError(
                f"expected input (N, {self.spec.in_channels}, H, W), got {x.shape}"
            )
        _, _, h, w = x.shape
        self.check_input(h, w)
        taps = []
        for st in self.stages:
            x = st(x, train)
            if st.tap:
                taps.append(x)
        base_h, base_w = taps[0].shape[2:]
        heads = []
        for k, (proj, feat) in enumerate(zip(self.projections, taps)):
            p = proj(feat, train)
            if k in self.ablated_taps:
                p = T.Tensor(np.zeros_like(p.data))
            elif k in self.detached_taps:
                p = p.detach()
            heads.append(T.bilinear_resize(p, base_h, base_w))
        fused_in = T.concat_channels(heads)
        logits = self.fusion(fused_in, train)
        logits = T.bilinear_resize(logits, h, w)
        if return_features:
            return logits, {"stages": taps, "fusion": fused_in}
        return logits

    __call__ = forward

    def trace(self, input_shape):
        """Every primitive op with concrete shapes, without allocating tensors."""
        n, c, h, w = input_shape
        self.check_input(h, w)
        shape, recs, taps = tuple(input_shape), [], []
        for st in self.stages:
            shape, r = st.trace(shape)
            recs += r
            if st.tap:
                taps.append(shape)
        base = taps[0][2:]
        heads = 0
        for k, (proj, tap) in enumerate(zip(self.projections, taps)):
            out, r = proj.trace(tap, "decoder")
            recs += r
            if out[2:] != base:
                resized = out[:2] + base
                recs.append(OpRecord(f"decoder.resize{k}", "resize", out, resized, "decoder"))
            heads += out[1]
        out, r = self.fusion.trace((n, heads) + base, "decoder")
        recs += r
        if out[2:] != (h, w):
            final = out[:2] + (h, w)
            recs.append(OpRecord("decoder.upsample", "resize", out, final, "decoder"))
            out = final
        return out, recs

    def state_dict(self):
        return {n: t.data for n, t in self.named_parameters()}

    def load_arrays(self, params, buffers=None):
        for name, t in self.named_parameters():
            if name not in params:
                raise KeyError(f"checkpoint is missing parameter {name}")
            arr = params[name]
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)
        for name, buf in self.named_buffers():
            if buffers and name in buffers:
                buf[...] = buffers[name]


def build_network(spec: VariantSpec, rng=None, options: ArchOptions = DEFAULT_OPTIONS,
                  dtype=T.DEFAULT_DTYPE):
    """Build a family member; parameters are initialised when ``rng`` is given.

    ``rng`` may be an :class:`RngState` or an integer seed.
    """
    net = Network(spec, options)
    if rng is not None:
        if isinstance(rng, (int, np.integer)):
            rng = RngState(int(rng))
        net.init_params(rng, dtype)
    return net
