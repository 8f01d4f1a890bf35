import numpy as np
import pytest

from pdfnet import tensor as T
from pdfnet.network import (
    DEFAULT_OPTIONS, STEM_GLANCE, ArchOptions, VariantSpec, build_network, config_text,
    parse_config_text, parse_variant, spec_from_config, stage_channel_table, variant_names,
)


def _input(h, w, n=1, seed=0):
    return np.random.default_rng(seed).standard_normal((n, 3, h, w)).astype(np.float32)


def test_channel_tables():
    assert stage_channel_table(parse_variant("pdfnet3")) == [64, 160, 256, 352, 448]
    assert stage_channel_table(parse_variant("pdfnet6")) == [64, 160, 352, 544, 736]
    assert stage_channel_table(parse_variant("pdfnet12")) == [64, 160, 544, 928, 1312]
    assert stage_channel_table(parse_variant("pdfnet3-2s")) == [96, 192, 288, 384]
    stem = ArchOptions(stem_2s=STEM_GLANCE)
    assert stage_channel_table(parse_variant("pdfnet3-2s"), stem) == [160, 256, 352, 448]


def test_fusion_widths():
    assert build_network(parse_variant("pdfnet3")).fusion_width == 100
    assert build_network(parse_variant("pdfnet9-2s")).fusion_width == 80
    assert build_network(parse_variant("dfnet12")).fusion_width == 100


@pytest.mark.parametrize("name", variant_names())
def test_table_matches_built_tensors(name):
    spec = parse_variant(name)
    net = build_network(spec, rng=1)
    _, feats = net.forward(_input(32, 48), return_features=True)
    assert [f.shape[1] for f in feats["stages"]] == stage_channel_table(spec)
    h = 32 if not spec.two_stride else 16
    w = 48 if not spec.two_stride else 24
    assert feats["fusion"].shape[2:] == (h, w)


@pytest.mark.parametrize("name", ["pdfnet3", "pdfnet3-2s", "dfnet3"])
def test_trace_agrees_with_forward(name):
    net = build_network(parse_variant(name), rng=2)
    x = _input(40, 56)
    logits, feats = net.forward(x, return_features=True)
    out, recs = net.trace(x.shape)
    assert out == logits.shape
    convs = {r.name: r.out_shape for r in recs if r.kind == "conv"}
    assert len(convs) == len(net.conv_layers())


def test_output_resolution_and_2s_internal_size():
    net = build_network(parse_variant("pdfnet3-2s"), rng=3)
    logits, feats = net.forward(_input(64, 128), return_features=True)
    assert logits.shape == (1, 20, 64, 128)
    assert feats["fusion"].shape[2:] == (32, 64)


def test_determinism():
    a = build_network(parse_variant("pdfnet3"), rng=42)(_input(32, 32))
    b = build_network(parse_variant("pdfnet3"), rng=42)(_input(32, 32))
    np.testing.assert_array_equal(a.data, b.data)


def test_stage1_projection_ablation_changes_output():
    net = build_network(parse_variant("pdfnet3"), rng=4)
    x = _input(32, 32)
    base = net(x).data
    net.ablated_taps.add(0)
    assert not np.allclose(base, net(x).data)


def test_input_validation():
    net = build_network(parse_variant("pdfnet3"), rng=0)
    with pytest.raises(T.DimensionError, match=">= 16"):
        net(_input(8, 32))
    with pytest.raises(T.DimensionError):
        net(np.zeros((1, 4, 32, 32), dtype=np.float32))
    with pytest.raises(T.DimensionError, match="even"):
        build_network(parse_variant("pdfnet3-2s"), rng=0)(_input(33, 32))


def test_bad_specs():
    with pytest.raises(T.ConfigurationError):
        VariantSpec("PDFNet", 4)
    with pytest.raises(T.ConfigurationError):
        VariantSpec("DFNet", 3, two_stride=True)
    with pytest.raises(T.ConfigurationError, match="valid: pdfnet3"):
        parse_variant("resnet50")


def test_config_round_trip():
    spec = VariantSpec("PDFNet", 9, True, num_classes=12)
    opts = ArchOptions(bn_after="both")
    text = config_text(spec, opts)
    assert spec_from_config(parse_config_text(text)) == (spec, opts)
    assert spec_from_config(parse_config_text("# c\nvariant = dfnet6\nnum_classes=12\n"))[0] == \
        VariantSpec("DFNet", 6, False, 12)
    with pytest.raises(T.ConfigurationError, match="unknown config keys"):
        spec_from_config({"depht": "3"})


def test_all_parameters_get_gradient_and_counts_agree():
    """Every parameter tensor gets a gradient array, and their sizes add up to param_count."""
    net = build_network(parse_variant("pdfnet3"), rng=7, dtype=np.float64)
    x = _input(32, 64).astype(np.float64)
    y = np.random.default_rng(1).integers(0, 20, size=(1, 32, 64))
    from pdfnet.training import cross_entropy_loss
    cross_entropy_loss(net(x, train=True), y).backward()
    params = net.parameters()
    assert all(p.grad is not None and np.any(p.grad) for p in params)
    assert sum(p.grad.size for p in params) == net.param_count()


def test_default_options_are_the_calibrated_ones():
    assert DEFAULT_OPTIONS == ArchOptions(bn_after="pointwise", stem_2s="strided_glance")
