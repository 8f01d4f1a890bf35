import time

import pytest

from pdfnet import cost as C
from pdfnet.network import DEFAULT_OPTIONS, ArchOptions, build_network, parse_variant, variant_names

SEP32 = 32 * 9 + 32 * 32 + 64


def glance_params(cin, regular):
    conv1 = cin * 32 * 9 + 64 if regular else cin * 9 + cin * 32 + 64
    return conv1 + 2 * SEP32


def glance_macs(cin, regular, pixels_out):
    conv1 = pixels_out * cin * 32 * 9 if regular else pixels_out * cin * 9 + pixels_out * cin * 32
    return conv1 + 2 * pixels_out * (32 * 9 + 32 * 32)


def encoder_oracle(depth, two_stride, h, w):
    """Closed-form encoder params and MACs for the calibrated PDFNet wiring."""
    params = macs = 0
    if not two_stride:
        params += glance_params(3, True) + glance_params(32, False)
        macs += glance_macs(3, True, h * w) + glance_macs(32, False, h * w)
        c, res, stages = 64, (h, w), [3, depth, depth, depth]
    else:
        c, res, stages = 3, (h, w), [3, depth, depth, depth]
    for s, n in enumerate(stages):
        first_2s = two_stride and s == 0
        if not first_2s:
            res = (res[0] // 2, res[1] // 2)
            macs += c * res[0] * res[1]  # average pool, one op per output
            cin = c
        else:
            # strided first glance: RGB in, only glance outputs are concatenated
            res = (res[0] // 2, res[1] // 2)
            cin, c = 3, 0
        pix = res[0] * res[1]
        for k in range(n):
            regular = first_2s and k == 0
            inp = cin if regular else c
            params += glance_params(inp, regular)
            macs += glance_macs(inp, regular, pix)
            c += 32
    return params, macs


@pytest.mark.parametrize("name", ["pdfnet3", "pdfnet6", "pdfnet12", "pdfnet3-2s", "pdfnet12-2s"])
def test_encoder_costs_match_closed_form(name):
    spec = parse_variant(name)
    net = build_network(spec)
    params, macs = encoder_oracle(spec.depth, spec.two_stride, 512, 1024)
    assert C.count_params(net, "encoder")[0] == params
    assert C.count_flops(net, (1, 3, 512, 1024), C.MAC, "encoder")[0] == macs


def test_pdfnet3_params_by_hand():
    # stage 1: regular-first glance on RGB plus a glance on 32 channels
    assert glance_params(3, True) + glance_params(32, False) == 7808
    assert C.count_params(build_network(parse_variant("pdfnet3")), "encoder")[0] == 159680


def test_decoder_params():
    net = build_network(parse_variant("pdfnet3"))
    full, _ = C.count_params(net, "full")
    enc, _ = C.count_params(net, "encoder")
    proj = sum(c * 20 + 40 for c in [64, 160, 256, 352, 448])
    assert full - enc == proj + 100 * 20 + 20


def test_params_by_stage_sum_to_total():
    for name in variant_names():
        total, by_stage = C.count_params(build_network(parse_variant(name)))
        assert total == sum(n for _, n in by_stage)


def test_flops_conventions_and_scaling():
    net = build_network(parse_variant("pdfnet3"))
    mac, _ = C.count_flops(net, (1, 3, 512, 1024), C.MAC, "encoder")
    two, _ = C.count_flops(net, (1, 3, 512, 1024), C.MULADD2, "encoder")
    # pools count one op in both conventions; everything else doubles
    pools = sum(f for n, f in C.count_flops(net, (1, 3, 512, 1024), C.MAC, "encoder")[1] if n.endswith("pool"))
    assert two == 2 * (mac - pools) + pools
    small, _ = C.count_flops(net, (1, 3, 256, 512), C.MAC, "encoder")
    assert small * 4 == mac


def test_calibration_selects_default_options():
    cal = C.calibrate()
    assert cal.ok
    assert cal.options == DEFAULT_OPTIONS
    assert (cal.convention, cal.scope) == (C.CALIBRATED_CONVENTION, C.CALIBRATED_SCOPE)
    assert cal.max_error < 0.06
    assert len(cal.candidates) == 16


def test_rounding_error():
    assert C.rounding_error(0.14e6, 0.1e6, 0.05e6) == 0.0
    assert C.rounding_error(0.16e6, 0.1e6, 0.05e6) == pytest.approx(0.1)


def test_summaries_are_fast_and_allocation_free():
    start = time.perf_counter()
    for name in variant_names():
        net = build_network(parse_variant(name))
        C.cost_report(net, (1, 3, 512, 1024))
        assert all(layer.weight is None for layer in net.conv_layers())
    assert time.perf_counter() - start < 1.0


def test_report_line_format():
    rep = C.cost_report(build_network(parse_variant("pdfnet3")), (1, 3, 512, 1024), scope="encoder")
    assert C.report_line(rep) == "pdfnet3,159680,7.98759@512x1024"


def test_bn_both_adds_depthwise_bn_params():
    a = C.count_params(build_network(parse_variant("pdfnet3")), "encoder")[0]
    b = C.count_params(build_network(parse_variant("pdfnet3"), options=ArchOptions(bn_after="both")), "encoder")[0]
    assert b > a
