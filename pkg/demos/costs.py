"""Parameter and FLOP budgets for every variant, and how the counting choices were picked.

Nothing here allocates weights, so the whole table takes well under a second.
"""
from pdfnet import cost as C
from pdfnet.network import build_network, parse_variant, stage_channel_table, variant_names


def main():
    print(f"{'variant':<14}{'params':>12}{'GFLOPs':>10}   stage channels")
    for name in variant_names():
        spec = parse_variant(name)
        rep = C.cost_report(build_network(spec), (1, 3, 512, 1024), scope="encoder")
        print(f"{name:<14}{rep.total_params:>12,}{rep.gflops:>10.2f}   {stage_channel_table(spec)}")

    # The grid: where batchnorm sits in a separable conv, how the 2S stem is
    # wired, MAC vs 2-op counting, and whether the decoder counts.
    cal = C.calibrate()
    print(f"\nbest fit: bn_after={cal.options.bn_after} stem_2s={cal.options.stem_2s} "
          f"convention={cal.convention} scope={cal.scope}, worst miss {cal.max_error:.1%}")
    for opts, conv, scope, err in sorted(cal.candidates, key=lambda c: c[3])[:5]:
        print(f"  {opts.bn_after:<10}{opts.stem_2s:<16}{conv:<8}{scope:<9}{err:7.1%}")


if __name__ == "__main__":
    main()
