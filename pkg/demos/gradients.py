"""Finite-difference check of a whole network, in float64.

ReLU masks are frozen from the unperturbed pass, so a perturbation that
nudges an activation across zero does not show up as a gradient error.
Pass --no-freeze to see what that costs.

Keep the input at 32x64 or larger.  At 16x32 the last stage is 1x2 pixels,
batchnorm normalises over two values, and central differences at step 1e-5
lose to curvature and roundoff even though backprop is exact.
"""
import sys

from pdfnet.gradcheck import gradcheck_variant
from pdfnet.network import parse_variant


def main(freeze=True):
    for name in ("pdfnet3", "pdfnet3-2s"):
        r = gradcheck_variant(parse_variant(name), (32, 64), samples=50, seed=0, freeze_relu=freeze)
        print(f"{name}: {r.checked} coordinates, max relative error {r.max_rel_error:.2e} "
              f"at {r.worst}, untouched tensors {len(r.zero_grad_params)} -> "
              f"{'PASS' if r.passed else 'FAIL'}")


if __name__ == "__main__":
    main(freeze="--no-freeze" not in sys.argv)
