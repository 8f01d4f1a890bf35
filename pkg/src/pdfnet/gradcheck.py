"""Finite-difference verification of a whole network's gradients."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .network import build_network
from .training import cross_entropy_loss

REL_FLOOR = 1e-8


@dataclass
class GradCheckResult:
    variant: str
    size: tuple
    checked: int
    max_rel_error: float
    worst: str
    zero_grad_params: list = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def finite_diff_ok(self):
        return self.max_rel_error < self.tolerance

    @property
    def all_nonzero(self):
        return not self.zero_grad_params

    @property
    def passed(self):
        return self.finite_diff_ok and self.all_nonzero


def relative_error(analytic, numeric, floor=REL_FLOOR):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_network(net, size=(32, 64), samples=200, seed=0, step=1e-5, tolerance=1e-4,
                  freeze_relu=True):
    """Compare backprop against central differences on sampled parameter entries.

    The network should hold float64 parameters.  Every parameter tensor
    contributes at least one sampled entry; the rest are drawn at random until
    ``samples`` entries are checked.  The loss is train-mode cross entropy
    against random labels on a random input.

    With ``freeze_relu`` the perturbed evaluations keep the ReLU on/off
    pattern of the unperturbed pass.  Without it, a network this size crosses
    ReLU kinks at ``step=1e-5`` often enough to add O(step) error.
    """
    rng = np.random.default_rng(seed)
    h, w = size
    dtype = net.parameters()[0].dtype
    x = rng.standard_normal((1, net.spec.in_channels, h, w)).astype(dtype)
    y = rng.integers(0, net.spec.num_classes, size=(1, h, w))

    def loss_value():
        if freeze_relu:
            T.replay_relu_masks()
        return cross_entropy_loss(net(x, train=True), y).item()

    named = net.named_parameters()
    for _, p in named:
        p.grad = None
    with contextlib.ExitStack() as stack:
        if freeze_relu:
            stack.enter_context(T.freeze_relu_masks())
        cross_entropy_loss(net(x, train=True), y).backward()
        return _compare(net, named, rng, samples, step, tolerance, size, loss_value)


def _compare(net, named, rng, samples, step, tolerance, size, loss_value):
    zero = []
    for name, p in named:
        if p.grad is None or not np.any(p.grad):
            zero.append(name)

    picks = [(k, int(rng.integers(p.data.size))) for k, (_, p) in enumerate(named)]
    sizes = np.array([p.data.size for _, p in named], dtype=np.float64)
    while len(picks) < samples:
        k = int(rng.choice(len(named), p=sizes / sizes.sum()))
        picks.append((k, int(rng.integers(named[k][1].data.size))))

    worst, worst_name = 0.0, ""
    for k, idx in picks:
        name, p = named[k]
        flat = p.data.reshape(-1)
        analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[idx])
        orig = flat[idx]
        flat[idx] = orig + step
        fp = loss_value()
        flat[idx] = orig - step
        fm = loss_value()
        flat[idx] = orig
        numeric = (fp - fm) / (2 * step)
        err = relative_error(analytic, numeric)
        if err > worst:
            worst, worst_name = err, f"{name}[{idx}]"
    return GradCheckResult(net.spec.name, tuple(size), len(picks), worst, worst_name, zero, tolerance)


def gradcheck_variant(spec, size=(32, 64), samples=200, seed=0, options=None, detach_tap=None,
                      step=1e-5, freeze_relu=True):
    kwargs = {} if options is None else {"options": options}
    net = build_network(spec, rng=seed + 42, dtype=np.float64, **kwargs)
    if detach_tap is not None:
        net.detached_taps.add(detach_tap)
    return check_network(net, size, samples, seed, step, freeze_relu=freeze_relu)
