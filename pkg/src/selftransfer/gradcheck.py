"""Central finite-difference check of a network's analytic gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .network import STLNet
from .rng import Rng


# Step size balancing two failure modes on float64 desk networks: the
# cancellation error in L(w+eps) - L(w-eps) grows like 1/eps and swamps
# gradients near 1e-8 below about 2e-5, while steps near 1e-4 flip so many
# ReLU masks and pooling argmaxes that most elements get excluded.
DEFAULT_EPSILON = 3e-5


class GradCheckError(RuntimeError):
    pass


def relative_error(analytic, numeric):
    a, f = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, f), 1e-12)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict                 # name -> max relative error over checked elements
    checked: int
    excluded: int                   # elements whose perturbation flipped a ReLU or argmax
    worst: tuple | None = None      # (name, flat index, analytic, numeric)
    details: list = field(default_factory=list, repr=False)

    def per_layer(self) -> dict:
        out = {}
        for name, err in self.per_param.items():
            layer = name.rsplit(".", 1)[0]
            out[layer] = max(out.get(layer, 0.0), err)
        return out


def _loss(net, acts, start, targets, alpha):
    net.forward_from(acts, start)
    total = net.losses(targets, alpha)[0]
    return total, net.branch_signature()


def _start_layers(net: STLNet) -> dict:
    """First trunk layer that must be recomputed when a parameter changes."""
    start = {}
    for i, layer in enumerate(net.trunk):
        for p in layer.params:
            start[p.name] = i
    for layer in net.classifier + net.localizer:
        for p in layer.params:
            start[p.name] = len(net.trunk)
    return start


def gradient_check(net: STLNet, x, targets, alpha: float = 0.5,
                   epsilon: float = DEFAULT_EPSILON,
                   fraction: float = 1.0, rng: Rng | None = None,
                   params=None) -> GradCheckReport:
    """Compare ``param.grad`` from backward with ``(L(w+eps) - L(w-eps)) / 2eps``.

    ``fraction < 1`` checks a seeded random subset of each tensor (at least
    one element).  An element is excluded when either perturbed forward
    changes any ReLU mask or pooling argmax, since the loss is not
    differentiable across that change.  Dropout is off (eval-mode forward).
    Each perturbed forward restarts at the layer owning the parameter.
    """
    if net.dtype != np.float64:
        raise GradCheckError("gradient checks need a float64 network")
    rng = rng or Rng(0)
    x = np.asarray(x, dtype=np.float64)
    net.forward(x, train=False)
    net.backward(targets, alpha)
    analytic = {p.name: p.grad.copy() for p in net.params}
    net.forward(x, train=False)
    acts = net.activations()
    base_sig = net.branch_signature()
    starts = _start_layers(net)
    selected = net.params if params is None else [net.param_map[n] for n in params]

    per_param, details = {}, []
    checked = excluded = 0
    worst, worst_err = None, -1.0
    for p in selected:
        flat = p.value.reshape(-1)
        if fraction >= 1.0:
            idx = np.arange(flat.size)
        else:
            count = max(1, math.ceil(fraction * flat.size))
            idx = np.sort(rng.spawn(p.name).permutation(flat.size)[:count])
        errs = []
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            lp, sp = _loss(net, acts, starts[p.name], targets, alpha)
            flat[i] = orig - epsilon
            lm, sm = _loss(net, acts, starts[p.name], targets, alpha)
            flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise GradCheckError(f"non-finite loss while perturbing {p.name}[{i}]")
            if sp != base_sig or sm != base_sig:
                excluded += 1
                continue
            numeric = (lp - lm) / (2 * epsilon)
            a = float(analytic[p.name].reshape(-1)[i])
            err = float(relative_error(a, numeric))
            errs.append(err)
            details.append((p.name, int(i), a, numeric, err))
            if err > worst_err:
                worst_err, worst = err, (p.name, int(i), a, numeric)
        checked += len(errs)
        per_param[p.name] = max(errs) if errs else 0.0
    return GradCheckReport(max(per_param.values(), default=0.0), per_param, checked,
                           excluded, worst, details)
