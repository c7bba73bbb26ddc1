"""Central finite-difference certification of hand-written backward passes."""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .layers import (
    BatchNorm2d,
    Conv2d,
    Flatten,
    Linear,
    MaxPool2d,
    Nptn,
    NptnLayerSpec,
    PReLU,
    SoftmaxCrossEntropy,
)


@dataclass
class GradReport:
    layer: str
    description: str
    rtol: float
    atol: float
    trials: int
    max_rel_error: dict = field(default_factory=dict)
    max_abs_error: float = 0.0
    passed: bool = True
    resampled: int = 0

    def row(self):
        worst = max(self.max_rel_error.values(), default=0.0)
        return {
            "layer": self.layer,
            "passed": self.passed,
            "trials": self.trials,
            "resampled": self.resampled,
            "max_abs_error": f"{self.max_abs_error:.3e}",
            "max_rel_error": f"{worst:.3e}",
            "description": self.description,
        }


def finite_diff_grad(f, x, eps=1e-5):
    """Central differences of a scalar function ``f(x)``, one coordinate at a time.

    ``x`` is perturbed in place (and restored), so ``f`` may close over it.
    """
    if x.dtype != np.float64:
        raise ContractError("finite differences need a float64 tensor")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ContractError(f"f is not finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def _compare(analytic, numeric, rtol, atol):
    diff = np.abs(analytic - numeric)
    ok = bool(np.all(diff <= atol + rtol * np.abs(numeric)))
    rel = float((diff / np.maximum(np.abs(numeric), atol)).max(initial=0.0))
    return ok, rel, float(diff.max(initial=0.0))


def check_layer(layer, input_shape, trials=20, rtol=1e-4, atol=1e-6, rng=None, eps=1e-5,
                min_margin=1e-3, max_resample=200, name=None):
    """Compare ``layer.backward`` with finite differences on random instances.

    Each trial redraws the input and every parameter in float64, and probes
    the layer with ``loss = sum(R * forward(x))`` for a fixed random ``R``, so
    the upstream gradient is exactly ``R``.  Instances whose max operations
    have a winner margin below ``min_margin`` are redrawn and counted.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    name = name or type(layer).__name__
    report = GradReport(name, f"input {tuple(input_shape)}, params "
                        f"{ {k: v.shape for k, v in layer.params.items()} }", rtol, atol, trials)
    for _ in range(trials):
        for _attempt in range(max_resample):
            x = rng.standard_normal(input_shape)
            for key, value in layer.params.items():
                layer.params[key] = rng.standard_normal(value.shape)
            if layer.tie_margin(x) >= min_margin:
                break
            report.resampled += 1
        else:
            raise ContractError(f"{name}: no tie-free instance after {max_resample} draws")

        out = layer.forward(x, train=True)
        probe = rng.standard_normal(np.shape(out))

        def loss(_):
            return np.sum(probe * layer.forward(x, train=True))

        layer.forward(x, train=True)
        d_input = layer.backward(probe)
        analytic = {"input": d_input, **{k: np.array(v) for k, v in layer.grads.items()}}
        numeric = {"input": finite_diff_grad(loss, x, eps)}
        for key in layer.params:
            numeric[key] = finite_diff_grad(loss, layer.params[key], eps)

        for key, num in numeric.items():
            if key not in analytic:
                raise ContractError(f"{name}: backward produced no gradient for {key!r}")
            ok, rel, absolute = _compare(analytic[key], num, rtol, atol)
            report.passed &= ok
            report.max_rel_error[key] = max(report.max_rel_error.get(key, 0.0), rel)
            report.max_abs_error = max(report.max_abs_error, absolute)
    return report


class CorruptedBackward:
    """Wrap a layer so every gradient it reports is scaled by ``factor``.

    Used to show the checker rejects a subtly wrong backward pass.
    """

    def __init__(self, layer, factor=1.01):
        self.layer = layer
        self.factor = factor

    @property
    def params(self):
        return self.layer.params

    @property
    def grads(self):
        return {k: v * self.factor for k, v in self.layer.grads.items()}

    def forward(self, x, train=True):
        return self.layer.forward(x, train)

    def backward(self, dy):
        return self.layer.backward(dy) * self.factor

    def tie_margin(self, x):
        return self.layer.tie_margin(x)


def standard_cases():
    """(name, factory, input shape) covering every layer type of the network."""
    return [
        ("conv2d", lambda: Conv2d(2, 3, 3, pad=1, bias=True), (2, 2, 5, 5)),
        ("conv2d_stride2", lambda: Conv2d(2, 2, 3, pad=1, stride=2), (2, 2, 5, 5)),
        ("nptn_sum", lambda: Nptn(NptnLayerSpec(2, 3, 4, 3, pad=1)), (2, 2, 5, 5)),
        ("nptn_mean", lambda: Nptn(NptnLayerSpec(2, 3, 4, 3, pad=1, aggregate="mean")), (2, 2, 5, 5)),
        ("nptn_g1", lambda: Nptn(NptnLayerSpec(3, 2, 1, 3, pad=1)), (2, 3, 4, 4)),
        ("maxpool", lambda: MaxPool2d(), (2, 3, 4, 6)),
        ("prelu", lambda: PReLU(3), (2, 3, 3, 3)),
        ("batchnorm", lambda: BatchNorm2d(3), (4, 3, 3, 3)),
        ("linear", lambda: Linear(4, 5), (3, 4)),
        ("flatten", lambda: Flatten(), (2, 3, 2, 2)),
        ("softmax_xent", lambda: SoftmaxCrossEntropy(np.array([0, 4, 2])), (3, 5)),
    ]


def run_suite(trials=20, seed=0, mutation_factor=None):
    """Certify every standard case; with ``mutation_factor`` the backward is corrupted."""
    reports = []
    for i, (name, make, shape) in enumerate(standard_cases()):
        layer = make()
        if mutation_factor is not None:
            layer = CorruptedBackward(layer, mutation_factor)
        reports.append(check_layer(layer, shape, trials=trials, rng=np.random.default_rng([seed, i]), name=name))
    return reports


def write_reports_csv(reports, path):
    rows = [r.row() for r in reports]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def format_table(reports):
    rows = [r.row() for r in reports]
    cols = ["layer", "passed", "trials", "resampled", "max_abs_error", "max_rel_error"]
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    lines += ["  ".join(str(r[c]).ljust(widths[c]) for c in cols) for r in rows]
    return "\n".join(lines)
