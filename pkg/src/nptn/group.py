"""Explicit filter orbits under finite unitary groups, and invariance probes.

Named groups are realized as exact index permutations (circular shifts and
quarter-turn rotations), and node responses are summed with ``math.fsum``.
Because fsum is correctly rounded, a dot product does not depend on the order
of its terms, so invariance of the max response holds bit-exactly rather
than up to rounding.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError

NAMED_GROUPS = ("cyclic-shift", "c4-rotation", "translation-2d")


def _cyclic(j, x):
    return np.roll(x, j)


def _c4(j, x):
    # clockwise quarter turns
    return np.rot90(x, -j)


def _translate2d(j, x):
    k = x.shape[0]
    return np.roll(x, (j // k, j % k), axis=(0, 1))


_ACTIONS = {"cyclic-shift": _cyclic, "c4-rotation": _c4, "translation-2d": _translate2d}


@dataclass
class GroupOrbit:
    """The transformed copies ``{g w}`` of one template, one per group element.

    ``templates[j]`` is element ``j`` applied to the template.  For named
    groups ``act(j, x)`` applies the same element to an input.
    """

    templates: np.ndarray
    group_name: str = "arbitrary"
    generator_record: list = field(default_factory=list)

    @property
    def size(self):
        return self.templates.shape[0]

    def act(self, j, x):
        if self.group_name not in _ACTIONS:
            raise ContractError(f"group {self.group_name!r} has no known action")
        return _ACTIONS[self.group_name](j, np.asarray(x))


def cyclic_shift_orbit(w):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size < 1:
        raise ShapeError(f"cyclic orbit needs a non-empty vector, got {w.shape}")
    d = w.size
    return GroupOrbit(np.stack([_cyclic(j, w) for j in range(d)]), "cyclic-shift",
                      [f"roll by {j}" for j in range(d)])


def c4_rotation_orbit(w):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"C4 orbit needs a square kernel, got {w.shape}")
    return GroupOrbit(np.stack([_c4(j, w) for j in range(4)]), "c4-rotation",
                      [f"rotate {90 * j} deg clockwise" for j in range(4)])


def translation2d_orbit(w):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"2-D translation orbit needs a square kernel, got {w.shape}")
    k = w.shape[0]
    return GroupOrbit(np.stack([_translate2d(j, w) for j in range(k * k)]), "translation-2d",
                      [f"roll by ({j // k}, {j % k})" for j in range(k * k)])


def arbitrary_orbit(templates):
    """Wrap a learned filter set; no group structure is assumed."""
    t = np.asarray(templates, dtype=np.float64)
    return GroupOrbit(t, "arbitrary", ["learned"] * t.shape[0])


def tn_node_response(x, orbit):
    """Max over the orbit of ``<x, g w>``, each dot product summed exactly."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != orbit.templates.shape[1:]:
        raise ShapeError(f"input {x.shape} does not match templates {orbit.templates.shape[1:]}")
    xf = x.reshape(-1)
    return max(math.fsum(xf * t.reshape(-1)) for t in orbit.templates)


@dataclass
class InvarianceReport:
    score: float
    transform: str
    trials: int
    max_deviation: float
    layer: str = ""
    m: int = -1
    n: int = -1

    def row(self):
        return {"layer": self.layer, "m": self.m, "n": self.n, "transform": self.transform,
                "score": repr(self.score), "max_deviation": repr(self.max_deviation), "trials": self.trials}


def verify_lemma1(orbit, trials, rng):
    """Check ``response(x) == response(g'x)`` for random x and every g' in the group.

    ``score`` is the mean absolute deviation over all (x, g') pairs.
    """
    if orbit.group_name not in NAMED_GROUPS:
        raise ContractError("invariance is only guaranteed for a named group orbit")
    devs = []
    for _ in range(trials):
        x = rng.standard_normal(orbit.templates.shape[1:])
        base = tn_node_response(x, orbit)
        for j in range(orbit.size):
            devs.append(abs(base - tn_node_response(orbit.act(j, x), orbit)))
    return InvarianceReport(float(np.mean(devs)), f"all {orbit.size} elements of {orbit.group_name}",
                            trials, float(max(devs)))


def invariance_score(wts, node, transform, samples, rng, transform_name=None):
    """Relative change of one node's response when its input is transformed.

    The node's G filters act as the orbit; inputs are random standard-normal
    patches of kernel shape.  Zero means the node is exactly invariant to
    ``transform`` on the sampled inputs.
    """
    m, n = node
    orbit = arbitrary_orbit(wts.w[m, n])
    rel, devs = [], []
    for _ in range(samples):
        x = rng.standard_normal(orbit.templates.shape[1:])
        r = tn_node_response(x, orbit)
        dev = abs(tn_node_response(transform(x), orbit) - r)
        devs.append(dev)
        rel.append(dev / (abs(r) + 1e-8))
    return InvarianceReport(float(np.mean(rel)), transform_name or getattr(transform, "__name__", "transform"),
                            samples, float(max(devs)), m=m, n=n)


def rotate90(x):
    return np.rot90(x, -1)


def shift1(x):
    return np.roll(x, 1, axis=1)


PROBE_TRANSFORMS = {"rot90": rotate90, "shift1": shift1}


def write_invariance_csv(reports, path):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["layer", "m", "n", "transform", "score", "max_deviation", "trials"])
        writer.writeheader()
        for r in reports:
            writer.writerow(r.row())
