"""Minimal fixed-architecture CNN with reverse-mode activation gradients.

Architecture: conv 3x3 (valid, stride 1) -> ReLU -> global average pool
-> dense -> softmax.  The post-ReLU conv output is the attribution target
layer; `backward_class` differentiates a pre-softmax logit with respect to
it using a small computation tape, never a hand-derived formula (the
closed form exists for this head and serves as an independent oracle in
the tests).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorstore import read_tensor, write_tensor


# ---------------------------------------------------------------------------
# Reverse-mode tape.
# ---------------------------------------------------------------------------

class Var:
    """One node in a reverse-mode computation graph.

    `parents` holds (input_node, vjp) pairs; each vjp maps the gradient at
    this node to the gradient contribution for that input.
    """

    __slots__ = ("value", "parents", "grad")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.grad = None


def v_sum(a: Var, axis=None) -> Var:
    shape = a.value.shape

    def vjp(g):
        if axis is None:
            return np.full(shape, g)
        expanded = np.expand_dims(g, axis)
        return np.broadcast_to(expanded, shape).copy()

    return Var(a.value.sum(axis=axis), [(a, vjp)])


def v_scale(a: Var, s: float) -> Var:
    return Var(a.value * s, [(a, lambda g: g * s)])


def v_add(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ValueError("v_add requires matching shapes")
    return Var(a.value + b.value, [(a, lambda g: g), (b, lambda g: g)])


def v_matvec(m: Var, x: Var) -> Var:
    mv, xv = m.value, x.value

    def vjp_m(g):
        return np.outer(g, xv)

    def vjp_x(g):
        return mv.T @ g

    return Var(mv @ xv, [(m, vjp_m), (x, vjp_x)])


def v_index(a: Var, i: int) -> Var:
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[i] = g
        return out

    return Var(a.value[i], [(a, vjp)])


def backward(out: Var) -> None:
    """Accumulate d(out)/d(node) into .grad for every node reachable from out."""
    if out.value.ndim != 0:
        raise ValueError("backward expects a scalar output node")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            stack.append((parent, False))

    for node in order:
        node.grad = np.zeros_like(node.value)
    out.grad = np.ones_like(out.value)
    for node in reversed(order):
        for parent, vjp in node.parents:
            parent.grad = parent.grad + vjp(node.grad)


# ---------------------------------------------------------------------------
# The micro net.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MicroNet:
    conv_w: np.ndarray  # [K, 3, 3]
    conv_b: np.ndarray  # [K]
    dense_w: np.ndarray  # [C, K]
    dense_b: np.ndarray  # [C]
    side: int

    @property
    def num_filters(self) -> int:
        return self.conv_w.shape[0]

    @property
    def num_classes(self) -> int:
        return self.dense_w.shape[0]


@dataclass(frozen=True)
class ForwardTrace:
    activations: np.ndarray  # [K, S-2, S-2], post-ReLU
    logits: np.ndarray  # [C]
    probs: np.ndarray  # [C]


def init_micronet(seed: int, side: int = 16, num_filters: int = 4,
                  num_classes: int = 3) -> MicroNet:
    """Draw all parameters from uniform(-0.5, 0.5) with a deterministic seed."""
    if side < 5:
        raise ValueError(f"side must be >= 5, got {side}")
    if num_filters < 1:
        raise ValueError(f"num_filters must be >= 1, got {num_filters}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    rng = np.random.default_rng(seed)

    def draw(*shape):
        return rng.uniform(-0.5, 0.5, size=shape)

    return MicroNet(
        conv_w=draw(num_filters, 3, 3),
        conv_b=draw(num_filters),
        dense_w=draw(num_classes, num_filters),
        dense_b=draw(num_classes),
        side=side,
    )


def _conv3x3_valid(image: np.ndarray, kernels: np.ndarray,
                   biases: np.ndarray) -> np.ndarray:
    s = image.shape[0]
    out = np.empty((kernels.shape[0], s - 2, s - 2))
    for k in range(kernels.shape[0]):
        acc = np.full((s - 2, s - 2), biases[k])
        for di in range(3):
            for dj in range(3):
                acc += kernels[k, di, dj] * image[di:di + s - 2, dj:dj + s - 2]
        out[k] = acc
    return out


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max())
    return z / z.sum()


def forward(net: MicroNet, image: np.ndarray) -> ForwardTrace:
    """conv (valid) -> ReLU -> global average pool -> dense -> softmax."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (net.side, net.side):
        raise ValueError(
            f"image shape {image.shape} does not match net side {net.side}"
        )
    acts = np.maximum(_conv3x3_valid(image, net.conv_w, net.conv_b), 0.0)
    pooled = acts.mean(axis=(1, 2))
    logits = net.dense_w @ pooled + net.dense_b
    return ForwardTrace(activations=acts, logits=logits, probs=_softmax(logits))


def _head_logits(net: MicroNet, acts: Var) -> Var:
    # GAP -> dense, built on the tape
    _, h, w = acts.value.shape
    pooled = v_scale(v_sum(acts, axis=(1, 2)), 1.0 / (h * w))
    return v_add(v_matvec(Var(net.dense_w), pooled), Var(net.dense_b))


def backward_class(net: MicroNet, image: np.ndarray, c: int) -> np.ndarray:
    """Gradient of the pre-softmax logit y^c w.r.t. the post-ReLU activations.

    Returned shape is [K, S-2, S-2], matching ForwardTrace.activations.
    """
    if not 0 <= c < net.num_classes:
        raise ValueError(f"class index {c} out of range [0, {net.num_classes})")
    trace = forward(net, image)
    acts = Var(trace.activations)
    logit = v_index(_head_logits(net, acts), c)
    backward(logit)
    return acts.grad


def _head_only(net: MicroNet, acts: np.ndarray) -> np.ndarray:
    return net.dense_w @ acts.mean(axis=(1, 2)) + net.dense_b


def finite_diff_check(net: MicroNet, image: np.ndarray, c: int,
                      eps: float = 1e-3) -> float:
    """Max relative error of backward_class against central differences.

    Each activation entry is perturbed by +/-eps and the GAP->dense head is
    re-run from the perturbed activations; the relative error denominator
    is |numeric| + 1e-8.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    analytic = backward_class(net, image, c)
    acts = forward(net, image).activations
    worst = 0.0
    for idx in np.ndindex(acts.shape):
        bumped = acts.copy()
        bumped[idx] = acts[idx] + eps
        hi = _head_only(net, bumped)[c]
        bumped[idx] = acts[idx] - eps
        lo = _head_only(net, bumped)[c]
        numeric = (hi - lo) / (2.0 * eps)
        rel = abs(analytic[idx] - numeric) / (abs(numeric) + 1e-8)
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Parameter persistence (GCT1 tensors + a small listing file).
# ---------------------------------------------------------------------------

_PARAM_GROUPS = ("conv_w", "conv_b", "dense_w", "dense_b")


def save_params(net: MicroNet, directory) -> None:
    """Write each parameter group as one GCT1 tensor, listed in params.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    listing = {"side": net.side, "tensors": {}}
    for name in _PARAM_GROUPS:
        ref = f"{name}.gct"
        write_tensor(getattr(net, name).astype(np.float32), directory / ref)
        listing["tensors"][name] = ref
    with open(directory / "params.json", "w", encoding="utf-8") as fh:
        json.dump(listing, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_params(directory) -> MicroNet:
    directory = Path(directory)
    listing = json.loads((directory / "params.json").read_text(encoding="utf-8"))
    groups = {
        name: read_tensor(directory / listing["tensors"][name]).astype(np.float64)
        for name in _PARAM_GROUPS
    }
    return MicroNet(side=int(listing["side"]), **groups)
