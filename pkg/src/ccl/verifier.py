"""Interval (box) abstract interpretation, properties and certificates."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .network import AffineLayer, Network, ShapeError, forward, label


class CertificateStructureError(ValueError):
    """A certificate's shape does not fit the network it is checked against."""


class Interval(NamedTuple):
    lw: float
    up: float


@dataclass
class Box:
    """One interval per neuron of a layer boundary."""

    lw: np.ndarray
    up: np.ndarray

    def __post_init__(self):
        self.lw = np.array(self.lw, dtype=np.float64).reshape(-1)
        self.up = np.array(self.up, dtype=np.float64).reshape(-1)
        if self.lw.shape != self.up.shape:
            raise ShapeError("lower and upper bound vectors differ in length")
        if np.any(self.lw > self.up):
            bad = int(np.flatnonzero(self.lw > self.up)[0])
            raise ValueError(f"empty interval at index {bad}: [{self.lw[bad]}, {self.up[bad]}]")

    @classmethod
    def point(cls, x) -> "Box":
        x = np.asarray(x, dtype=np.float64)
        return cls(x.copy(), x.copy())

    @classmethod
    def from_intervals(cls, intervals: Sequence[tuple[float, float]]) -> "Box":
        arr = np.asarray(intervals, dtype=np.float64).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1])

    @property
    def width(self) -> int:
        return self.lw.shape[0]

    def __getitem__(self, i: int) -> Interval:
        return Interval(float(self.lw[i]), float(self.up[i]))

    def __iter__(self):
        return (Interval(float(a), float(b)) for a, b in zip(self.lw, self.up))

    def __len__(self) -> int:
        return self.width

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool(np.all(self.lw <= x) and np.all(x <= self.up))

    def is_subset(self, other: "Box") -> bool:
        return bool(np.all(other.lw <= self.lw) and np.all(self.up <= other.up))

    def copy(self) -> "Box":
        return Box(self.lw.copy(), self.up.copy())


# -- post-conditions and properties -------------------------------------------------


@dataclass(frozen=True)
class NotLabel:
    label: int


@dataclass(frozen=True)
class IsLabel:
    label: int


PostCondition = NotLabel | IsLabel


@dataclass
class Reachability:
    pre: Box
    post: PostCondition


@dataclass
class Robustness:
    x0: np.ndarray
    y0_label: int
    epsilon: float
    clamp: tuple[float, float] | None = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64).reshape(-1)
        if self.epsilon < 0:
            raise ValueError("robustness epsilon must be non-negative")


@dataclass
class Fairness:
    x: np.ndarray
    sensitive_index: int
    sensitive_values: list
    epsilon_other: float = 0.0
    clamp: tuple[float, float] | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1)
        self.sensitive_values = [float(v) for v in self.sensitive_values]
        if not self.sensitive_values:
            raise ValueError("fairness property needs at least one sensitive value")
        if not 0 <= self.sensitive_index < self.x.shape[0]:
            raise ValueError(f"sensitive_index {self.sensitive_index} out of range")
        if self.epsilon_other < 0:
            raise ValueError("epsilon_other must be non-negative")


Property = Reachability | Robustness | Fairness


@dataclass
class Certificate:
    """Layer-wise boxes ``boxes[0..k]`` witnessing that ``property`` holds.

    ``post`` is the concrete output condition the last box entails; for
    fairness it is the label shared by all variants.
    """

    property_id: str
    property: Property
    post: PostCondition
    boxes: list[Box]
    variant_tag: float | None = None

    @property
    def cert_id(self) -> str:
        if self.variant_tag is None:
            return self.property_id
        return f"{self.property_id}@{self.variant_tag:g}"

    @property
    def widths(self) -> list[int]:
        return [b.width for b in self.boxes]

    def copy(self) -> "Certificate":
        return replace(self, boxes=[b.copy() for b in self.boxes])


@dataclass
class VerificationResult:
    verified: bool
    certificates: list[Certificate] = field(default_factory=list)


# -- abstract transformers ----------------------------------------------------------


def weighted_bounds(weights: np.ndarray, lw: np.ndarray, up: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Min and max of ``weights @ x`` over the box ``[lw, up]`` (no bias).

    Products are materialised and summed row-wise so every caller sees
    bit-identical results for the same inputs; certificate validation relies on
    this.
    """
    pos = np.maximum(weights, 0.0)
    neg = np.minimum(weights, 0.0)
    lo = (pos * lw).sum(axis=1) + (neg * up).sum(axis=1)
    hi = (pos * up).sum(axis=1) + (neg * lw).sum(axis=1)
    return lo, hi


def propagate_affine(box: Box, layer: AffineLayer) -> Box:
    if box.width != layer.n_in:
        raise ShapeError(f"box width {box.width} does not match layer input {layer.n_in}")
    lo, hi = weighted_bounds(layer.weights, box.lw, box.up)
    return Box(layer.bias + lo, layer.bias + hi)


def propagate_relu(box: Box) -> Box:
    return Box(np.maximum(box.lw, 0.0), np.maximum(box.up, 0.0))


def propagate(box: Box, layer) -> Box:
    if isinstance(layer, AffineLayer):
        return propagate_affine(box, layer)
    return propagate_relu(box)


def analyze(net: Network, input_box: Box) -> list[Box]:
    if input_box.width != net.input_dim:
        raise ShapeError(f"input box width {input_box.width} != input_dim {net.input_dim}")
    boxes = [input_box]
    for layer in net.layers:
        boxes.append(propagate(boxes[-1], layer))
    return boxes


def check_post(out_box: Box, post: PostCondition) -> bool:
    """Sufficient (sound, incomplete) check that every output in the box meets ``post``."""
    c = post.label
    if not 0 <= c < out_box.width:
        raise ValueError(f"label {c} outside output width {out_box.width}")
    others = np.arange(out_box.width) != c
    if isinstance(post, NotLabel):
        return bool(np.any(out_box.lw[others] > out_box.up[c]))
    return bool(np.all(out_box.lw[c] > out_box.up[others]))


def _clamped(lw, up, clamp):
    if clamp is None:
        return lw, up
    return np.maximum(lw, clamp[0]), np.minimum(up, clamp[1])


def pre_boxes(prop: Property, input_dim: int, clamp: tuple[float, float] | None = None) -> list[tuple[float | None, Box]]:
    """Input boxes encoding the precondition, one per fairness variant.

    The property's own ``clamp`` takes precedence over the ``clamp`` argument.
    """
    if isinstance(prop, Reachability):
        if prop.pre.width != input_dim:
            raise ShapeError(f"precondition width {prop.pre.width} != input_dim {input_dim}")
        return [(None, prop.pre)]

    clamp = getattr(prop, "clamp", None) or clamp
    if isinstance(prop, Robustness):
        if prop.x0.shape[0] != input_dim:
            raise ShapeError(f"sample has {prop.x0.shape[0]} features, expected {input_dim}")
        lw, up = _clamped(prop.x0 - prop.epsilon, prop.x0 + prop.epsilon, clamp)
        return [(None, Box(lw, up))]

    if prop.x.shape[0] != input_dim:
        raise ShapeError(f"sample has {prop.x.shape[0]} features, expected {input_dim}")
    out = []
    for v in prop.sensitive_values:
        if clamp is not None and not clamp[0] <= v <= clamp[1]:
            raise ValueError(f"sensitive value {v} lies outside clamp {clamp}")
        lw, up = _clamped(prop.x - prop.epsilon_other, prop.x + prop.epsilon_other, clamp)
        lw[prop.sensitive_index] = up[prop.sensitive_index] = v
        out.append((v, Box(lw, up)))
    return out


def verify(net: Network, prop: Property, property_id: str = "p0", clamp=None) -> VerificationResult:
    variants = pre_boxes(prop, net.input_dim, clamp)
    if isinstance(prop, Fairness):
        certs = []
        labels = set()
        ok = True
        for tag, box in variants:
            center = prop.x.copy()
            center[prop.sensitive_index] = tag
            post = IsLabel(label(forward(net, center).output))
            labels.add(post.label)
            boxes = analyze(net, box)
            ok = ok and check_post(boxes[-1], post)
            certs.append(Certificate(property_id, prop, post, boxes, tag))
        ok = ok and len(labels) == 1
        return VerificationResult(ok, certs if ok else [])

    post = prop.post if isinstance(prop, Reachability) else IsLabel(prop.y0_label)
    boxes = analyze(net, variants[0][1])
    ok = check_post(boxes[-1], post)
    return VerificationResult(ok, [Certificate(property_id, prop, post, boxes)] if ok else [])


def verify_all(net: Network, props: Sequence[tuple[str, Property]], clamp=None, threads: int | None = None) -> list[VerificationResult]:
    """Verify many properties; ``CCL_THREADS`` bounds the worker count."""
    if threads is None:
        threads = int(os.environ.get("CCL_THREADS", "1"))
    if threads <= 1:
        return [verify(net, p, pid, clamp) for pid, p in props]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda item: verify(net, item[1], item[0], clamp), props))


def validate_certificate(net: Network, cert: Certificate) -> bool:
    """Layer-local check of the certificate chain and its post-condition.

    Each box is propagated through exactly one layer and compared with the next
    box (containment without slack); nothing is re-analysed end to end.
    """
    widths = net.widths
    if cert.widths != widths:
        raise CertificateStructureError(
            f"certificate {cert.cert_id} has widths {cert.widths}, network has {widths}"
        )
    for layer, here, there in zip(net.layers, cert.boxes, cert.boxes[1:]):
        if not propagate(here, layer).is_subset(there):
            return False
    return check_post(cert.boxes[-1], cert.post)


def extend_certificate(net: Network, cert: Certificate) -> Certificate:
    """Lift a certificate of a smaller (pre-growth) network onto ``net``.

    The certificate's boxes keep constraining the leading (old) neurons of each
    layer.  Neurons added by growth receive the exact interval image of the
    lifted previous box, so the lifted chain holds for them by construction;
    whether it holds for the old neurons, and whether the post-condition holds
    over the whole output, is left to :func:`validate_certificate`.
    """
    widths = net.widths
    if len(cert.boxes) != len(widths):
        raise CertificateStructureError(
            f"certificate {cert.cert_id} has {len(cert.boxes)} boxes, network has {len(widths)} boundaries"
        )
    if cert.widths == widths:
        return cert
    if cert.widths[0] != widths[0] or any(c > w for c, w in zip(cert.widths, widths)):
        raise CertificateStructureError(
            f"certificate {cert.cert_id} widths {cert.widths} do not fit network widths {widths}"
        )
    for i, layer in enumerate(net.layers):
        if isinstance(layer, AffineLayer):
            if np.any(layer.weights[: cert.widths[i + 1], cert.widths[i]:] != 0):
                raise CertificateStructureError(
                    f"layer {i}: certified neurons read uncertified ones; certificate cannot be lifted"
                )
    boxes = [cert.boxes[0].copy()]
    for layer, old in zip(net.layers, cert.boxes[1:]):
        image = propagate(boxes[-1], layer)
        n = old.width
        image.lw[:n] = old.lw
        image.up[:n] = old.up
        boxes.append(image)
    return replace(cert, boxes=boxes)
