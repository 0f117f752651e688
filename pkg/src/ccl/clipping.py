"""Bias clipping against interval certificates, and certificate relaxation.

Clipping walks the certificates in order, keeping an accepted set.  For each
neuron of each affine layer the admissible biases are the intersection, over
the accepted set plus the candidate, of ``[lw - min(w.x), up - max(w.x)]``
where ``x`` ranges over the certificate's box for the previous layer and
``[lw, up]`` is the certificate's interval for the neuron.  A candidate whose
intersection is empty anywhere is dropped and the biases it touched are
restored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .network import AffineLayer, Network, ShapeError
from .verifier import (
    Box,
    Certificate,
    CertificateStructureError,
    IsLabel,
    NotLabel,
    PostCondition,
    check_post,
    analyze,
    extend_certificate,
    propagate,
    propagate_affine,
    validate_certificate,
    weighted_bounds,
)

# Relaxation floor for bounds whose magnitude is (near) zero.
TAU = 0.1
DEFAULT_K_SCHEDULE = (1.0, 2.0, 3.0, 4.0, 5.0)
_MAX_NUDGES = 64


class InterpolationError(ValueError):
    """The output box does not entail the post-condition."""


@dataclass(frozen=True)
class DifferenceConstraint:
    """``x[winner] >= x[loser] + delta``."""

    winner: int
    loser: int
    delta: float


@dataclass
class Interpolant:
    constraints: list[DifferenceConstraint]

    def holds_on(self, box: Box) -> bool:
        return all(box.lw[c.winner] - box.up[c.loser] >= c.delta for c in self.constraints)


@dataclass
class CertStatus:
    kind: str  # "untouched" | "clipped" | "relaxed" | "dropped"
    neurons: list[tuple[int, int]] = field(default_factory=list)
    k: float | None = None
    reason: str | None = None

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.neurons:
            out["neurons"] = [list(n) for n in self.neurons]
        if self.k is not None:
            out["k"] = self.k
        if self.reason is not None:
            out["reason"] = self.reason
        return out


@dataclass
class ClipOutcome:
    surviving: list[str] = field(default_factory=list)
    status: dict[str, CertStatus] = field(default_factory=dict)
    # (layer index, neuron) -> total bias change
    bias_deltas: dict[tuple[int, int], float] = field(default_factory=dict)
    # first infeasible (layer index, neuron) per dropped certificate
    failed_at: dict[str, tuple[int, int]] = field(default_factory=dict)


@dataclass
class NeuronFeasibility:
    layer: int
    neuron: int
    max_lw: float
    min_up: float
    bias: float
    # the current bias passes the exact check (covers ranges that rounding makes look empty)
    bias_admissible: bool = False

    @property
    def feasible(self) -> bool:
        return self.max_lw <= self.min_up or self.bias_admissible


def preactivation_bounds(w, b: float, in_box: Box) -> tuple[float, float]:
    """Range of ``w.x + b`` over ``in_box`` (bias included)."""
    w = np.asarray(w, dtype=np.float64).reshape(1, -1)
    if w.shape[1] != in_box.width:
        raise ShapeError(f"weight row has {w.shape[1]} entries, box has width {in_box.width}")
    lo, hi = weighted_bounds(w, in_box.lw, in_box.up)
    return float(b + lo[0]), float(b + hi[0])


def _check_widths(net: Network, certs: Sequence[Certificate]):
    widths = net.widths
    for c in certs:
        if c.widths != widths:
            raise CertificateStructureError(
                f"certificate {c.cert_id} has widths {c.widths}, network has {widths}"
            )


class _LayerBounds:
    """Per-certificate weighted bounds for one affine layer (weights are fixed during clipping)."""

    def __init__(self, layer: AffineLayer, in_box: Box, target: Box):
        self.lo, self.hi = weighted_bounds(layer.weights, in_box.lw, in_box.up)
        self.lw, self.up = target.lw, target.up

    def lower_gap(self):
        return self.lw - self.lo

    def upper_gap(self):
        return self.up - self.hi

    def admits(self, j: int, b: float) -> tuple[bool, bool]:
        # same arithmetic as propagate_affine: bias + weighted bound
        return bool(b + self.lo[j] >= self.lw[j]), bool(b + self.hi[j] <= self.up[j])


def _admissible(bounds: list[_LayerBounds], j: int, b: float) -> tuple[bool, bool]:
    low_ok = up_ok = True
    for lb in bounds:
        lo, hi = lb.admits(j, b)
        low_ok &= lo
        up_ok &= hi
    return low_ok, up_ok


def _choose_bias(max_lw: float, min_up: float, current: float) -> float:
    if math.isfinite(max_lw) and math.isfinite(min_up):
        return (max_lw + min_up) / 2.0
    if math.isfinite(max_lw):
        return max(current, max_lw)
    if math.isfinite(min_up):
        return min(current, min_up)
    return current


def _settle(bounds, j, b):
    """Move ``b`` by ulps until every certificate admits it exactly; ``None`` if impossible."""
    for _ in range(_MAX_NUDGES):
        low_ok, up_ok = _admissible(bounds, j, b)
        if low_ok and up_ok:
            return b
        if not low_ok and not up_ok:
            return None
        b = np.nextafter(b, math.inf if not low_ok else -math.inf)
    return None


def feasibility(net: Network, certs: Sequence[Certificate]) -> list[NeuronFeasibility]:
    """Admissible bias range of every affine neuron with respect to all ``certs``."""
    _check_widths(net, certs)
    out = []
    for i, layer in enumerate(net.layers):
        if not isinstance(layer, AffineLayer):
            continue
        bounds = [_LayerBounds(layer, c.boxes[i], c.boxes[i + 1]) for c in certs]
        max_lw = np.max([lb.lower_gap() for lb in bounds], axis=0)
        min_up = np.min([lb.upper_gap() for lb in bounds], axis=0)
        for j in range(layer.n_out):
            b = float(layer.bias[j])
            ok = all(_admissible(bounds, j, b))
            out.append(NeuronFeasibility(i, j, float(max_lw[j]), float(min_up[j]), b, ok))
    return out


def clip(
    net: Network,
    certs: Sequence[Certificate],
    strict_alg2: bool = False,
    layers: Sequence[int] | None = None,
) -> tuple[Network, ClipOutcome]:
    """Adjust biases so that every certificate that can be kept is valid.

    With ``strict_alg2`` every neuron's bias is moved to the midpoint of its
    admissible range; otherwise a bias that is already admissible is left alone.
    ``layers`` restricts clipping to the given layer indices.
    """
    _check_widths(net, certs)
    net = net.copy()
    affine = [i for i in net.affine_indices if layers is None or i in layers]
    cache: dict[tuple[int, int], _LayerBounds] = {}

    def bounds_for(ci: int, i: int) -> _LayerBounds:
        key = (ci, i)
        if key not in cache:
            cert = certs[ci]
            cache[key] = _LayerBounds(net.layers[i], cert.boxes[i], cert.boxes[i + 1])
        return cache[key]

    outcome = ClipOutcome()
    original = {i: net.layers[i].bias.copy() for i in affine}
    accepted: list[int] = []
    for ci, cert in enumerate(certs):
        snapshot = {i: net.layers[i].bias.copy() for i in affine}
        trial = accepted + [ci]
        modified: list[tuple[int, int]] = []
        failure = None
        for i in affine:
            layer = net.layers[i]
            bounds = [bounds_for(t, i) for t in trial]
            max_lw = np.max([lb.lower_gap() for lb in bounds], axis=0)
            min_up = np.min([lb.upper_gap() for lb in bounds], axis=0)
            for j in range(layer.n_out):
                current = float(layer.bias[j])
                keep = all(_admissible(bounds, j, current))
                if keep and not strict_alg2:
                    continue
                chosen = None
                if max_lw[j] <= min_up[j]:
                    chosen = _settle(bounds, j, _choose_bias(float(max_lw[j]), float(min_up[j]), current))
                if chosen is None and keep:
                    # a zero-width range can lose its only admissible value to rounding
                    chosen = current
                if chosen is None:
                    failure = (i, j, max_lw[j], min_up[j])
                    break
                if chosen != current:
                    layer.bias[j] = chosen
                    modified.append((i, j))
            if failure:
                break

        if failure:
            for i in affine:
                net.layers[i].bias[:] = snapshot[i]
            i, j, lo, hi = failure
            outcome.status[cert.cert_id] = CertStatus(
                "dropped", reason=f"layer {i} neuron {j}: max_lw {lo:.6g} > min_up {hi:.6g}"
            )
            outcome.failed_at[cert.cert_id] = (i, j)
        else:
            accepted.append(ci)
            outcome.surviving.append(cert.cert_id)
            outcome.status[cert.cert_id] = CertStatus("clipped", modified) if modified else CertStatus("untouched")

    for i in affine:
        for j in np.flatnonzero(net.layers[i].bias != original[i]):
            outcome.bias_deltas[(i, int(j))] = float(net.layers[i].bias[j] - original[i][j])
    return net, outcome


def interpolate(out_box: Box, post: PostCondition) -> Interpolant:
    """Tightest difference constraints between the output box and ``post``.

    The output box implies the returned constraints and the constraints imply
    ``post``.
    """
    c = post.label
    if not 0 <= c < out_box.width:
        raise InterpolationError(f"label {c} outside output width {out_box.width}")
    others = [j for j in range(out_box.width) if j != c]
    if isinstance(post, NotLabel):
        gaps = [out_box.lw[j] - out_box.up[c] for j in others]
        if not gaps or max(gaps) <= 0:
            raise InterpolationError(f"output box does not rule out label {c}")
        best = others[int(np.argmax(gaps))]
        return Interpolant([DifferenceConstraint(best, c, float(max(gaps)))])
    constraints = []
    for j in others:
        gap = float(out_box.lw[c] - out_box.up[j])
        if gap <= 0:
            raise InterpolationError(f"output box does not separate label {c} from {j}")
        constraints.append(DifferenceConstraint(c, j, gap))
    return Interpolant(constraints)


def _widen(value: float, k: float) -> float:
    return k * max(abs(value), TAU)


def relax(cert: Certificate, itp: Interpolant, k: float) -> Certificate:
    """Widen the output bounds the interpolant does not rely on by factor ``k``.

    Winners' upper bounds grow and losers' lower bounds shrink; the bounds the
    interpolant reads (winner lower, loser upper) stay fixed, so the
    post-condition still holds on the relaxed box.
    """
    if k <= 0:
        raise ValueError("relaxation factor must be positive")
    out = cert.boxes[-1].copy()
    winners = {c.winner for c in itp.constraints}
    losers = {c.loser for c in itp.constraints}
    for j in sorted(winners - losers):
        out.up[j] = out.up[j] + _widen(out.up[j], k)
    for c in sorted(losers - winners):
        out.lw[c] = out.lw[c] - _widen(out.lw[c], k)
    return replace(cert, boxes=[b.copy() for b in cert.boxes[:-1]] + [out])


def _output_targets(out: Box, old: Box, post: PostCondition, itp: Interpolant | None, k: float) -> Box:
    """Output box for a repair candidate.

    ``out`` is the current image of the previous box; ``old`` holds the
    certified (possibly relaxed) intervals of the leading output neurons.
    Old neurons the interpolant does not mention keep the hull of their
    certified interval and the current image, which the current bias always
    satisfies.  After output growth, a new neuron that could reach an
    ``IsLabel`` winner's lower bound gets the target
    ``[T - (1 + k) * width - TAU, T]`` with ``T`` just below that bound, which
    clipping can always reach by lowering the bias.
    """
    out = out.copy()
    n = old.width
    used = set(range(n)) if itp is None else {c.winner for c in itp.constraints} | {c.loser for c in itp.constraints}
    for j in range(n):
        if j in used:
            out.lw[j], out.up[j] = old.lw[j], old.up[j]
        else:
            out.lw[j], out.up[j] = min(old.lw[j], out.lw[j]), max(old.up[j], out.up[j])
    if isinstance(post, IsLabel) and out.width > n:
        c = post.label
        gaps = [old.lw[c] - old.up[j] for j in range(n) if j != c]
        target = old.lw[c] - min([TAU] + [g for g in gaps if g > 0])
        for j in range(n, out.width):
            if out.up[j] >= old.lw[c]:
                width = out.up[j] - out.lw[j]
                out.lw[j] = target - (1.0 + k) * width - TAU
                out.up[j] = target
    return out


def lift(net: Network, cert: Certificate, k: float = 0.0) -> Certificate:
    """:func:`extend_certificate` with output targets for neurons added by growth."""
    full = extend_certificate(net, cert)
    if full is cert:
        return full
    out = _output_targets(full.boxes[-1], cert.boxes[-1], cert.post, None, k)
    return replace(full, boxes=full.boxes[:-1] + [out])


def _refreshed(net: Network, cert: Certificate, itp: Interpolant, k: float) -> Certificate:
    """Relaxed certificate whose hidden boxes are re-analysed on ``net``.

    Only the output layer then needs clipping: the re-analysed boxes satisfy
    the hidden part of the chain by construction.
    """
    relaxed = relax(cert, itp, k)
    boxes = analyze(net, cert.boxes[0])
    out = _output_targets(boxes[-1], relaxed.boxes[-1], cert.post, itp, k)
    return replace(cert, boxes=boxes[:-1] + [out])


# Strictness margin for rebalanced output separations.
REBALANCE_MARGIN = 1e-6


def _separations(pre_lo, pre_hi, bias, post: PostCondition) -> list[tuple[int, int, float]]:
    """``(winner, loser, d)`` with ``b[winner] - b[loser] >= d`` implying ``post``.

    ``pre_lo``/``pre_hi`` bound the output pre-activations without bias.  For
    ``NotLabel`` the competitor that is currently best separated is used.
    """
    c = post.label
    others = [j for j in range(len(pre_lo)) if j != c]
    if isinstance(post, IsLabel):
        return [(c, j, float(pre_hi[j] - pre_lo[c]) + REBALANCE_MARGIN) for j in others]
    best = max(others, key=lambda j: (pre_lo[j] + bias[j]) - (pre_hi[c] + bias[c]))
    return [(best, c, float(pre_hi[c] - pre_lo[best]) + REBALANCE_MARGIN)]


def rebalance(net: Network, certs: Sequence[Certificate]) -> tuple[Network, list[Certificate]] | None:
    """Lower output biases until every certificate's post-condition holds.

    Each certificate's hidden chain must already hold on ``net``; only its
    output box is rebuilt as the exact image under the new biases.  With the
    weights fixed, every post-condition is a set of difference constraints
    ``b[w] - b[l] >= d`` on the output biases.  Starting from the current
    biases, losers are pushed down until all constraints hold, which yields the
    largest solution below the current biases; a constraint cycle that keeps
    pushing means no solution exists and ``None`` is returned.
    """
    _check_widths(net, certs)
    last = net.affine_indices[-1]
    layer = net.layers[last]
    if last != len(net.layers) - 1:
        raise ShapeError("network must end with an affine layer")
    for cert in certs:
        for i, lay in enumerate(net.layers[:-1]):
            if not propagate(cert.boxes[i], lay).is_subset(cert.boxes[i + 1]):
                raise ValueError(f"certificate {cert.cert_id} hidden chain does not hold on the network")

    bias = layer.bias.copy()
    constraints = []
    for cert in certs:
        lo, hi = weighted_bounds(layer.weights, cert.boxes[-2].lw, cert.boxes[-2].up)
        constraints += _separations(lo, hi, bias, cert.post)
    for _ in range(layer.n_out + 1):
        changed = False
        for w, l, d in constraints:
            if bias[l] > bias[w] - d:
                bias[l] = bias[w] - d
                changed = True
        if not changed:
            break
    else:
        return None

    out = net.copy()
    out.layers[last].bias[:] = bias
    fixed = []
    for cert in certs:
        image = propagate_affine(cert.boxes[-2], out.layers[last])
        if not check_post(image, cert.post):
            return None
        fixed.append(replace(cert, boxes=cert.boxes[:-1] + [image]))
    return out, fixed


def _kept_all(outcome: ClipOutcome, accepted: Sequence[Certificate]) -> bool:
    return all(outcome.status[c.cert_id].kind != "dropped" for c in accepted)


@dataclass
class RepairResult:
    network: Network
    status: CertStatus
    certificate: Certificate | None
    # accepted certificates as they stand on ``network``
    accepted: list[Certificate] = field(default_factory=list)


def repair(
    net: Network,
    broken: Certificate,
    accepted: Sequence[Certificate],
    k_schedule: Sequence[float] = DEFAULT_K_SCHEDULE,
    strict_alg2: bool = False,
    rebalance_outputs: bool = True,
) -> RepairResult:
    """Restore ``broken`` by clipping, relaxing its output box when clipping alone fails.

    First the certificate is clipped as is, over every layer.  If that fails,
    its output box is relaxed with increasing factors; each relaxed candidate
    takes fresh hidden boxes from the current network and only the output
    layer is clipped.  As a last resort, with ``rebalance_outputs``, the
    output biases are solved for jointly with the accepted certificates (see
    :func:`rebalance`).  ``accepted`` certificates must already be valid on
    ``net``; they constrain the admissible biases and stay valid.  ``broken``
    may come from a smaller network that ``net`` was grown from.
    """
    accepted = list(accepted)
    for acc in accepted:
        if not validate_certificate(net, acc):
            raise ValueError(f"accepted certificate {acc.cert_id} is not valid on the network")
    cand = lift(net, broken)
    reason = "post-condition does not hold on the lifted output box"
    if check_post(cand.boxes[-1], cand.post):
        clipped, outcome = clip(net, accepted + [cand], strict_alg2)
        status = outcome.status[cand.cert_id]
        if status.kind != "dropped" and _kept_all(outcome, accepted):
            return RepairResult(clipped, status, cand, accepted)
        reason = status.reason

    try:
        itp = interpolate(broken.boxes[-1], broken.post)
    except InterpolationError as exc:
        return RepairResult(net, CertStatus("dropped", reason=str(exc)), None, accepted)
    last = [net.affine_indices[-1]]
    for k in k_schedule:
        cand = _refreshed(net, broken, itp, k)
        if not check_post(cand.boxes[-1], cand.post):
            continue
        clipped, outcome = clip(net, accepted + [cand], strict_alg2, layers=last)
        status = outcome.status[cand.cert_id]
        if status.kind != "dropped" and _kept_all(outcome, accepted):
            if not validate_certificate(clipped, cand):
                raise RuntimeError(f"repaired certificate {cand.cert_id} does not validate")
            return RepairResult(clipped, CertStatus("relaxed", status.neurons, k=k), cand, accepted)
        reason = status.reason

    if rebalance_outputs:
        boxes = analyze(net, broken.boxes[0])
        solved = rebalance(net, accepted + [replace(broken, boxes=boxes)])
        if solved is not None:
            fixed_net, fixed = solved
            last_i = last[0]
            moved = [(last_i, int(j)) for j in np.flatnonzero(fixed_net.layers[last_i].bias != net.layers[last_i].bias)]
            return RepairResult(fixed_net, CertStatus("rebalanced", moved), fixed[-1], fixed[:-1])
        reason = f"{reason}; output biases cannot be rebalanced"
    return RepairResult(net, CertStatus("dropped", reason=f"no relaxation factor succeeded ({reason})"), None, accepted)
