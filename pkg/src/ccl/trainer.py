"""Composite-loss training and the certified continual learning round."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .augment import OLD_TASK, LabeledSample, as_arrays, augment
from .clipping import DEFAULT_K_SCHEDULE, repair
from .network import Network, ShapeError, forward, gradient, grow, predict, sgd_step
from .verifier import Certificate, Interval, extend_certificate, validate_certificate, verify

log = logging.getLogger(__name__)

LossFn = Callable[[Network, np.ndarray, np.ndarray], tuple[float, np.ndarray]]


@dataclass
class TrainConfig:
    lr: float = 0.01
    epochs: int = 20
    batch_size: int = 32
    alpha: float = 0.001
    beta: float = 0.001
    per_cert_samples: int = 10
    seed: int = 0
    k_schedule: list = field(default_factory=lambda: list(DEFAULT_K_SCHEDULE))
    old_data_fraction: float = 0.2
    init_scale: float = 0.1
    strict_alg2: bool = False
    rebalance_outputs: bool = True
    select_best: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.per_cert_samples < 0:
            raise ValueError("per_cert_samples must be non-negative")
        if not 0.0 <= self.old_data_fraction <= 1.0:
            raise ValueError("old_data_fraction must lie in [0, 1]")
        ks = [float(k) for k in self.k_schedule]
        if any(k <= 0 for k in ks) or any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError("k_schedule must be positive and strictly increasing")
        self.k_schedule = ks

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# -- loss terms ---------------------------------------------------------------------


def dist(v: float, interval: Interval) -> float:
    """Squared distance to the interval midpoint when ``v`` is outside, else 0."""
    lw, up = interval
    if v < lw or v > up:
        return (v - (lw + up) / 2.0) ** 2
    return 0.0


def _in_box(X: np.ndarray, box) -> np.ndarray:
    return np.all((X >= box.lw) & (X <= box.up), axis=-1)


def _penalty(acts: list, X: np.ndarray, certs: Sequence[Certificate]):
    """Summed rho over samples and certificates, and d/d(activation) per boundary."""
    X2 = np.atleast_2d(X)
    total = 0.0
    adjoints: list = [None] * len(acts)
    for cert in certs:
        if cert.boxes[0].width != X2.shape[1]:
            raise ShapeError(f"certificate {cert.cert_id} input width does not match samples")
        gate = _in_box(X2, cert.boxes[0])
        if not gate.any():
            continue
        for l in range(1, len(cert.boxes)):
            box = cert.boxes[l]
            act = np.atleast_2d(acts[l])
            if box.width > act.shape[1]:
                raise ShapeError(f"certificate {cert.cert_id} is wider than layer boundary {l}")
            a = act[gate, : box.width]
            outside = (a < box.lw) | (a > box.up)
            if not outside.any():
                continue
            diff = np.where(outside, a - (box.lw + box.up) / 2.0, 0.0)
            total += float(np.sum(diff * diff))
            if adjoints[l] is None:
                adjoints[l] = np.zeros_like(act)
            adjoints[l][gate, : box.width] += 2.0 * diff
    if np.ndim(acts[0]) == 1:
        adjoints = [None if a is None else a[0] for a in adjoints]
    return total, adjoints


def rho(trace, x, cert: Certificate) -> float:
    """Certificate violation of one sample's activations; 0 when ``x`` is outside the input box."""
    return _penalty(trace.activations, np.asarray(x, dtype=np.float64), [cert])[0]


def reg(traces: Sequence, inputs: Sequence, certs: Sequence[Certificate]) -> float:
    return float(sum(rho(t, x, c) for t, x in zip(traces, inputs) for c in certs))


def anchor(theta: np.ndarray, theta0: np.ndarray, mask: np.ndarray | None) -> float:
    theta = np.asarray(theta, dtype=np.float64)
    theta0 = np.asarray(theta0, dtype=np.float64)
    if theta.shape != theta0.shape or (mask is not None and np.shape(mask) != theta.shape):
        raise ShapeError("theta, theta0 and mask must share one shape")
    if mask is None:
        return 0.0
    d = np.where(mask, theta - theta0, 0.0)
    return float(np.sum(d * d))


def anchor_grad(theta, theta0, mask) -> np.ndarray:
    if mask is None:
        return np.zeros_like(theta)
    return np.where(mask, 2.0 * (theta - theta0), 0.0)


def cross_entropy(net: Network, X: np.ndarray, y: np.ndarray):
    """Mean softmax cross-entropy, the trace, and d(loss)/d(logits)."""
    trace = forward(net, X)
    z = trace.output
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise ValueError(f"labels must lie in [0, {z.shape[1]})")
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logsum - shifted[np.arange(n), y]))
    probs = np.exp(shifted - logsum[:, None])
    probs[np.arange(n), y] -= 1.0
    return loss, trace, probs / n


def composite_loss(
    net: Network,
    X: np.ndarray,
    y: np.ndarray,
    certs: Sequence[Certificate] = (),
    alpha: float = 0.0,
    beta: float = 0.0,
    theta0: np.ndarray | None = None,
    mask: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Cross-entropy + alpha * Reg / batch + beta * anchor, with its gradient.

    The regularizer is summed over the batch and divided by the batch size, the
    same scaling as the cross-entropy mean.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    loss, trace, d_logits = cross_entropy(net, X, y)
    adjoints: list = [None] * len(trace.activations)
    adjoints[-1] = d_logits
    if alpha > 0 and certs:
        n = X.shape[0]
        penalty, reg_adj = _penalty(trace.activations, X, certs)
        loss += alpha * penalty / n
        for l, adj in enumerate(reg_adj):
            if adj is not None:
                scaled = (alpha / n) * adj
                adjoints[l] = scaled if adjoints[l] is None else adjoints[l] + scaled
    grad = gradient(net, trace, adjoints)
    if beta > 0 and mask is not None:
        theta = net.parameters()
        loss += beta * anchor(theta, theta0, mask)
        grad = grad + beta * anchor_grad(theta, theta0, mask)
    return loss, grad


# -- training loops -----------------------------------------------------------------


def accuracy(net: Network, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(net, X) == y))


def per_label_accuracy(net: Network, X: np.ndarray, y: np.ndarray) -> dict[int, float]:
    pred = predict(net, X) if len(y) else np.zeros(0, dtype=np.int64)
    return {int(c): float(np.mean(pred[y == c] == c)) for c in np.unique(y)}


def fit(
    net: Network,
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    loss_fn: LossFn | None = None,
    val: tuple[np.ndarray, np.ndarray] | None = None,
) -> Network:
    """Mini-batch SGD with seeded shuffling; keeps the best epoch on ``val`` if given."""
    if loss_fn is None:
        loss_fn = composite_loss
    rng = np.random.default_rng(cfg.seed)
    n = X.shape[0]
    best, best_acc = None, -1.0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grad = loss_fn(net, X[idx], y[idx])
            net = sgd_step(net, grad, cfg.lr)
        if val is not None and cfg.select_best:
            acc = accuracy(net, *val)
            if acc > best_acc:
                best, best_acc = net, acc
    return best if best is not None else net


def train_plain(net: Network, X: np.ndarray, y: np.ndarray, cfg: TrainConfig, val=None) -> Network:
    """Ordinary cross-entropy training, no certificate terms."""

    def ce(model, xb, yb):
        loss, trace, d_logits = cross_entropy(model, xb, yb)
        adjoints = [None] * len(trace.activations)
        adjoints[-1] = d_logits
        return loss, gradient(model, trace, adjoints)

    return fit(net, X, y, cfg, ce, val)


# -- continual learning round -------------------------------------------------------


@dataclass
class GrowSpec:
    hidden: list
    output: int = 0

    @property
    def adds_neurons(self) -> bool:
        return self.output > 0 or any(h > 0 for h in self.hidden)


@dataclass
class RoundRecord:
    round: int
    mode: str
    initial: list = field(default_factory=list)
    # round 0: drawn properties that did not verify
    skipped: list = field(default_factory=list)
    surviving: list = field(default_factory=list)
    untouched: list = field(default_factory=list)
    reverified: list = field(default_factory=list)
    clipped: list = field(default_factory=list)
    relaxed: dict = field(default_factory=dict)
    rebalanced: list = field(default_factory=list)
    dropped: dict = field(default_factory=dict)
    accuracy: float | None = None
    per_label_accuracy: dict = field(default_factory=dict)
    old_task_accuracy: float | None = None
    n_train: int = 0
    n_synthesized: int = 0
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["surviving_count"] = len(self.surviving)
        d["per_label_accuracy"] = {str(k): v for k, v in self.per_label_accuracy.items()}
        return d


@dataclass
class CclReport:
    records: list[RoundRecord] = field(default_factory=list)


@dataclass
class CclResult:
    network: Network
    certificates: list[Certificate]
    report: CclReport
    trained_network: Network


def stratified_subset(samples: Sequence[LabeledSample], fraction: float, seed: int) -> list[LabeledSample]:
    """Keep ``fraction`` of the samples of every label (rounded), chosen at random."""
    rng = np.random.default_rng(seed)
    by_label: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_label.setdefault(s.label, []).append(i)
    keep = []
    for lab in sorted(by_label):
        idx = by_label[lab]
        n = int(round(fraction * len(idx)))
        keep.extend(rng.choice(idx, size=n, replace=False).tolist())
    return [samples[i] for i in sorted(keep)]


def _reverify(net: Network, cert: Certificate, cache: dict) -> Certificate | None:
    if cert.property_id not in cache:
        cache[cert.property_id] = verify(net, cert.property, cert.property_id)
    res = cache[cert.property_id]
    if not res.verified:
        return None
    for c in res.certificates:
        if c.variant_tag == cert.variant_tag:
            return c
    return None


def ccl_retrain(
    old_net: Network,
    certs: Sequence[Certificate],
    new_data: Sequence[LabeledSample],
    cfg: TrainConfig,
    old_data: Sequence[LabeledSample] | None = None,
    grow_spec: GrowSpec | None = None,
    val_data: tuple[np.ndarray, np.ndarray] | None = None,
    repair_certs: bool = True,
    round_index: int = 1,
    mode: str = "ccl",
) -> CclResult:
    """One retraining round that tries to keep every certificate valid.

    Steps: initialise (copy or grow), augment with certificate samples (plus a
    stratified share of ``old_data`` when given), train on the composite loss,
    then check each certificate, re-verify broken ones, and repair the rest by
    clipping and relaxation.  ``repair_certs=False`` skips the repair step,
    which is how the baselines are run.  Every returned certificate validates
    against the returned network.
    """
    start = time.perf_counter()
    for cert in certs:
        if not validate_certificate(old_net, cert):
            raise ValueError(f"certificate {cert.cert_id} is not valid on the network being retrained")

    if grow_spec is not None and grow_spec.adds_neurons:
        net = grow(old_net, grow_spec.hidden, grow_spec.output, cfg.init_scale, cfg.seed)
        anchor_mask = net.old_param_mask
    else:
        net = old_net.copy()
        anchor_mask = None

    samples = list(new_data)
    synthesized = augment(old_net, certs, cfg.per_cert_samples, cfg.seed)
    samples += synthesized
    if old_data:
        kept = stratified_subset(old_data, cfg.old_data_fraction, cfg.seed)
        samples += [LabeledSample(s.input, s.label, OLD_TASK) for s in kept]
    X, y = as_arrays(samples, net.input_dim)
    if len(y) and y.max() >= net.output_dim:
        raise ValueError(
            f"training labels reach {int(y.max())} but the network has {net.output_dim} outputs; "
            "grow the output layer first"
        )

    theta0 = net.parameters()
    alpha, beta = cfg.alpha, cfg.beta

    def loss_fn(model, xb, yb):
        return composite_loss(model, xb, yb, certs, alpha, beta, theta0, anchor_mask)

    trained = fit(net, X, y, cfg, loss_fn, val_data) if len(y) else net
    net = trained

    record = RoundRecord(round_index, mode, initial=[c.cert_id for c in certs])
    record.n_train = int(len(y))
    record.n_synthesized = len(synthesized)
    accepted: list[Certificate] = []
    broken: list[Certificate] = []
    cache: dict = {}
    for cert in certs:
        lifted = extend_certificate(net, cert)
        if validate_certificate(net, lifted):
            accepted.append(lifted)
            record.untouched.append(cert.cert_id)
            continue
        fresh = _reverify(net, cert, cache)
        if fresh is not None:
            accepted.append(fresh)
            record.reverified.append(cert.cert_id)
        else:
            broken.append(cert)

    for cert in broken:
        if not repair_certs:
            record.dropped[cert.cert_id] = "invalid after retraining and re-verification failed"
            continue
        res = repair(net, cert, accepted, cfg.k_schedule, cfg.strict_alg2, cfg.rebalance_outputs)
        if res.certificate is None:
            record.dropped[cert.cert_id] = res.status.reason
            log.warning("certificate %s dropped: %s", cert.cert_id, res.status.reason)
            continue
        net = res.network
        accepted = res.accepted + [res.certificate]
        if res.status.kind == "relaxed":
            record.relaxed[cert.cert_id] = res.status.k
        elif res.status.kind == "rebalanced":
            record.rebalanced.append(cert.cert_id)
        else:
            record.clipped.append(cert.cert_id)

    invalid = [c.cert_id for c in accepted if not validate_certificate(net, c)]
    if invalid:
        raise RuntimeError(f"certificates {invalid} do not validate after clipping")

    order = {c.cert_id: i for i, c in enumerate(certs)}
    accepted.sort(key=lambda c: order[c.cert_id])
    record.surviving = [c.cert_id for c in accepted]
    if val_data is not None:
        record.accuracy = accuracy(net, *val_data)
        record.per_label_accuracy = per_label_accuracy(net, *val_data)
    record.wall_time = time.perf_counter() - start
    return CclResult(net, accepted, CclReport([record]), trained)
