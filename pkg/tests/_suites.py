"""Randomised property suites shared by the unit and acceptance tests."""

import numpy as np

from ccl.clipping import clip, repair
from ccl.network import forward, grow, predict
from ccl.verifier import (
    Box,
    Certificate,
    IsLabel,
    NotLabel,
    Reachability,
    Robustness,
    analyze,
    validate_certificate,
    verify,
)

from _oracles import random_box, random_net


def _biases(net):
    return [net.layers[i].bias.copy() for i in net.affine_indices]


def _weights(net):
    return [net.layers[i].weights for i in net.affine_indices]


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def random_certificates(net, rng, n=6):
    certs = []
    for k in range(n):
        if k % 3 == 2:
            lw, up = random_box(rng, net.input_dim, 0.1)
            out = forward(net, (lw + up) / 2).output
            loser = int(np.argmin(out))
            res = verify(net, Reachability(Box(lw, up), NotLabel(loser)), f"q{k}")
        else:
            x = rng.uniform(-1, 1, net.input_dim)
            res = verify(net, Robustness(x, int(predict(net, x)[0]), float(rng.uniform(0.005, 0.1))), f"r{k}")
        certs += res.certificates
    return certs


def perturb_biases(net, rng, scale):
    out = net.copy()
    for i in out.affine_indices:
        out.layers[i].bias += rng.normal(0, scale, out.layers[i].bias.shape)
    return out


def clip_repair_trial(rng) -> dict:
    """One randomised clip/repair trial; returns counts of checks and violations."""
    net = random_net(rng, input_dim=3, hidden=[int(w) for w in rng.integers(2, 9, int(rng.integers(2, 4)))])
    certs = random_certificates(net, rng)
    stats = {"certs": len(certs), "survived": 0, "dropped": 0, "violations": 0}
    if not certs:
        return stats
    noisy = perturb_biases(net, rng, float(rng.choice([0.01, 0.05, 0.2, 0.5])))
    strict = bool(rng.integers(2))

    clipped, outcome = clip(noisy, certs, strict_alg2=strict)
    if not _same(_weights(clipped), _weights(noisy)):
        stats["violations"] += 1
    for k, cert in enumerate(certs):
        if cert.cert_id in outcome.surviving:
            stats["survived"] += 1
            stats["violations"] += not validate_certificate(clipped, cert)
        else:
            stats["dropped"] += 1
            # the network before and after this certificate's iteration must agree bit for bit
            before, _ = clip(noisy, certs[:k], strict_alg2=strict) if k else (noisy, None)
            after, _ = clip(noisy, certs[: k + 1], strict_alg2=strict)
            stats["violations"] += not _same(_biases(before), _biases(after))

    cur = noisy
    accepted = [c for c in certs if validate_certificate(cur, c)]
    for cert in certs:
        if validate_certificate(cur, cert):
            continue
        res = repair(cur, cert, accepted, strict_alg2=strict)
        if res.certificate is None:
            stats["violations"] += not _same(_biases(res.network), _biases(cur))
            continue
        stats["violations"] += not validate_certificate(res.network, res.certificate)
        stats["violations"] += sum(not validate_certificate(res.network, c) for c in res.accepted)
        stats["violations"] += not _same(_weights(res.network), _weights(cur))
        cur = res.network
        accepted = res.accepted + [res.certificate]
    return stats


def gradient_instance(rng):
    """Random grown net, certificates from its pre-growth form, and in-box samples."""
    net = random_net(rng, input_dim=3, hidden=[4, 3], output_dim=2, scale=0.8)
    certs = []
    for k in range(3):
        x = rng.uniform(-1, 1, 3)
        res = verify(net, Robustness(x, int(predict(net, x)[0]), 0.2), f"r{k}")
        if res.verified:
            certs += res.certificates
        else:
            # any analysed box works as a regularizer target
            boxes = analyze(net, Box(x - 0.2, x + 0.2))
            certs.append(Certificate(f"a{k}", None, IsLabel(0), boxes))
    big = grow(net, [2, 1], 1, 0.3, seed=int(rng.integers(1000)))
    theta0 = big.parameters()
    drifted = big.with_parameters(theta0 + rng.normal(0, 0.3, theta0.size) * ~big.frozen_mask)
    X = np.concatenate([c.boxes[0].lw + rng.uniform(0, 1, (3, 3)) * (c.boxes[0].up - c.boxes[0].lw) for c in certs])
    X = np.concatenate([X, rng.uniform(-1, 1, (3, 3))])
    y = rng.integers(0, 3, len(X))
    return drifted, certs, X, y, theta0, big.old_param_mask
