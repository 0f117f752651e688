import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccl.clipping import (
    TAU,
    InterpolationError,
    clip,
    feasibility,
    interpolate,
    lift,
    preactivation_bounds,
    rebalance,
    relax,
    repair,
)
from ccl.network import AffineLayer, Network, grow, predict
from ccl.verifier import (
    Box,
    Certificate,
    IsLabel,
    NotLabel,
    analyze,
    check_post,
    validate_certificate,
    verify,
    Robustness,
)

from _oracles import (
    ACAS_LOWER_GAPS,
    ACAS_OUT_LW,
    ACAS_OUT_UP,
    ACAS_UPPER_GAPS,
    MNIST_PHI7_LW,
    MNIST_PHI7_UP,
    gap_fixture,
    random_box,
    random_net,
    vertex_affine_bounds,
)
from _suites import clip_repair_trial


def acas_case():
    net, (lw, up) = gap_fixture(ACAS_OUT_LW, ACAS_OUT_UP, ACAS_LOWER_GAPS, ACAS_UPPER_GAPS)
    in_box = Box(lw, up)
    hidden = analyze(net, in_box)[1:3]
    cert = Certificate("acas3", None, NotLabel(0), [in_box] + hidden + [Box(ACAS_OUT_LW, ACAS_OUT_UP)])
    return net, cert


def test_preactivation_bounds_examples(rng):
    assert preactivation_bounds([0.0, 0.0], 1.5, Box([-1, -1], [1, 1])) == (1.5, 1.5)
    assert preactivation_bounds([1.0], 0.0, Box([-2.0], [3.0])) == (-2.0, 3.0)
    for _ in range(20):
        w = rng.normal(size=4)
        b = float(rng.normal())
        lw, up = random_box(rng, 4, 1.0)
        lo, hi = preactivation_bounds(w, b, Box(lw, up))
        vals = rng.uniform(lw, up, (10_000, 4)) @ w + b
        assert lo <= vals.min() and hi >= vals.max()
        vlo, vhi = vertex_affine_bounds(w, b, lw, up)
        assert abs(lo - vlo) < 1e-9 and abs(hi - vhi) < 1e-9


def test_reference_gap_vectors_are_all_infeasible():
    net, cert = acas_case()
    rows = [r for r in feasibility(net, [cert]) if r.layer == 2]
    assert np.allclose([r.max_lw for r in rows], ACAS_LOWER_GAPS, atol=1e-12)
    assert np.allclose([r.min_up for r in rows], ACAS_UPPER_GAPS, atol=1e-12)
    assert not any(r.feasible for r in rows)
    clipped, outcome = clip(net, [cert])
    assert outcome.status["acas3"].kind == "dropped"
    assert outcome.failed_at["acas3"][0] == 2
    assert np.array_equal(clipped.parameters(), net.parameters())


def test_reference_interpolant_and_relaxation():
    phi13 = Box(ACAS_OUT_LW, ACAS_OUT_UP)
    itp = interpolate(phi13, NotLabel(0))
    (c,) = itp.constraints
    assert (c.winner, c.loser) == (2, 0)
    assert 0.2878 <= c.delta <= 0.2881
    net, cert = acas_case()
    relaxed = relax(cert, itp, 1.0)
    assert relaxed.boxes[-1].up[2] == pytest.approx(4.7724, abs=1e-4)
    assert relaxed.boxes[-1].lw[0] == pytest.approx(-6.6994, abs=1e-4)
    # referenced bounds and the other boxes are unchanged
    assert relaxed.boxes[-1].lw[2] == cert.boxes[-1].lw[2] and relaxed.boxes[-1].up[0] == cert.boxes[-1].up[0]
    assert all(np.array_equal(a.lw, b.lw) for a, b in zip(relaxed.boxes[:-1], cert.boxes[:-1]))
    assert check_post(relaxed.boxes[-1], NotLabel(0))


def test_reference_mnist_interpolant():
    itp = interpolate(Box(MNIST_PHI7_LW, MNIST_PHI7_UP), IsLabel(1))
    (c,) = itp.constraints
    assert (c.winner, c.loser) == (1, 0)
    assert c.delta == pytest.approx(6.0342, abs=1e-9)


def test_reference_repair_succeeds_at_first_relaxation():
    net, cert = acas_case()
    res = repair(net, cert, [], rebalance_outputs=False)
    assert res.status.kind == "relaxed" and res.status.k == 1.0
    assert sorted(n for _, n in res.status.neurons) == [0, 2]
    assert validate_certificate(res.network, res.certificate)
    assert check_post(res.certificate.boxes[-1], NotLabel(0))


def test_single_neuron_midpoint():
    # lw - min = 1, up - max = 3 for w = [1] on [0, 1] with target [1, 4]
    net = Network([AffineLayer([[1.0]], [0.0])], 1)
    cert = Certificate("s", None, IsLabel(0), [Box([0.0], [1.0]), Box([1.0], [4.0])])
    clipped, outcome = clip(net, [cert])
    assert clipped.layers[0].bias[0] == 2.0
    assert outcome.status["s"].kind == "clipped"
    assert validate_certificate(clipped, cert)


def test_valid_certificates_untouched(rng):
    net = random_net(rng)
    certs = []
    for k in range(5):
        x = rng.uniform(-1, 1, net.input_dim)
        certs += verify(net, Robustness(x, int(predict(net, x)[0]), 0.01), f"r{k}").certificates
    assert certs
    clipped, outcome = clip(net, certs)
    assert np.array_equal(clipped.parameters(), net.parameters())
    assert all(outcome.status[c.cert_id].kind == "untouched" for c in certs)
    assert not outcome.bias_deltas
    # strict mode recentres biases; zero-slack exact images may then conflict,
    # but whatever it keeps is valid and the first certificate is always kept
    strict, out2 = clip(net, certs, strict_alg2=True)
    assert out2.surviving[0] == certs[0].cert_id
    assert all(validate_certificate(strict, c) for c in certs if c.cert_id in out2.surviving)


def test_clip_changes_biases_only(rng):
    net = random_net(rng)
    certs = []
    while not certs:
        x = rng.uniform(-1, 1, net.input_dim)
        certs = verify(net, Robustness(x, int(predict(net, x)[0]), 0.01)).certificates
    cert = certs[0]
    noisy = net.copy()
    for i in noisy.affine_indices:
        noisy.layers[i].bias += 0.1
    clipped, _ = clip(noisy, [cert])
    for i in net.affine_indices:
        assert np.array_equal(clipped.layers[i].weights, noisy.layers[i].weights)


def test_interpolate_degenerate_gap():
    box = Box([0.0, 1e-9], [0.0, 1e-9])
    (c,) = interpolate(box, NotLabel(0)).constraints
    assert c.delta == pytest.approx(1e-9) and c.winner == 1
    with pytest.raises(InterpolationError):
        interpolate(Box([0.0, 0.0], [1.0, 1.0]), NotLabel(0))
    with pytest.raises(InterpolationError):
        interpolate(Box([0.0, 0.0], [1.0, 1.0]), IsLabel(1))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 3), st.booleans(), st.floats(0.01, 10))
def test_interpolate_and_relax_invariants(seed, c, is_label, k):
    rng = np.random.default_rng(seed)
    lw = rng.normal(0, 3, 4)
    box = Box(lw, lw + rng.uniform(0, 2, 4))
    post = IsLabel(c) if is_label else NotLabel(c)
    if not check_post(box, post):
        with pytest.raises(InterpolationError):
            interpolate(box, post)
        return
    itp = interpolate(box, post)
    assert itp.holds_on(box)
    assert all(con.delta > 0 and con.winner != con.loser for con in itp.constraints)
    cert = Certificate("h", None, post, [Box([0.0], [1.0]), box])
    relaxed = relax(cert, itp, k)
    out = relaxed.boxes[-1]
    assert check_post(out, post) and itp.holds_on(out)
    assert np.all(out.lw <= box.lw) and np.all(out.up >= box.up)
    widen = k * np.maximum(np.abs(np.concatenate([box.lw, box.up])), TAU)
    assert np.all(box.lw - out.lw <= widen[:4] + 1e-12)
    assert np.all(out.up - box.up <= widen[4:] + 1e-12)


def test_repair_of_valid_certificate_is_untouched(rng):
    net = random_net(rng)
    x = rng.uniform(-1, 1, net.input_dim)
    cert = verify(net, Robustness(x, int(predict(net, x)[0]), 0.01)).certificates[0]
    res = repair(net, cert, [])
    assert res.status.kind == "untouched"
    assert np.array_equal(res.network.parameters(), net.parameters())


def conflicting_case():
    # output = input; the accepted certificate pins out0 - out1 = 2 at one point
    net = Network([AffineLayer(np.eye(2), np.zeros(2))], 2)
    point = Box([2.0, 0.0], [2.0, 0.0])
    accepted = Certificate("keep", None, IsLabel(0), [point, Box([2.0, 0.0], [2.0, 0.0])])
    # the broken certificate wants label 1 on the very same input
    broken = Certificate("lost", None, IsLabel(1), [point, Box([-1.0, 1.0], [-1.0, 1.0])])
    return net, accepted, broken


def test_repair_drops_when_nothing_works():
    net, accepted, broken = conflicting_case()
    assert validate_certificate(net, accepted) and not validate_certificate(net, broken)
    for rebalance_outputs in (False, True):
        res = repair(net, broken, [accepted], rebalance_outputs=rebalance_outputs)
        assert res.status.kind == "dropped" and res.certificate is None
        assert np.array_equal(res.network.parameters(), net.parameters())
    assert rebalance(net, [accepted, Certificate("lost", None, IsLabel(1), analyze(net, broken.boxes[0]))]) is None


def test_rebalance_lowers_competitor_biases():
    net = Network([AffineLayer(np.eye(2), np.zeros(2))], 2)
    # out0 in [0, 1], out1 in [0.5, 0.5]: needs b1 < b0 - 0.5
    cert = Certificate("c", None, IsLabel(0), analyze(net, Box([0.0, 0.5], [1.0, 0.5])))
    assert not check_post(cert.boxes[-1], cert.post)
    fixed_net, (fixed,) = rebalance(net, [cert])
    assert fixed_net.layers[0].bias[0] == 0.0
    assert fixed_net.layers[0].bias[1] < -0.5
    assert validate_certificate(fixed_net, fixed)


def test_lift_after_output_growth(rng):
    net = random_net(rng, output_dim=2)
    x = rng.uniform(-1, 1, net.input_dim)
    cert = verify(net, Robustness(x, int(predict(net, x)[0]), 0.01)).certificates[0]
    big = grow(net, [0] * net.hidden_count, 2, 0.1, seed=1)
    lifted = lift(big, cert)
    assert lifted.widths == big.widths
    # targets for new outputs sit below the winner's lower bound
    c = cert.post.label
    assert np.all(lifted.boxes[-1].up[2:] < lifted.boxes[-1].lw[c]) or check_post(lifted.boxes[-1], cert.post)
    res = repair(big, cert, [])
    assert res.certificate is not None
    assert validate_certificate(res.network, res.certificate)


def test_clip_repair_randomised(rng):
    totals = {"certs": 0, "survived": 0, "dropped": 0, "violations": 0}
    for _ in range(60):
        for k, v in clip_repair_trial(rng).items():
            totals[k] += v
    assert totals["violations"] == 0
    assert totals["survived"] > 0 and totals["dropped"] > 0
