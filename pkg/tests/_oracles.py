"""Independent reference computations used by the tests.

Nothing here calls into the interval code under test: bounds come from vertex
enumeration or sampling, gradients from finite differences.
"""

import itertools

import numpy as np

from ccl.network import AffineLayer, Network, ReluLayer, build_network


def random_net(rng, input_dim=3, hidden=None, output_dim=3, scale=1.0) -> Network:
    if hidden is None:
        hidden = [int(w) for w in rng.integers(2, 9, size=int(rng.integers(2, 4)))]
    layers = []
    prev = input_dim
    for width in list(hidden) + [output_dim]:
        layers.append(AffineLayer(rng.normal(0, scale, (width, prev)), rng.normal(0, 0.3 * scale, width)))
        layers.append(ReluLayer())
        prev = width
    return Network(layers[:-1], input_dim)


def random_box(rng, dim, max_width=0.5):
    lo = rng.uniform(-1, 1, dim)
    return lo, lo + rng.uniform(0, max_width, dim)


def vertex_affine_bounds(w: np.ndarray, b: float, lw: np.ndarray, up: np.ndarray) -> tuple[float, float]:
    """Exact min/max of ``w.x + b`` over a box by enumerating its corners."""
    vals = [float(np.dot(w, np.where(corner, up, lw)) + b) for corner in itertools.product([0, 1], repeat=len(w))]
    return min(vals), max(vals)


def manual_forward(layers, x):
    """Activations at every boundary, computed with plain Python loops."""
    acts = [list(map(float, x))]
    for layer in layers:
        prev = acts[-1]
        if isinstance(layer, AffineLayer):
            acts.append([sum(layer.weights[j][i] * prev[i] for i in range(len(prev))) + layer.bias[j] for j in range(layer.n_out)])
        else:
            acts.append([max(v, 0.0) for v in prev])
    return acts


def central_differences(f, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        dn = theta.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2 * h)
    return g


def grid_points(lw, up, per_axis=5):
    axes = [np.linspace(a, b, per_axis) for a, b in zip(lw, up)]
    return np.array(list(itertools.product(*axes)))


# Output-layer fixture whose bias gaps equal given vectors.
#
# Input box x0 in [0, 1], x1 = 1; an identity hidden layer passes it on; output
# neuron j has weights [s_j, t_j] so that over the box min = t_j and
# max = s_j + t_j (s_j >= 0).  Picking t_j = lw_j - A_j and
# s_j = (up_j - lw_j) + (A_j - B_j) makes lw_j - min = A_j and up_j - max = B_j.
def gap_fixture(out_lw, out_up, lower_gaps, upper_gaps, bias=None):
    out_lw, out_up = np.asarray(out_lw, float), np.asarray(out_up, float)
    A, B = np.asarray(lower_gaps, float), np.asarray(upper_gaps, float)
    s = (out_up - out_lw) + (A - B)
    t = out_lw - A
    assert np.all(s >= 0)
    bias = np.zeros(len(A)) if bias is None else np.asarray(bias, float)
    net = Network([AffineLayer(np.eye(2), np.zeros(2)), ReluLayer(), AffineLayer(np.stack([s, t], axis=1), bias)], 2)
    in_box = (np.array([0.0, 1.0]), np.array([1.0, 1.0]))
    return net, in_box


# Reference output box and clipping gap vectors for an ACAS Xu case (NotLabel(0)).
ACAS_OUT_LW = [-3.3497, -5.6635, 2.0411, 0.4508, 1.1933]
ACAS_OUT_UP = [1.7532, -4.7525, 2.3862, 1.9311, 4.2636]
ACAS_LOWER_GAPS = [-0.1272, 0.6206, 1.3362, 0.6066, 0.9983]
ACAS_UPPER_GAPS = [-1.1367, -2.4329, -0.0455, 0.1117, 0.2636]
# Reference output box for an MNIST case (IsLabel(1)).
MNIST_PHI7_LW = [-3.6951, 2.5819]
MNIST_PHI7_UP = [-3.4523, 2.7624]


def small_mnist_like(rng, n_per_class=40, dim=16, classes=4):
    """Separable Gaussian blobs in [0, 1]^dim, one per class."""
    centers = rng.uniform(0.2, 0.8, (classes, dim))
    xs, ys = [], []
    for c in range(classes):
        xs.append(np.clip(centers[c] + rng.normal(0, 0.05, (n_per_class, dim)), 0, 1))
        ys.append(np.full(n_per_class, c))
    return np.concatenate(xs), np.concatenate(ys)


def trained_pair(seed=0, hidden=(8, 8), dim=16):
    """A small net trained on classes 0/1 of blob data, plus the data."""
    from ccl.trainer import TrainConfig, train_plain

    rng = np.random.default_rng(seed)
    X, y = small_mnist_like(rng, dim=dim)
    net = build_network(dim, list(hidden), 2, seed=seed)
    m = y < 2
    net = train_plain(net, X[m], y[m], TrainConfig(epochs=30, batch_size=8, lr=0.05, seed=seed))
    return net, X, y
