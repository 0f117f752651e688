"""Certificate-based data augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .network import Network, ShapeError, predict
from .verifier import Box, Certificate, IsLabel

NEW_TASK = "new"
OLD_TASK = "old"


@dataclass
class LabeledSample:
    input: np.ndarray
    label: int
    # NEW_TASK, OLD_TASK, or the id of the certificate a sample was drawn from
    origin: str = NEW_TASK


def sample_box(box: Box, n: int, seed: int | Sequence[int]) -> np.ndarray:
    """``n`` points drawn uniformly from ``box``, as an ``(n, width)`` array."""
    if n < 0:
        raise ValueError("sample count must be non-negative")
    rng = np.random.default_rng(seed)
    u = rng.random((n, box.width))
    pts = box.lw + u * (box.up - box.lw)
    # keep rounding from leaving the box
    return np.clip(pts, box.lw, box.up)


def augment(old_net: Network, certs: Sequence[Certificate], per_cert: int, seed: int) -> list[LabeledSample]:
    """Sample each certificate's input box and label the points with ``old_net``."""
    if per_cert < 0:
        raise ValueError("per_cert must be non-negative")
    out: list[LabeledSample] = []
    for idx, cert in enumerate(certs):
        box = cert.boxes[0]
        if box.width != old_net.input_dim:
            raise ShapeError(f"certificate {cert.cert_id} input width {box.width} != {old_net.input_dim}")
        if per_cert == 0:
            continue
        xs = sample_box(box, per_cert, [seed, idx])
        labels = predict(old_net, xs)
        if isinstance(cert.post, IsLabel) and np.any(labels != cert.post.label):
            raise AssertionError(
                f"certificate {cert.cert_id} claims label {cert.post.label} on its input box "
                f"but the network predicts {sorted(set(labels.tolist()))}"
            )
        out.extend(LabeledSample(x, int(y), cert.cert_id) for x, y in zip(xs, labels))
    return out


def as_arrays(samples: Sequence[LabeledSample], input_dim: int) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        return np.zeros((0, input_dim)), np.zeros(0, dtype=np.int64)
    X = np.stack([s.input for s in samples]).astype(np.float64)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return X, y
