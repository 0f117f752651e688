"""Certified continual learning for dense ReLU networks.

Certificates are per-layer interval boxes produced by interval analysis.  After
retraining on new data, certificates are re-checked layer by layer, re-verified
when broken, and otherwise repaired by clipping biases.
"""

from .augment import LabeledSample, augment, sample_box
from .clipping import (
    TAU,
    CertStatus,
    ClipOutcome,
    DifferenceConstraint,
    Interpolant,
    clip,
    feasibility,
    interpolate,
    preactivation_bounds,
    rebalance,
    relax,
    repair,
)
from .data import DatasetBundle, load_csv, load_idx, write_idx
from .network import AffineLayer, Network, ReluLayer, build_network, forward, grow, label, predict
from .persist import load_certificates, load_network, save_certificates, save_network
from .scenario import Scenario, run_scenario
from .trainer import GrowSpec, TrainConfig, ccl_retrain, composite_loss
from .verifier import (
    Box,
    Certificate,
    Fairness,
    IsLabel,
    NotLabel,
    Reachability,
    Robustness,
    analyze,
    check_post,
    validate_certificate,
    verify,
)

__all__ = [
    "AffineLayer",
    "Box",
    "CertStatus",
    "Certificate",
    "ClipOutcome",
    "DatasetBundle",
    "DifferenceConstraint",
    "Fairness",
    "GrowSpec",
    "Interpolant",
    "IsLabel",
    "LabeledSample",
    "Network",
    "NotLabel",
    "Reachability",
    "ReluLayer",
    "Robustness",
    "Scenario",
    "TAU",
    "TrainConfig",
    "analyze",
    "augment",
    "build_network",
    "ccl_retrain",
    "check_post",
    "clip",
    "composite_loss",
    "feasibility",
    "forward",
    "grow",
    "interpolate",
    "label",
    "load_certificates",
    "load_csv",
    "load_idx",
    "load_network",
    "preactivation_bounds",
    "predict",
    "rebalance",
    "relax",
    "repair",
    "run_scenario",
    "sample_box",
    "save_certificates",
    "save_network",
    "validate_certificate",
    "verify",
    "write_idx",
]
