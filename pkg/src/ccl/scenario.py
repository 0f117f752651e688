"""Multi-round continual learning scenarios with persisted artifacts."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .augment import LabeledSample
from .data import DatasetBundle, load_csv, load_idx
from .network import Network, build_network, forward, label
from .persist import save_certificates, save_network
from .trainer import (
    GrowSpec,
    RoundRecord,
    TrainConfig,
    accuracy,
    ccl_retrain,
    per_label_accuracy,
    train_plain,
)
from .verifier import Certificate, Fairness, Robustness, verify

log = logging.getLogger(__name__)

MODES = ("baseline", "baseline+ds", "baseline+od", "ccl", "ccl+od")
# properties tried per requested property before giving up
REDRAW_CAP = 10


class ScenarioError(ValueError):
    pass


@dataclass
class PropertySpec:
    kind: str = "robustness"
    count: int = 25
    epsilon: float = 0.01
    seed: int | None = None
    clamp: tuple | None = None
    # fairness only
    sensitive_index: int = 0
    sensitive_values: list = field(default_factory=list)
    epsilon_other: float = 0.0

    def __post_init__(self):
        if self.kind not in ("robustness", "fairness"):
            raise ScenarioError(f"unsupported property kind {self.kind!r}")
        if self.count < 0 or self.epsilon < 0:
            raise ScenarioError("property count and epsilon must be non-negative")
        if self.clamp is not None:
            self.clamp = tuple(float(v) for v in self.clamp)
        if self.kind == "fairness" and not self.sensitive_values:
            raise ScenarioError("fairness properties need sensitive_values")


@dataclass
class Scenario:
    dataset: dict
    tasks: list
    hidden: list
    properties: PropertySpec = field(default_factory=PropertySpec)
    grow: list = field(default_factory=list)
    train: TrainConfig = field(default_factory=TrainConfig)
    mode: str = "ccl"
    seed: int = 0
    # optional per-label caps for desk-scale runs
    max_train_per_label: int | None = None
    max_test_per_label: int | None = None

    def __post_init__(self):
        self.tasks = [[int(v) for v in group] for group in self.tasks]
        if not self.tasks or any(not g for g in self.tasks):
            raise ScenarioError("tasks must be a non-empty list of non-empty label groups")
        flat = [v for g in self.tasks for v in g]
        if len(set(flat)) != len(flat):
            raise ScenarioError(f"task label groups overlap: {self.tasks}")
        if self.mode not in MODES:
            raise ScenarioError(f"mode must be one of {MODES}, got {self.mode!r}")
        rounds = len(self.tasks) - 1
        if isinstance(self.grow, dict):
            self.grow = [self.grow] * rounds
        if self.grow and len(self.grow) != rounds:
            raise ScenarioError(f"{len(self.grow)} grow specs for {rounds} retraining rounds")
        specs = []
        for r in range(rounds):
            g = self.grow[r] if self.grow else {}
            if isinstance(g, GrowSpec):
                g = {"hidden": g.hidden, "output": g.output}
            hidden = list(g.get("hidden", [0] * len(self.hidden)))
            if len(hidden) != len(self.hidden):
                raise ScenarioError(f"round {r + 1} grows {len(hidden)} hidden layers, network has {len(self.hidden)}")
            out = int(g.get("output", len(self.tasks[r + 1])))
            if out != len(self.tasks[r + 1]):
                raise ScenarioError(
                    f"round {r + 1} adds {out} outputs but task group {self.tasks[r + 1]} has {len(self.tasks[r + 1])} labels"
                )
            specs.append(GrowSpec(hidden, out))
        self.grow = specs

    @property
    def label_map(self) -> dict[int, int]:
        """Dataset label -> output index (task groups concatenated in order)."""
        return {lab: i for i, lab in enumerate(v for g in self.tasks for v in g)}

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown scenario fields: {sorted(unknown)}")
        for key in ("dataset", "tasks", "hidden"):
            if key not in d:
                raise ScenarioError(f"scenario is missing {key!r}")
        if "properties" in d:
            d["properties"] = PropertySpec(**d["properties"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "Scenario":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioError(f"{path}: {exc}") from None
        try:
            scenario = cls.from_dict(d)
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"{path}: {exc}") from None
        # dataset paths are relative to the scenario file
        scenario.dataset = {
            k: str((path.parent / v).resolve()) if k in _PATH_KEYS and not Path(v).is_absolute() else v
            for k, v in scenario.dataset.items()
        }
        return scenario


_PATH_KEYS = ("train_images", "train_labels", "test_images", "test_labels", "train", "test")


def load_dataset(spec: dict) -> DatasetBundle:
    fmt = spec.get("format")
    if fmt == "idx":
        train = load_idx(spec["train_images"], spec["train_labels"])
        if "test_images" in spec:
            return train.with_test(load_idx(spec["test_images"], spec["test_labels"]))
        return train
    if fmt == "csv":
        train = load_csv(spec["train"], spec["label_column"])
        if "test" in spec:
            return train.with_test(load_csv(spec["test"], spec["label_column"]))
        return train
    raise ScenarioError(f"dataset format must be 'idx' or 'csv', got {fmt!r}")


def _cap(y: np.ndarray, labels, cap: int | None) -> np.ndarray:
    """Indices of rows with a label in ``labels``, at most ``cap`` per label, in file order."""
    idx = []
    for lab in labels:
        rows = np.flatnonzero(y == lab)
        idx.append(rows if cap is None else rows[:cap])
    return np.sort(np.concatenate(idx)) if idx else np.zeros(0, dtype=np.int64)


@dataclass
class _Split:
    x: np.ndarray
    y: np.ndarray  # output indices

    def samples(self, origin: str = "new") -> list[LabeledSample]:
        return [LabeledSample(x, int(y), origin) for x, y in zip(self.x, self.y)]

    def __len__(self):
        return len(self.y)


def _split(x, y, labels, cap, label_map) -> _Split:
    idx = _cap(y, labels, cap)
    return _Split(x[idx], np.array([label_map[int(v)] for v in y[idx]], dtype=np.int64))


def _join(parts: list[_Split]) -> _Split:
    parts = [p for p in parts if len(p)]
    if not parts:
        return _Split(np.zeros((0, 0)), np.zeros(0, dtype=np.int64))
    return _Split(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]))


def select_properties(net: Network, test: _Split, spec: PropertySpec, seed: int):
    """Draw properties from ``test`` and keep the first ``spec.count`` that verify.

    Returns ``(certificates, skipped property ids)``; at most
    ``REDRAW_CAP * count`` samples are tried.
    """
    rng = np.random.default_rng(seed if spec.seed is None else spec.seed)
    order = rng.permutation(len(test))[: REDRAW_CAP * spec.count]
    certs: list[Certificate] = []
    skipped: list[str] = []
    kept = 0
    for i in order:
        if kept == spec.count:
            break
        pid = f"{spec.kind[0]}{int(i)}"
        if spec.kind == "robustness":
            prop = Robustness(test.x[i], label(forward(net, test.x[i]).output), spec.epsilon, spec.clamp)
        else:
            prop = Fairness(test.x[i], spec.sensitive_index, spec.sensitive_values, spec.epsilon_other, spec.clamp)
        res = verify(net, prop, pid)
        if res.verified:
            certs.extend(res.certificates)
            kept += 1
        else:
            skipped.append(pid)
    if kept < spec.count:
        log.warning("only %d of %d properties verified after %d draws", kept, spec.count, len(order))
    if skipped:
        log.warning("skipped %d unverifiable properties", len(skipped))
    return certs, skipped


def _mode_config(cfg: TrainConfig, mode: str) -> tuple[TrainConfig, bool, bool]:
    """(training config, use old data, repair certificates) for a mode."""
    if mode == "baseline":
        return replace(cfg, alpha=0.0, beta=0.0, per_cert_samples=0), False, False
    if mode == "baseline+ds":
        return replace(cfg, alpha=0.0, beta=0.0), False, False
    if mode == "baseline+od":
        return replace(cfg, alpha=0.0, beta=0.0, per_cert_samples=0), True, False
    return cfg, mode == "ccl+od", True


def _score(record: RoundRecord, net: Network, seen: _Split, old: _Split, names: list[str]):
    record.accuracy = accuracy(net, seen.x, seen.y) if len(seen) else None
    per = per_label_accuracy(net, seen.x, seen.y) if len(seen) else {}
    record.per_label_accuracy = {names[k]: v for k, v in per.items()}
    record.old_task_accuracy = accuracy(net, old.x, old.y) if len(old) else None


def render_table(records: list[RoundRecord]) -> str:
    lines = [f"{'round':>5}  {'mode':<12} {'Cert.':>6}  {'Acc. (%)':>8}  {'Old acc. (%)':>12}"]
    for r in records:
        acc = "-" if r.accuracy is None else f"{100 * r.accuracy:.1f}"
        old = "-" if r.old_task_accuracy is None else f"{100 * r.old_task_accuracy:.1f}"
        lines.append(f"{r.round:>5}  {r.mode:<12} {len(r.surviving):>6}  {acc:>8}  {old:>12}")
    return "\n".join(lines) + "\n"


@dataclass
class ScenarioResult:
    records: list[RoundRecord]
    network: Network
    certificates: list[Certificate]


def run_scenario(scenario: Scenario, out_dir, data: DatasetBundle | None = None) -> ScenarioResult:
    """Train on the first task group, certify, then retrain on each later group.

    Writes ``round_<r>/model.json`` and ``round_<r>/certs.json`` after every
    round, one JSON record per round to ``report.jsonl`` and a table to
    ``report.txt``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = data if data is not None else load_dataset(scenario.dataset)
    lmap = scenario.label_map
    missing = set(lmap) - set(np.unique(data.train_y).tolist())
    if missing:
        raise ScenarioError(f"labels {sorted(missing)} have no training rows")
    names = [data.label_names[lab] if lab < len(data.label_names) else str(lab) for lab in lmap]
    cfg = replace(scenario.train, seed=scenario.seed)

    def split(x, y, group, cap):
        return _split(x, y, group, cap, lmap)

    trains = [split(data.train_x, data.train_y, g, scenario.max_train_per_label) for g in scenario.tasks]
    tests = [split(data.test_x, data.test_y, g, scenario.max_test_per_label) for g in scenario.tasks]

    report = out / "report.jsonl"
    report.write_text("")
    records: list[RoundRecord] = []

    def emit(record: RoundRecord, net: Network, certs: list[Certificate]):
        rdir = out / f"round_{record.round}"
        rdir.mkdir(exist_ok=True)
        save_network(net, rdir / "model.json")
        save_certificates(certs, rdir / "certs.json")
        with report.open("a") as f:
            f.write(json.dumps(record.to_dict()) + "\n")
        records.append(record)
        (out / "report.txt").write_text(render_table(records))

    start = time.perf_counter()
    net = build_network(data.input_dim, scenario.hidden, len(scenario.tasks[0]), scenario.seed)
    val0 = (tests[0].x, tests[0].y) if len(tests[0]) else None
    net = train_plain(net, trains[0].x, trains[0].y, cfg, val0)
    certs, skipped = select_properties(net, tests[0], scenario.properties, scenario.seed)
    record = RoundRecord(0, scenario.mode, initial=[c.cert_id for c in certs], surviving=[c.cert_id for c in certs])
    record.skipped = skipped
    record.n_train = len(trains[0])
    _score(record, net, tests[0], _join([]), names)
    record.wall_time = time.perf_counter() - start
    emit(record, net, certs)

    for r in range(1, len(scenario.tasks)):
        rcfg, use_old, repair_certs = _mode_config(cfg, scenario.mode)
        old = _join(trains[:r]).samples("old") if use_old else None
        val = (tests[r].x, tests[r].y) if len(tests[r]) else None
        res = ccl_retrain(
            net,
            certs,
            trains[r].samples(),
            rcfg,
            old_data=old,
            grow_spec=scenario.grow[r - 1],
            val_data=val,
            repair_certs=repair_certs,
            round_index=r,
            mode=scenario.mode,
        )
        net, certs = res.network, res.certificates
        record = res.report.records[0]
        _score(record, net, _join(tests[: r + 1]), _join(tests[:r]), names)
        emit(record, net, certs)

    return ScenarioResult(records, net, certs)
