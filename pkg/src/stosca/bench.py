"""Optimizer comparison runs: config, sweep execution, summaries."""

from __future__ import annotations

import csv
import json
import logging
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .baselines import make_optimizer
from .metrics import summarize
from .nn_core import MlpModel, Topology, glorot_init
from .objective import L1, L2, ElasticNet, GroupSparse, LossKind
from .records import RunRecord
from .sca_engine import ScaConfig, Schedule, TrainingDiverged, train, train_baseline

log = logging.getLogger(__name__)

# Adam constants from its original publication; written into the config echo.
ADAM_DEFAULTS = {"lr": 0.001, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}

DEFAULT_OPTIMIZERS = [
    {"name": "sca", "kind": "sca", "params": {"alpha0": 0.5, "eps_alpha": 0.01, "rho0": 0.9, "eps_rho": 0.01, "tau": 0.05}},
    {"name": "sgd", "kind": "sgd", "params": {"alpha0": 0.1, "eps": 0.01}},
    {"name": "adagrad", "kind": "adagrad", "params": {"lr": 0.01}},
    {"name": "rmsprop", "kind": "rmsprop", "params": {"lr": 0.01, "gamma": 0.9}},
    {"name": "adam", "kind": "adam", "params": dict(ADAM_DEFAULTS)},
]


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"name": "synth_regression", "n": 2000, "d": 10, "noise": 0.0, "seed": 0})
    topology: str = "10/15/5/1"
    loss: str = "squared"
    regularizer: dict = field(default_factory=lambda: {"kind": "l2", "lam": 1e-3})
    optimizers: list = field(default_factory=lambda: [dict(o) for o in DEFAULT_OPTIMIZERS])
    iterations: int = 500
    repetitions: int = 20
    batch_size: int = 20
    blocks: int = 1
    block_policy: str = "static"
    workers: int = 1
    seed: int = 0
    test_fraction: float = 0.25
    log_every: int = 1
    output_dir: str = "runs"

    def __post_init__(self):
        if not self.optimizers:
            raise ValueError("at least one optimizer is required")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        names = [o["name"] for o in self.optimizers]
        if len(set(names)) != len(names):
            raise ValueError("optimizer names must be unique")

    @property
    def seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.repetitions)]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path, overrides=()) -> "ExperimentConfig":
        d = json.loads(Path(path).read_text()) if path else {}
        base = asdict(cls())
        base.update(d)
        for item in overrides:
            apply_override(base, item)
        return cls.from_dict(base)

    def to_dict(self) -> dict:
        return asdict(self)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(d: dict, item: str):
    """Apply ``a.b.c=value`` to a nested dict; list items are addressed by
    index or, for ``optimizers``, by name."""
    if "=" not in item:
        raise ValueError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    node = d
    for p in parts[:-1]:
        if isinstance(node, list):
            node = _list_item(node, p)
        else:
            node = node.setdefault(p, {})
    last = parts[-1]
    if isinstance(node, list):
        raise ValueError(f"cannot assign to list element {key!r}")
    node[last] = _parse_value(value)


def _list_item(seq, key):
    if key.isdigit():
        return seq[int(key)]
    for item in seq:
        if isinstance(item, dict) and item.get("name") == key:
            return item
    raise KeyError(f"no list entry named {key!r}")


def make_regularizer(spec: dict, topology: Topology):
    kind = spec.get("kind", "l2").lower()
    lam = float(spec.get("lam", 1e-3))
    if kind == "l2":
        return L2(lam)
    if kind == "l1":
        return L1(lam)
    if kind in ("elastic_net", "elasticnet"):
        return ElasticNet(lam, float(spec.get("mix", 0.5)))
    if kind in ("group", "group_sparse"):
        return GroupSparse(lam, tuple(topology.neuron_groups()), n_params=topology.n_params)
    raise ValueError(f"unknown regularizer kind {kind!r}")


def load_dataset(spec: dict) -> data_mod.Dataset:
    name = spec.get("name", "synth_regression")
    if name == "synth_regression":
        return data_mod.synth_regression(int(spec.get("n", 2000)), int(spec.get("d", 10)), float(spec.get("noise", 0.0)), int(spec.get("seed", 0)))
    if name == "synth_classification":
        return data_mod.synth_classification(int(spec.get("n", 50000)), int(spec.get("d", 18)), int(spec.get("seed", 0)))
    if name.lower() in data_mod.KNOWN_DATASETS:
        return data_mod.load_known(name, spec.get("data_dir", "data"))
    if "path" in spec:
        table = data_mod.load_csv(spec["path"], spec.get("delimiter", ","), spec.get("header", True))
        return data_mod.prepare(table, spec["target"], spec.get("task", "regression"), tuple(spec.get("drop", ())), name)
    raise ValueError(f"unknown dataset {name!r}")


def _sca_config(cfg: ExperimentConfig, reg, seed: int, params: dict) -> ScaConfig:
    p = dict(params)
    schedule = Schedule.quadratic(p.pop("alpha0", 0.5), p.pop("eps_alpha", 0.01), p.pop("rho0", 0.9), p.pop("eps_rho", 0.01))
    return ScaConfig(
        batch_size=cfg.batch_size,
        loss=LossKind.parse(cfg.loss),
        reg=reg,
        schedule=schedule,
        tau=p.pop("tau", 0.05),
        max_iters=cfg.iterations,
        rng_seed=seed,
        blocks=p.pop("blocks", cfg.blocks),
        block_policy=p.pop("block_policy", cfg.block_policy),
        workers=p.pop("workers", cfg.workers),
        log_every=cfg.log_every,
        d0=p.pop("d0", "zero"),
    )


def run_single(cfg: ExperimentConfig, opt: dict, dataset, seed: int, reg=None) -> RunRecord:
    """One (optimizer, seed) run: fresh split and init from ``seed``."""
    topology = Topology.parse(cfg.topology)
    if reg is None:
        reg = make_regularizer(cfg.regularizer, topology)
    train_set, test_set = data_mod.split(dataset, data_mod.SplitSpec(cfg.test_fraction, seed))
    loss = LossKind.parse(cfg.loss)
    model = MlpModel(topology, glorot_init(topology, seed), head=loss.head)
    sca_cfg = _sca_config(cfg, reg, seed, opt.get("params", {}) if opt["kind"] == "sca" else {})
    if opt["kind"] == "sca":
        _, rec = train(model, train_set, sca_cfg, test=test_set)
    else:
        optimizer = make_optimizer(opt["kind"], **opt.get("params", {}))
        _, rec = train_baseline(model, train_set, optimizer, sca_cfg, name=opt["name"], test=test_set)
    rec.optimizer = opt["name"]
    return rec


def run_experiment(cfg: ExperimentConfig, write: bool = True):
    """Run every optimizer on every seed.  Failures are recorded, not raised.

    Returns ``(records, failures)``.
    """
    dataset = load_dataset(cfg.dataset)
    topology = Topology.parse(cfg.topology)
    if topology.input_dim != dataset.n_features:
        raise ValueError(f"topology expects {topology.input_dim} inputs, dataset has {dataset.n_features}")
    out = Path(cfg.output_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        echo = cfg.to_dict()
        echo["adam_published_defaults"] = ADAM_DEFAULTS
        (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True))
    reg = make_regularizer(cfg.regularizer, topology)
    records, failures = [], []
    for seed in cfg.seeds:
        for opt in cfg.optimizers:
            try:
                rec = run_single(cfg, opt, dataset, seed, reg)
            except TrainingDiverged as exc:
                rec = exc.record
                rec.optimizer = opt["name"]
                failures.append({"optimizer": opt["name"], "seed": seed, "error": str(exc)})
            except Exception as exc:  # keep the sweep going
                log.error("run %s/seed %d failed: %s", opt["name"], seed, exc)
                rec = RunRecord(opt["name"], seed, status="failed", error=f"{type(exc).__name__}: {exc}")
                failures.append({"optimizer": opt["name"], "seed": seed, "error": rec.error, "traceback": traceback.format_exc()})
            if write:
                rec.write(out / "records")
            records.append(rec)
    if write:
        (out / "failures.json").write_text(json.dumps(failures, indent=2))
        write_summary(records, out)
    return records, failures


def read_records(directory) -> list[RunRecord]:
    directory = Path(directory)
    if (directory / "records").is_dir():
        directory = directory / "records"
    return [RunRecord.read(p) for p in sorted(directory.glob("*.csv"))]


def write_summary(records, out_dir) -> Path:
    """``summary.csv`` (mean +- std per optimizer) and ``band_<opt>.csv``
    (per-iteration mean and std of the objective)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table, bands = summarize(records)
    path = out_dir / "summary.csv"
    cols = ["optimizer", "runs", "metric", "mean", "std", "final_objective_mean", "final_objective_std"]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in table:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    for name, (iters, mean, std) in bands.items():
        with (out_dir / f"band_{name}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "mean", "std"])
            for row in zip(iters, mean, std):
                w.writerow([int(row[0]), repr(float(row[1])), repr(float(row[2]))])
    return path


def random_ridge_instance(Q: int, rank: int | None = None, lam: float = 1e-3, seed: int = 0, dense: bool = True):
    """Random ridge surrogate used for timing block-parallel solves."""
    from .surrogate import RidgeSurrogate

    rng = np.random.default_rng(seed)
    m = rank or Q
    H = rng.standard_normal((m, Q)) / np.sqrt(m)
    b = rng.standard_normal(Q)
    w_n = rng.standard_normal(Q)
    if dense:
        return RidgeSurrogate(b, lam, 0.0, w_n, dense=H.T @ H)
    return RidgeSurrogate(b, lam, 0.0, w_n, factor=H)
