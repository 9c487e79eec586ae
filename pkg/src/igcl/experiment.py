"""Experiment harness: splits, training regimes, accuracy matrices, reports.

A regime fixes which annotations are visible (every station or a single
one) and whether the information graph carries system-context edges.  Each
regime is trained ``repeats`` times with different seeds and always scored
on the same all-station test set.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .estimators import UNLABELED, CrossEntropyClassifier, InfoGraphClassifier
from .exceptions import ConfigurationError, TrainingError
from .features import SpectrogramFeaturizer
from .siggen import (
    Event,
    RawStream,
    SegmenterConfig,
    SynthConfig,
    segment_streams,
    station_name,
    synth_dataset,
)
from .train import accuracy

log = logging.getLogger(__name__)

REGIMES = ("all", "all_sc", "one_station", "one_station_sc")
METHODS = ("xe", "ig_link", "ig_anchor")
DEFAULT_GRID = (
    ("xe", "all"),
    ("xe", "one_station"),
    ("ig_link", "all"),
    ("ig_link", "all_sc"),
    ("ig_link", "one_station"),
    ("ig_link", "one_station_sc"),
    ("ig_anchor", "all"),
    ("ig_anchor", "all_sc"),
    ("ig_anchor", "one_station"),
    ("ig_anchor", "one_station_sc"),
)


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.3
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("test_fraction", "val_fraction"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigurationError(f"{name} must lie in (0, 1), got {v}")


@dataclass(frozen=True)
class RegimeSpec:
    """``station=None`` in a one-station regime sweeps every station."""

    regime: str
    method: str
    station: int | None = None
    repeats: int = 5

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigurationError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method == "xe" and self.regime.endswith("_sc"):
            raise ConfigurationError("xe does not use the information graph; pick a regime without _sc")
        if self.station is not None and not self.one_station:
            raise ConfigurationError("station is only meaningful for one-station regimes")
        if self.repeats < 1:
            raise ConfigurationError("repeats must be >= 1")

    @property
    def one_station(self) -> bool:
        return self.regime.startswith("one_station")

    @property
    def system_context(self) -> bool:
        return self.regime.endswith("_sc")

    @property
    def name(self) -> str:
        return f"{self.method}_{self.regime}"


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    pretrain_segments: SegmenterConfig = field(default_factory=lambda: SegmenterConfig(30.0, 30.0))
    eval_segments: SegmenterConfig = field(default_factory=lambda: SegmenterConfig(30.0, 15.0))
    features: dict = field(default_factory=lambda: {"win_s": 2.56, "hop_s": 0.08, "freq_bins": None, "time_bins": None})
    split: SplitSpec = field(default_factory=SplitSpec)
    model: dict = field(default_factory=lambda: {"hidden": [512, 512], "head_hidden": 512, "embed_dim": 128})
    train: dict = field(default_factory=lambda: {
        "epochs": 60, "finetune_epochs": 20, "xe_epochs": 60, "n_edges": 64, "batch_size": 128, "tau": 0.1,
        "unlabeled_ratio": 4.5, "lr": 0.05, "lr_min": 0.0, "momentum": 0.9, "weight_decay": 1e-4,
        "max_grad_norm": None,
    })
    repeats: int = 5
    seed: int = 0
    n_jobs: int = 1

    def to_dict(self) -> dict:
        return {
            "synth": self.synth.to_dict(),
            "pretrain_segments": dataclasses.asdict(self.pretrain_segments),
            "eval_segments": dataclasses.asdict(self.eval_segments),
            "features": dict(self.features),
            "split": dataclasses.asdict(self.split),
            "model": dict(self.model),
            "train": dict(self.train),
            "repeats": self.repeats,
            "seed": self.seed,
            "n_jobs": self.n_jobs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        base = cls()
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(
            synth=SynthConfig.from_dict(d["synth"]) if "synth" in d else base.synth,
            pretrain_segments=SegmenterConfig(**d["pretrain_segments"]) if "pretrain_segments" in d else base.pretrain_segments,
            eval_segments=SegmenterConfig(**d["eval_segments"]) if "eval_segments" in d else base.eval_segments,
            features={**base.features, **d.get("features", {})},
            split=SplitSpec(**d["split"]) if "split" in d else base.split,
            model={**base.model, **d.get("model", {})},
            train={**base.train, **d.get("train", {})},
            repeats=int(d.get("repeats", base.repeats)),
            seed=int(d.get("seed", base.seed)),
            n_jobs=int(d.get("n_jobs", base.n_jobs)),
        )


def load_config(path: str | Path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


def reference_benchmark(seed: int = 0) -> ExperimentConfig:
    """Desk-scale benchmark: 4 stations x 3 channels, 3 classes, strongly
    diverging stations, 3 repeats.

    The small model needs stronger weight decay than the default, and the
    contrastive gradient is clipped: second-order pair weights grow with the
    number of labeled segments in a batch, which destabilizes plain SGD once
    every station is annotated.
    """
    return ExperimentConfig(
        synth=SynthConfig(n_stations=4, n_channels=3, n_classes=3, events_per_class=48, event_duration=(16.0, 30.0),
                          slot_s=40.0, divergence=1.0, seed=seed),
        features={"win_s": 2.56, "hop_s": 0.08, "freq_bins": 16, "time_bins": 12},
        model={"hidden": [64, 64], "head_hidden": 64, "embed_dim": 32},
        train={"epochs": 30, "finetune_epochs": 5, "xe_epochs": 30, "n_edges": 64, "batch_size": 128, "tau": 0.1,
               "unlabeled_ratio": 4.5, "lr": 0.05, "lr_min": 0.0, "momentum": 0.9, "weight_decay": 5e-3,
               "max_grad_norm": 1.0},
        repeats=3,
        seed=seed,
    )


# --------------------------------------------------------------------------
# splits and data preparation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    train: frozenset
    val: frozenset
    test: frozenset

    def part_of(self, event: int) -> str:
        for name in ("train", "val", "test"):
            if event in getattr(self, name):
                return name
        raise KeyError(event)


def _events(dataset) -> list[Event]:
    if dataset and isinstance(dataset[0], RawStream):
        return dataset[0].event_log
    return list(dataset)


def split_dataset(dataset, spec: SplitSpec = SplitSpec()) -> DatasetSplit:
    """Event-level train/validation/test split, stratified by class.

    ``dataset`` is a list of streams (their shared event log is split) or a
    list of events.  Partitions hold event indices.
    """
    events = _events(dataset)
    if len(events) < 10:
        raise ConfigurationError(f"need at least 10 events to split, got {len(events)}")
    rng = np.random.default_rng([spec.seed, 5001])
    train, val, test = set(), set(), set()
    labels = np.array([e.label for e in events])
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c)).tolist()
        n_test = int(round(spec.test_fraction * len(idx)))
        n_val = int(round(spec.val_fraction * (len(idx) - n_test)))
        test.update(idx[:n_test])
        val.update(idx[n_test : n_test + n_val])
        train.update(idx[n_test + n_val :])
    return DatasetSplit(frozenset(train), frozenset(val), frozenset(test))


def partition_segments(segments, events: Sequence[Event], split: DatasetSplit) -> dict[str, list]:
    """Put each segment into its owner event's partition.

    Segments that also overlap an event from another partition are dropped,
    so no event leaks across partitions.
    """
    out = {"train": [], "val": [], "test": []}
    starts = np.array([e.start for e in events])
    ends = np.array([e.end for e in events])
    part = np.array([split.part_of(k) for k in range(len(events))])
    for s in segments:
        if s.owner is None:
            continue
        home = part[s.owner]
        touching = (starts < s.t_end) & (ends > s.t_start)
        if np.any(part[touching] != home):
            continue
        out[home].append(s)
    return out


@dataclass
class Partition:
    X: np.ndarray
    y: np.ndarray
    station: np.ndarray
    channel: np.ndarray
    interval: np.ndarray
    seg_ids: np.ndarray

    def __len__(self):
        return len(self.y)

    def subset(self, mask) -> "Partition":
        return Partition(self.X[mask], self.y[mask], self.station[mask], self.channel[mask], self.interval[mask],
                         self.seg_ids[mask])

    def digest(self) -> str:
        m = hashlib.sha256()
        for a in (self.X, self.y, self.station, self.channel, self.interval):
            m.update(np.ascontiguousarray(a).tobytes())
        return m.hexdigest()


@dataclass
class PreparedData:
    pretrain: Partition
    finetune: Partition
    val: Partition
    test: Partition
    n_stations: int
    n_classes: int
    split: DatasetSplit


def _partition(segments, featurizer) -> Partition:
    if not segments:
        raise ConfigurationError("a data partition is empty")
    X = featurizer.fit(np.stack([s.samples for s in segments[:1]])).transform(np.stack([s.samples for s in segments]))
    return Partition(
        X=X,
        y=np.array([s.label for s in segments], dtype=int),
        station=np.array([s.stream.station for s in segments], dtype=int),
        channel=np.array([s.stream.channel for s in segments], dtype=int),
        interval=np.array([(s.t_start, s.t_end) for s in segments], dtype=float),
        seg_ids=np.array([s.seg_id for s in segments], dtype=int),
    )


def prepare_data(streams: Sequence[RawStream], cfg: ExperimentConfig) -> PreparedData:
    """Split events, segment every stream twice (pretraining windows and
    evaluation windows) and featurize all partitions."""
    events = streams[0].event_log
    split = split_dataset(streams, cfg.split)
    featurizer = SpectrogramFeaturizer(sample_rate=streams[0].sample_rate, **cfg.features)
    pre = partition_segments(segment_streams(streams, cfg.pretrain_segments), events, split)
    ev = partition_segments(segment_streams(streams, cfg.eval_segments, id_start=10**7), events, split)
    return PreparedData(
        pretrain=_partition(pre["train"], featurizer),
        finetune=_partition(ev["train"], featurizer),
        val=_partition(ev["val"], featurizer),
        test=_partition(ev["test"], featurizer),
        n_stations=1 + max(s.id.station for s in streams),
        n_classes=streams[0].n_classes,
        split=split,
    )


# --------------------------------------------------------------------------
# regimes
# --------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    regime: str
    method: str
    rows: list[str]
    columns: list[str]
    accuracies: list[list[float]]
    matrix: list[list[float]]
    confusion: list[list[int]]
    mean: float
    std: float
    selected_epochs: list[list[int]] = field(default_factory=list)
    test_hash: str = ""
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(**d)


def repeat_seed(base: int, repeat: int) -> int:
    return int(np.random.SeedSequence([base, repeat]).generate_state(1)[0])


def make_estimator(method: str, regime: str, cfg: ExperimentConfig, seed: int):
    t, m = cfg.train, cfg.model
    common = dict(hidden=tuple(m["hidden"]), head_hidden=m["head_hidden"], embed_dim=m["embed_dim"],
                  batch_size=t["batch_size"], lr=t["lr"], lr_min=t["lr_min"], momentum=t["momentum"],
                  weight_decay=t["weight_decay"], max_grad_norm=t.get("max_grad_norm"),
                  random_state=seed)
    if method == "xe":
        return CrossEntropyClassifier(epochs=t["xe_epochs"], selection="validation", **common)
    return InfoGraphClassifier(
        strategy=method.split("_", 1)[1], use_system_context=regime.endswith("_sc"), tau=t["tau"],
        n_edges=t["n_edges"], unlabeled_ratio=t["unlabeled_ratio"], epochs=t["epochs"],
        finetune_epochs=t["finetune_epochs"], selection="last" if regime == "one_station_sc" else "validation",
        **common)


def fit_and_predict(method: str, regime: str, stations: Sequence[int], data: PreparedData, cfg: ExperimentConfig,
                    seed: int, estimator=None) -> tuple[np.ndarray, int]:
    """Train with annotations restricted to ``stations``; predict the test set.

    Training failures are re-raised as :class:`TrainingError` naming the
    method, regime, stations and seed.
    """
    try:
        return _fit_and_predict(method, regime, stations, data, cfg, seed, estimator)
    except ConfigurationError:
        raise
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        raise TrainingError(f"{method}/{regime} stations={list(stations)} seed={seed}: "
                            f"{type(exc).__name__}: {exc}") from exc


def _fit_and_predict(method, regime, stations, data, cfg, seed, estimator):
    est = estimator if estimator is not None else make_estimator(method, regime, cfg, seed)
    ft_mask = np.isin(data.finetune.station, stations)
    val_mask = np.isin(data.val.station, stations)
    validation = (data.val.X[val_mask], data.val.y[val_mask]) if val_mask.any() else None
    if method == "xe":
        y = np.where(ft_mask, data.finetune.y, UNLABELED)
        est.fit(data.finetune.X, y, validation=validation)
    else:
        pre = data.pretrain
        y = np.where(np.isin(pre.station, stations), pre.y, UNLABELED)
        est.fit(pre.X, y, stream=np.column_stack([pre.station, pre.channel]), interval=pre.interval,
                finetune=(data.finetune.X[ft_mask], data.finetune.y[ft_mask]), validation=validation)
    return est.predict(data.test.X), getattr(est, "selected_epoch_", 0)


def _task(args):
    method, regime, stations, seed = args
    return fit_and_predict(method, regime, stations, _WORKER_DATA["data"], _WORKER_DATA["cfg"], seed)


_WORKER_DATA: dict = {}


def _init_worker(data, cfg):
    _WORKER_DATA["data"] = data
    _WORKER_DATA["cfg"] = cfg


def run_regime(spec: RegimeSpec, data: PreparedData, cfg: ExperimentConfig, estimator_factory=None) -> ExperimentReport:
    """Train every (row, repeat) of a regime and score on the full test set.

    Rows are single stations for one-station regimes (one row when
    ``spec.station`` is set, every station otherwise) and a single ``all``
    row for the other regimes.  ``estimator_factory(method, regime, seed)``
    replaces the default estimators, e.g. with a stub.
    """
    stations_all = list(range(data.n_stations))
    if spec.one_station:
        row_sets = [[spec.station]] if spec.station is not None else [[k] for k in stations_all]
        rows = [station_name(r[0]) for r in row_sets]
    else:
        row_sets, rows = [stations_all], ["all"]
    seeds = [repeat_seed(cfg.seed, r) for r in range(spec.repeats)]
    tasks = [(spec.method, spec.regime, rs, sd) for rs in row_sets for sd in seeds]

    if estimator_factory is not None:
        results = [fit_and_predict(m, rg, rs, data, cfg, sd, estimator_factory(m, rg, sd)) for m, rg, rs, sd in tasks]
    elif cfg.n_jobs > 1:
        with ProcessPoolExecutor(cfg.n_jobs, initializer=_init_worker, initargs=(data, cfg)) as pool:
            results = list(pool.map(_task, tasks))
    else:
        results = [fit_and_predict(m, rg, rs, data, cfg, sd) for m, rg, rs, sd in tasks]
    return _aggregate(spec, data, cfg, rows, seeds, results)


def _aggregate(spec, data, cfg, rows, seeds, results) -> ExperimentReport:
    test = data.test
    n_c = data.n_classes
    columns = [station_name(k) for k in range(data.n_stations)]
    accs, matrix, epochs = [], [], []
    confusion = np.zeros((n_c, n_c), dtype=int)
    it = iter(results)
    for _ in rows:
        row_accs, row_epochs, cells = [], [], []
        for _ in seeds:
            pred, epoch = next(it)
            row_accs.append(accuracy(pred, test.y))
            row_epochs.append(int(epoch))
            cells.append([accuracy(pred[test.station == k], test.y[test.station == k]) for k in range(data.n_stations)])
            np.add.at(confusion, (test.y, pred), 1)
        accs.append(row_accs)
        epochs.append(row_epochs)
        matrix.append(np.mean(cells, axis=0).tolist())
    flat = np.array(accs).ravel()
    return ExperimentReport(
        regime=spec.regime,
        method=spec.method,
        rows=rows,
        columns=columns,
        accuracies=accs,
        matrix=matrix,
        confusion=confusion.tolist(),
        mean=float(flat.mean()),
        std=float(flat.std()),
        selected_epochs=epochs,
        test_hash=test.digest(),
        metadata={
            # normalized through JSON so a loaded report compares equal
            "config": json.loads(json.dumps(cfg.to_dict())),
            "seeds": seeds,
            "package_version": __version__,
            "commit": "unknown",
            "created_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        },
    )


def run_sweep(cfg: ExperimentConfig, data: PreparedData | None = None, grid=DEFAULT_GRID) -> dict[str, ExperimentReport]:
    """All regimes of ``grid`` (pairs of method, regime) on one dataset."""
    if data is None:
        data = prepare_data(synth_dataset(cfg.synth), cfg)
    reports = {}
    for method, regime in grid:
        spec = RegimeSpec(regime, method, repeats=cfg.repeats)
        log.info("running %s", spec.name)
        reports[spec.name] = run_regime(spec, data, cfg)
    hashes = {r.test_hash for r in reports.values()}
    if len(hashes) > 1:
        raise RuntimeError("regimes of one sweep were scored on different test sets")
    return reports


def summary_table(reports: dict[str, ExperimentReport]) -> dict:
    """Method x regime table of mean and std accuracy."""
    table: dict[str, dict] = {}
    for r in reports.values():
        table.setdefault(r.method, {})[r.regime] = {"mean": r.mean, "std": r.std}
    return table


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def export_report(report: ExperimentReport, path: str | Path) -> Path:
    """Write ``report.json`` and ``matrix.csv`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    with (path / "matrix.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["train\\test"] + report.columns)
        for name, row in zip(report.rows, report.matrix):
            w.writerow([name] + [repr(float(v)) for v in row])
    return path


def load_report(path: str | Path) -> ExperimentReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return ExperimentReport.from_dict(json.loads(path.read_text()))


def export_sweep(reports: dict[str, ExperimentReport], path: str | Path) -> Path:
    path = Path(path)
    for name, r in reports.items():
        export_report(r, path / name)
    (path / "summary.json").write_text(json.dumps(summary_table(reports), indent=2))
    return path
