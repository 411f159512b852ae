"""Training loop, the repeated-split evaluation protocol, grid search and reports."""

from __future__ import annotations

import csv
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .dataset import SUBSETS, Corpus, SplitSpec, kfold, split_80_20
from .encoding import FORMULATIONS, ChannelStats, channel_stats, normalize
from .models import DEFAULT_EPOCHS, ModelSpec, build_model
from .nn.layers import SoftmaxCrossEntropy
from .nn.optim import Adam, LinearSchedule, lr_at

DEFAULT_GRID = {
    "weight_decay": (0.0, 5e-6, 5e-5),
    "lr": (1e-5, 1e-4, 1e-3),
    "scheduler": (True, False),
}
DROPOUT_SWEEP = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9)
EVAL_BATCH = 256


class EmptyGrid(ValueError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    lr: float = 1e-3
    weight_decay: float = 0.0
    scheduler: bool = True
    dropout: float = 0.0
    epochs: int = 45
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if not 0.0 <= self.dropout <= 0.9:
            raise ValueError("dropout must lie in [0, 0.9]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be at least 1")


def default_epochs(spec: ModelSpec) -> int:
    return DEFAULT_EPOCHS[spec.image_arch]


def default_hyperparams(spec: ModelSpec, seed: int = 0) -> Hyperparams:
    """The tuned settings: residual nets at 1e-3 with the scheduler, LeNet-5 at 1e-4 without."""
    arch = spec.image_arch
    if arch == "lenet5":
        hp = Hyperparams(lr=1e-4, weight_decay=5e-6, scheduler=False)
    elif arch == "resnet18":
        hp = Hyperparams(lr=1e-3, weight_decay=0.0, scheduler=True)
    else:
        hp = Hyperparams(lr=1e-3, weight_decay=5e-6, scheduler=True)
    return replace(hp, epochs=default_epochs(spec), dropout=spec.dropout, seed=seed)


@dataclass
class TrialResult:
    test_acc: np.ndarray
    test_loss: np.ndarray
    train_acc: float
    seed: int
    split: SplitSpec
    stats: ChannelStats | None = None


def derive_seed(base: int, *key: int) -> int:
    return int(np.random.SeedSequence(base, spawn_key=tuple(key)).generate_state(1)[0])


def predict(logits: np.ndarray) -> np.ndarray:
    """Class 1 only when its logit is strictly larger; exact ties go to class 0."""
    return (logits[:, 1] > logits[:, 0]).astype(np.int64)


def _normalized(corpus: Corpus, split: SplitSpec) -> tuple[np.ndarray, np.ndarray, ChannelStats]:
    stats = channel_stats(corpus.images[split.train], source=split.train)
    return (
        normalize(corpus.images[split.train], stats).astype(np.float32),
        normalize(corpus.images[split.test], stats).astype(np.float32),
        stats,
    )


def evaluate(model, images: np.ndarray, series: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Eval-mode accuracy and mean cross-entropy."""
    model.eval()
    ce = SoftmaxCrossEntropy()
    correct, total_loss = 0, 0.0
    for start in range(0, len(labels), EVAL_BATCH):
        sl = slice(start, start + EVAL_BATCH)
        logits = model.forward(images[sl], series[sl]).astype(np.float64)
        y = labels[sl].astype(np.int64)
        total_loss += ce.forward(logits, y) * len(y)
        correct += int((predict(logits) == y).sum())
    n = max(len(labels), 1)
    return correct / n, total_loss / n


def train_once(spec: ModelSpec, corpus: Corpus, split: SplitSpec, hp: Hyperparams) -> TrialResult:
    """Train one model on ``split.train`` and score the test side after every epoch.

    Images are standardized with statistics of the training side only.
    """
    return train_model(spec, corpus, split, hp)[0]


def train_model(spec: ModelSpec, corpus: Corpus, split: SplitSpec, hp: Hyperparams):
    """As :func:`train_once`, also returning the trained model."""
    x_train, x_test, stats = _normalized(corpus, split)
    s_train, s_test = corpus.series[split.train], corpus.series[split.test]
    y_train = corpus.labels[split.train].astype(np.int64)
    y_test = corpus.labels[split.test].astype(np.int64)

    model_seed, order_seed = np.random.SeedSequence(hp.seed).generate_state(2)
    model = build_model(replace(spec, dropout=hp.dropout), seed=int(model_seed))
    order_rng = np.random.default_rng(int(order_seed))
    opt = Adam(model.params(), lr=hp.lr, weight_decay=hp.weight_decay)
    schedule = LinearSchedule(hp.lr, hp.epochs, hp.scheduler)
    ce = SoftmaxCrossEntropy()

    acc = np.zeros(hp.epochs)
    loss = np.zeros(hp.epochs)
    for epoch in range(hp.epochs):
        opt.lr = lr_at(schedule, epoch)
        model.train()
        perm = order_rng.permutation(len(y_train))
        for start in range(0, len(perm), hp.batch_size):
            idx = perm[start : start + hp.batch_size]
            model.zero_grad()
            ce.forward(model.forward(x_train[idx], s_train[idx]), y_train[idx])
            model.backward(ce.backward())
            opt.step()
        acc[epoch], loss[epoch] = evaluate(model, x_test, s_test, y_test)
    train_acc, _ = evaluate(model, x_train, s_train, y_train)
    return TrialResult(acc, loss, train_acc, hp.seed, split, stats), model


# -- parallel execution ------------------------------------------------------

_WORKER_CORPUS: Corpus | None = None


def _init_worker(corpus: Corpus) -> None:
    global _WORKER_CORPUS
    _WORKER_CORPUS = corpus


def _job(args) -> TrialResult:
    spec, split, hp = args
    with threadpool_limits(1):
        return train_once(spec, _WORKER_CORPUS, split, hp)


def run_jobs(corpus: Corpus, jobs: Sequence[tuple[ModelSpec, SplitSpec, Hyperparams]], workers: int = 1) -> list[TrialResult]:
    """Run training jobs, in order of submission, on ``workers`` processes.

    Every job is single-threaded whatever the worker count, so results do
    not depend on it.
    """
    if workers <= 1 or len(jobs) <= 1:
        _init_worker(corpus)
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(corpus,)) as pool:
        return list(pool.map(_job, jobs))


# -- protocol -----------------------------------------------------------------


@dataclass
class ProtocolReport:
    architecture: str
    formulation: str
    subset: str
    hyperparams: dict
    seeds: list[int]
    acc_curves: np.ndarray  # (trials, epochs)
    loss_curves: np.ndarray
    train_acc: list[float] = field(default_factory=list)
    labels_shuffled: bool = False

    @property
    def trials(self) -> int:
        return len(self.acc_curves)

    @property
    def mean_acc(self) -> np.ndarray:
        return self.acc_curves.mean(axis=0)

    @property
    def std_acc(self) -> np.ndarray:
        return _sample_std(self.acc_curves)

    @property
    def mean_loss(self) -> np.ndarray:
        return self.loss_curves.mean(axis=0)

    @property
    def std_loss(self) -> np.ndarray:
        return _sample_std(self.loss_curves)

    @property
    def best_epoch(self) -> int:
        return int(np.argmax(self.mean_acc))

    @property
    def best_acc(self) -> float:
        return float(self.mean_acc[self.best_epoch])

    @property
    def best_std(self) -> float:
        return float(self.std_acc[self.best_epoch])

    @property
    def best_single_trial(self) -> float:
        return float(self.acc_curves.max())

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "formulation": self.formulation,
            "subset": self.subset,
            "hyperparams": self.hyperparams,
            "seeds": [int(s) for s in self.seeds],
            "acc_curves": self.acc_curves.tolist(),
            "loss_curves": self.loss_curves.tolist(),
            "train_acc": [float(a) for a in self.train_acc],
            "labels_shuffled": self.labels_shuffled,
            "best_epoch": self.best_epoch,
            "best_acc": self.best_acc,
            "best_std": self.best_std,
            "best_single_trial": self.best_single_trial,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolReport":
        return cls(
            architecture=d["architecture"],
            formulation=d["formulation"],
            subset=d["subset"],
            hyperparams=dict(d["hyperparams"]),
            seeds=[int(s) for s in d["seeds"]],
            acc_curves=np.asarray(d["acc_curves"], dtype=np.float64),
            loss_curves=np.asarray(d["loss_curves"], dtype=np.float64),
            train_acc=[float(a) for a in d.get("train_acc", [])],
            labels_shuffled=bool(d.get("labels_shuffled", False)),
        )


def _sample_std(curves: np.ndarray) -> np.ndarray:
    if len(curves) < 2:
        return np.zeros(curves.shape[1])
    return curves.std(axis=0, ddof=1)


def report_from_trials(spec: ModelSpec, formulation: str, subset: str, hp: Hyperparams, results: Sequence[TrialResult], labels_shuffled: bool = False) -> ProtocolReport:
    return ProtocolReport(
        architecture=spec.architecture,
        formulation=formulation,
        subset=subset,
        hyperparams=asdict(hp),
        seeds=[r.seed for r in results],
        acc_curves=np.stack([r.test_acc for r in results]),
        loss_curves=np.stack([r.test_loss for r in results]),
        train_acc=[r.train_acc for r in results],
        labels_shuffled=labels_shuffled,
    )


def shuffle_labels(corpus: Corpus, seed: int) -> Corpus:
    """Permutation control: the same corpus with its labels randomly reassigned."""
    perm = np.random.default_rng(seed).permutation(len(corpus))
    return replace(
        corpus,
        labels=corpus.labels[perm].copy(),
        provenance={**corpus.provenance, "labels_shuffled": seed},
    )


def run_protocol(
    spec: ModelSpec,
    corpus: Corpus,
    subset: str = "all",
    trials: int = 100,
    hp: Hyperparams | None = None,
    seed: int = 0,
    workers: int = 1,
) -> ProtocolReport:
    """Epoch-wise averaged test curves over ``trials`` random 80/20 splits.

    ``corpus`` should already be trimmed; the subset filter is applied
    here, before any splitting. Trial ``t`` splits and trains with seeds
    derived from ``(seed, t)``.
    """
    if subset not in SUBSETS:
        raise ValueError(f"unknown subset {subset!r}")
    if trials < 1:
        raise ValueError("need at least one trial")
    hp = hp or default_hyperparams(spec, seed)
    data = corpus.filter_subset(subset)
    jobs = []
    for t in range(trials):
        split = split_80_20(len(data), derive_seed(seed, t, 0))
        jobs.append((spec, split, replace(hp, seed=derive_seed(seed, t, 1))))
    results = run_jobs(data, jobs, workers)
    shuffled = "labels_shuffled" in corpus.provenance
    return report_from_trials(spec, corpus.formulation, subset, hp, results, shuffled)


# -- grid search --------------------------------------------------------------


@dataclass
class GridResult:
    best: Hyperparams
    scores: dict[tuple, float]
    runs: int


def grid_cells(grid: dict | None = None) -> list[dict]:
    grid = DEFAULT_GRID if grid is None else grid
    keys = sorted(grid)
    cells = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    if not cells:
        raise EmptyGrid("hyperparameter grid has no cells")
    return cells


def _tie_key(hp: Hyperparams) -> tuple:
    # lower lr, then lower weight decay, then scheduler off, then lower dropout
    return (hp.lr, hp.weight_decay, hp.scheduler, hp.dropout)


def grid_search(
    spec: ModelSpec,
    corpus: Corpus,
    grid: dict | None = None,
    k: int = 10,
    base: Hyperparams | None = None,
    seed: int = 0,
    workers: int = 1,
    dropouts: Sequence[float] | None = None,
    trainer: Callable[..., list[TrialResult]] | None = None,
) -> GridResult:
    """Score every grid cell by k-fold cross-validation and return the best.

    A cell's score is the best epoch of its fold-averaged validation curve.
    Fusion models then sweep dropout with the winning cell held fixed
    (``dropouts`` defaults to the standard sweep for them, none otherwise).
    """
    base = base or default_hyperparams(spec, seed)
    cells = grid_cells(grid)
    folds = kfold(len(corpus), k, derive_seed(seed, 0))
    run = trainer or (lambda jobs: run_jobs(corpus, jobs, workers))
    scores: dict[tuple, float] = {}
    runs = 0

    def score(candidates: list[Hyperparams]) -> Hyperparams:
        nonlocal runs
        jobs = [
            (spec, fold, replace(hp, seed=derive_seed(seed, 1, f)))
            for hp in candidates
            for f, fold in enumerate(folds)
        ]
        results = run(jobs)
        runs += len(jobs)
        best, best_score = None, -np.inf
        for i, hp in enumerate(candidates):
            curves = np.stack([r.test_acc for r in results[i * k : (i + 1) * k]])
            s = float(curves.mean(axis=0).max())
            scores[_tie_key(hp)] = s
            if s > best_score or (s == best_score and _tie_key(hp) < _tie_key(best)):
                best, best_score = hp, s
        return best

    best = score([replace(base, **cell) for cell in cells])
    if dropouts is None:
        dropouts = DROPOUT_SWEEP if spec.uses_series and spec.uses_images else ()
    if dropouts:
        best = score([replace(best, dropout=d) for d in dropouts])
    return GridResult(best, scores, runs)


# -- reports ------------------------------------------------------------------


def table_columns() -> list[str]:
    return [f"{f}_{s}" for f in FORMULATIONS for s in SUBSETS]


def format_cell(mean: float, std: float) -> str:
    return f"{100 * mean:.2f} ({100 * std:.2f})"


def _curve_name(r: ProtocolReport) -> str:
    tag = "_shuffled" if r.labels_shuffled else ""
    return f"{r.architecture}_{r.formulation}_{r.subset}{tag}.csv"


def emit_report(reports: Sequence[ProtocolReport], out_dir: str | Path) -> dict[str, Path]:
    """Write the accuracy table, per-configuration curves and a JSON summary.

    Table cells are percentages, ``"mean (std)"`` of the best averaged
    epoch. Nothing time-dependent is written, so identical reports give
    identical files.
    """
    if not reports:
        raise ValueError("no reports to emit")
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    columns = table_columns()
    rows: dict[str, dict[str, str]] = {}
    for r in reports:
        if r.labels_shuffled:
            continue
        rows.setdefault(r.architecture, {})[f"{r.formulation}_{r.subset}"] = format_cell(r.best_acc, r.best_std)
    table = out / "table.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["architecture", *columns])
        for arch in sorted(rows):
            w.writerow([arch, *(rows[arch].get(c, "") for c in columns)])
    for r in reports:
        with open(out / "curves" / _curve_name(r), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "mean_acc", "std_acc", "mean_loss", "std_loss"])
            for e in range(r.acc_curves.shape[1]):
                w.writerow([e + 1, repr(float(r.mean_acc[e])), repr(float(r.std_acc[e])),
                            repr(float(r.mean_loss[e])), repr(float(r.std_loss[e]))])
    summary = out / "summary.json"
    summary.write_text(json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True) + "\n")
    return {"table": table, "curves": out / "curves", "summary": summary}


def load_summary(path: str | Path) -> list[ProtocolReport]:
    return [ProtocolReport.from_dict(d) for d in json.loads(Path(path).read_text())]
