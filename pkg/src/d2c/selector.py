"""Budgeted per-class subset selection.

Strategies: interval (every k-th sample of the difficulty-ascending order),
min/max extremes, uniform random, herding (greedy mean-matching), and
k-center (farthest-point). Ties break by ascending global index everywhere,
which makes every strategy exactly reproducible by a brute-force
reimplementation.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

STRATEGIES = ("interval", "min", "max", "random", "herding", "kcenter")


class BudgetError(ValueError):
    """Requested budget is infeasible for at least one class."""


@dataclass(frozen=True)
class SelectionSpec:
    strategy: str
    m: int
    k: int | None = None          # interval only
    seed: int | None = None       # random only

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy '{self.strategy}'; "
                             f"choose from {STRATEGIES}")
        if self.m < 1:
            raise ValueError(f"budget m must be >= 1, got {self.m}")
        if self.strategy == "interval" and (self.k is None or self.k < 1):
            raise ValueError(f"interval selection needs k >= 1, got {self.k}")


@dataclass(frozen=True)
class SelectionResult:
    per_class: dict[int, np.ndarray]   # class id -> selected global indices
    spec: SelectionSpec
    counts: dict[int, int]

    def __post_init__(self):
        for cid, idx in self.per_class.items():
            if len(np.unique(idx)) != len(idx):
                raise ValueError(f"duplicate indices selected in class {cid}")
            if self.counts[cid] != len(idx):
                raise ValueError(f"count mismatch for class {cid}")

    def all_indices(self) -> np.ndarray:
        return np.concatenate([self.per_class[c] for c in sorted(self.per_class)])

    def spec_dict(self) -> dict:
        return asdict(self.spec)


def _result(per_class: dict, spec: SelectionSpec, labels=None) -> SelectionResult:
    per_class = {int(c): np.asarray(v, dtype=np.int64) for c, v in per_class.items()}
    if labels is not None:
        for cid, idx in per_class.items():
            if np.any(labels[idx] != cid):
                raise ValueError(f"selected index with wrong label in class {cid}")
    return SelectionResult(per_class=per_class, spec=spec,
                           counts={c: len(v) for c, v in per_class.items()})


def _class_order(scores, indices, descending=False):
    """Indices into the class block, score-sorted with index tie-breaks."""
    key = -scores if descending else scores
    return np.lexsort((indices, key))


def _by_class(labels):
    labels = np.asarray(labels)
    return {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}


def interval_select(table, k: int, m: int) -> SelectionResult:
    """Per class: ascending difficulty order, positions {0, k, ..., (m-1)k}."""
    spec = SelectionSpec(strategy="interval", m=m, k=int(k))
    per_class = {}
    for cid, rows in _by_class(table.labels).items():
        n_y = len(rows)
        if (m - 1) * k >= n_y:
            raise BudgetError(
                f"class {cid}: interval selection with k={k}, m={m} needs "
                f"more than {(m - 1) * k} samples, class has {n_y}")
        order = _class_order(table.scores[rows], table.indices[rows])
        take = order[np.arange(m) * k]
        per_class[cid] = table.indices[rows][take]
    return _result(per_class, spec, labels=None)


def extreme_select(table, mode: str, m: int) -> SelectionResult:
    if mode not in ("min", "max"):
        raise ValueError(f"mode must be 'min' or 'max', got '{mode}'")
    spec = SelectionSpec(strategy=mode, m=m)
    per_class = {}
    for cid, rows in _by_class(table.labels).items():
        if m > len(rows):
            raise BudgetError(f"class {cid}: budget m={m} exceeds class size "
                              f"{len(rows)}")
        order = _class_order(table.scores[rows], table.indices[rows],
                             descending=(mode == "max"))
        per_class[cid] = table.indices[rows][order[:m]]
    return _result(per_class, spec, labels=None)


def random_select(dataset, m: int, seed: int) -> SelectionResult:
    spec = SelectionSpec(strategy="random", m=m, seed=int(seed))
    rng = np.random.default_rng(seed)
    per_class = {}
    for cid, rows in sorted(_by_class(dataset.labels).items()):
        if m > len(rows):
            raise BudgetError(f"class {cid}: budget m={m} exceeds class size "
                              f"{len(rows)}")
        per_class[cid] = rows[rng.choice(len(rows), size=m, replace=False)]
    return _result(per_class, spec, labels=dataset.labels)


def herding_select(dataset, m: int) -> SelectionResult:
    """Greedy mean-matching in raw sample space: at each step add the sample
    minimizing the distance between the class mean and the running mean."""
    spec = SelectionSpec(strategy="herding", m=m)
    X = np.asarray(dataset.samples, dtype=np.float64)
    per_class = {}
    for cid, rows in _by_class(dataset.labels).items():
        if m > len(rows):
            raise BudgetError(f"class {cid}: budget m={m} exceeds class size "
                              f"{len(rows)}")
        block = X[rows]
        target = block.mean(axis=0)
        chosen = []
        taken = np.zeros(len(rows), dtype=bool)
        running = np.zeros(block.shape[1])
        for step in range(1, m + 1):
            cand = (running + block) / step           # mean if candidate added
            d = np.linalg.norm(target - cand, axis=1)
            d[taken] = np.inf
            j = int(np.argmin(d))                      # first minimum = lowest index
            taken[j] = True
            chosen.append(rows[j])
            running = running + block[j]
        per_class[cid] = np.array(chosen)
    return _result(per_class, spec, labels=dataset.labels)


def kcenter_select(dataset, m: int) -> SelectionResult:
    """Farthest-point greedy seeded at the sample nearest the class mean."""
    spec = SelectionSpec(strategy="kcenter", m=m)
    X = np.asarray(dataset.samples, dtype=np.float64)
    per_class = {}
    for cid, rows in _by_class(dataset.labels).items():
        if m > len(rows):
            raise BudgetError(f"class {cid}: budget m={m} exceeds class size "
                              f"{len(rows)}")
        block = X[rows]
        mean = block.mean(axis=0)
        j = int(np.argmin(np.linalg.norm(block - mean, axis=1)))
        chosen = [rows[j]]
        mind = np.linalg.norm(block - block[j], axis=1)
        for _ in range(m - 1):
            mind[np.isin(rows, chosen)] = -np.inf
            j = int(np.argmax(mind))                   # first maximum = lowest index
            chosen.append(rows[j])
            mind = np.minimum(mind, np.linalg.norm(block - block[j], axis=1))
        per_class[cid] = np.array(chosen)
    return _result(per_class, spec, labels=dataset.labels)


def select(strategy, *, table=None, dataset=None, m=None, k=None,
           seed=None) -> SelectionResult:
    """Uniform entry point used by the CLI and the comparison harness.

    ``strategy`` is a name from STRATEGIES or a full SelectionSpec.
    """
    if isinstance(strategy, SelectionSpec):
        spec = strategy
        strategy, m, k, seed = spec.strategy, spec.m, spec.k, spec.seed
    if m is None:
        raise ValueError("selection needs a budget m")
    if strategy == "interval":
        if table is None:
            raise ValueError("interval selection needs a score table")
        return interval_select(table, k=k, m=m)
    if strategy in ("min", "max"):
        if table is None:
            raise ValueError(f"{strategy} selection needs a score table")
        return extreme_select(table, mode=strategy, m=m)
    if strategy == "random":
        if dataset is None:
            raise ValueError("random selection needs the dataset")
        return random_select(dataset, m=m, seed=0 if seed is None else seed)
    if strategy == "herding":
        if dataset is None:
            raise ValueError("herding selection needs the dataset")
        return herding_select(dataset, m=m)
    if strategy == "kcenter":
        if dataset is None:
            raise ValueError("k-center selection needs the dataset")
        return kcenter_select(dataset, m=m)
    raise ValueError(f"unknown strategy '{strategy}'; choose from {STRATEGIES}")


def write_selection(result: SelectionResult, path, scores=None) -> None:
    """CSV `class,global_index,rank_in_class,score` + JSON spec sidecar."""
    path = str(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "global_index", "rank_in_class", "score"])
        for cid in sorted(result.per_class):
            for rank, gi in enumerate(result.per_class[cid]):
                s = "" if scores is None else repr(float(scores[gi]))
                w.writerow([cid, int(gi), rank, s])
    with open(path + ".spec.json", "w") as fh:
        json.dump(result.spec_dict(), fh, sort_keys=True, indent=1)


def read_selection(path) -> SelectionResult:
    path = str(path)
    with open(path + ".spec.json") as fh:
        spec = SelectionSpec(**json.load(fh))
    per_class: dict[int, list[int]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            per_class.setdefault(int(row["class"]), []).append(
                int(row["global_index"]))
    return _result(per_class, spec)
