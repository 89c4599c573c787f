"""
Random forests for the nuisance models: a regression forest for the outcome
means and a multi-class probability forest for the (d, t) cell propensities.

Trees are CART trees grown on subsamples drawn without replacement, with a
fresh random feature subset at every split. Each tree draws from its own RNG
stream seeded by (forest seed, tree index), so serial and pooled fits are
bit-identical.
"""

import json
import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from diddml.config import ForestConfig
from diddml.errors import LearnerError
from diddml.parallel import derive_seed, parallel_map

logger = logging.getLogger(__name__)

Criterion = Literal["variance", "gini"]

REGRESSION_MIN_LEAF = 5
PROBABILITY_MIN_LEAF = 10


@dataclass(frozen=True)
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            feat = self.feature[node]
            active = np.nonzero(feat >= 0)[0]
            if active.size == 0:
                return node
            current = node[active]
            go_left = X[active, feat[active]] <= self.threshold[current]
            node[active] = np.where(go_left, self.left[current], self.right[current])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }


@dataclass(frozen=True)
class _GrowParams:
    criterion: Criterion
    mtry: int
    min_leaf: int
    max_depth: Optional[int]
    subsample_fraction: float
    n_outputs: int


def _best_split(Xn: np.ndarray, target: np.ndarray, features: np.ndarray, params: _GrowParams,
                parent: float) -> tuple[int, float, float]:
    """Best (feature, threshold, gain) over the candidate features; feature -1 when none is valid.

    Ties go to the lowest feature index, then the lowest threshold.
    """
    m = len(Xn)
    nl = np.arange(1, m, dtype=float)
    nr = m - nl
    best = (-1, 0.0, 0.0)
    for f in features:
        xs = Xn[:, f]
        order = np.argsort(xs, kind="stable")
        xs = xs[order]
        valid = xs[:-1] < xs[1:]
        valid[: params.min_leaf - 1] = False
        if params.min_leaf > 1:
            valid[m - params.min_leaf:] = False
        if not valid.any():
            continue
        ts = target[order]
        if params.criterion == "variance":
            cs = np.cumsum(ts)
            cs2 = np.cumsum(ts * ts)
            left = cs2[:-1] - cs[:-1] ** 2 / nl
            right = (cs2[-1] - cs2[:-1]) - (cs[-1] - cs[:-1]) ** 2 / nr
        else:
            cc = np.cumsum(ts, axis=0)
            cl = cc[:-1]
            cr = cc[-1] - cl
            left = nl - (cl * cl).sum(axis=1) / nl
            right = nr - (cr * cr).sum(axis=1) / nr
        gain = parent - (left + right)
        gain[~valid] = -np.inf
        i = int(np.argmax(gain))
        if gain[i] > best[2]:
            best = (int(f), float((xs[i] + xs[i + 1]) / 2.0), float(gain[i]))
    return best


def _node_impurity(target: np.ndarray, criterion: Criterion) -> float:
    m = len(target)
    if criterion == "variance":
        return float(((target - target.mean()) ** 2).sum())
    counts = target.sum(axis=0)
    return float(m - (counts * counts).sum() / m)


def _leaf_value(target: np.ndarray, criterion: Criterion) -> np.ndarray:
    if criterion == "variance":
        return np.array([target.mean()])
    return target.sum(axis=0) / len(target)


def _grow_tree(X: np.ndarray, target: np.ndarray, params: _GrowParams, seed: int) -> Tree:
    rng = np.random.default_rng(seed)
    n, p = X.shape
    if params.subsample_fraction < 1.0:
        size = max(1, int(math.floor(params.subsample_fraction * n)))
        rows = np.sort(rng.choice(n, size=size, replace=False))
    else:
        rows = np.arange(n)

    feature, threshold, left, right, value = [], [], [], [], []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(None)
        return len(feature) - 1

    stack = [(new_node(), rows, 0)]
    while stack:
        node, idx, depth = stack.pop()
        t_node = target[idx]
        value[node] = _leaf_value(t_node, params.criterion)
        m = len(idx)
        if m < 2 * params.min_leaf or (params.max_depth is not None and depth >= params.max_depth):
            continue
        if params.criterion == "variance":
            # centring keeps the cumulative-sum split scores well conditioned
            t_node = t_node - t_node.mean()
        parent = _node_impurity(t_node, params.criterion)
        if parent <= 1e-12:
            continue
        candidates = np.sort(rng.choice(p, size=params.mtry, replace=False))
        f, thr, gain = _best_split(X[idx], t_node, candidates, params, parent)
        if f < 0 or gain <= 1e-12 * parent:
            continue
        goes_left = X[idx, f] <= thr
        feature[node], threshold[node] = f, thr
        left_id, right_id = new_node(), new_node()
        left[node], right[node] = left_id, right_id
        stack.append((right_id, idx[~goes_left], depth + 1))
        stack.append((left_id, idx[goes_left], depth + 1))

    return Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.vstack(value),
    )


def _grow_task(args) -> Tree:
    return _grow_tree(*args)


class _Forest:
    kind = ""

    def __init__(self, trees: list[Tree], config: ForestConfig, n_features: int):
        self.trees = trees
        self.config = config
        self.n_features = n_features

    def _mean_prediction(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise LearnerError(f"expected a matrix with {self.n_features} columns, got shape {X.shape}")
        total = np.zeros((len(X), self.trees[0].value.shape[1]))
        for tree in self.trees:
            total += tree.predict(X)
        return total / len(self.trees)

    def to_text(self) -> str:
        """Debug dump of the fitted trees as JSON; not a stable interchange format."""
        return json.dumps({
            "kind": self.kind,
            "config": self.config.model_dump(mode="json"),
            "n_features": self.n_features,
            "trees": [tree.to_dict() for tree in self.trees],
        })


class RegressionForest(_Forest):
    kind = "regression"

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self._mean_prediction(X)[:, 0]


class ProbabilityForest(_Forest):
    kind = "probability"

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Rows on the probability simplex over the classes."""
        return self._mean_prediction(X)


def _check_matrix(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise LearnerError(f"need a non-empty 2-d feature matrix, got shape {X.shape}")
    if X.shape[1] < 1:
        raise LearnerError("need at least one feature column")
    if not np.isfinite(X).all():
        raise LearnerError("feature matrix contains non-finite values")
    return X


def _params(cfg: ForestConfig, p: int, criterion: Criterion, n_outputs: int) -> _GrowParams:
    if criterion == "variance":
        mtry = cfg.mtry or math.ceil(p / 3)
        min_leaf = cfg.min_leaf or REGRESSION_MIN_LEAF
    else:
        mtry = cfg.mtry or math.ceil(math.sqrt(p))
        min_leaf = cfg.min_leaf or PROBABILITY_MIN_LEAF
    return _GrowParams(criterion, max(1, min(mtry, p)), min_leaf, cfg.max_depth, cfg.subsample_fraction, n_outputs)


def _grow_all(X, target, params: _GrowParams, cfg: ForestConfig, threads: int) -> list[Tree]:
    tasks = [(X, target, params, derive_seed(cfg.seed, i)) for i in range(cfg.n_trees)]
    return parallel_map(_grow_task, tasks, threads)


def fit_regression(X: np.ndarray, y: np.ndarray, cfg: ForestConfig, threads: int = 1) -> RegressionForest:
    X = _check_matrix(X)
    y = np.asarray(y, dtype=float)
    if y.shape != (X.shape[0],):
        raise LearnerError(f"target has shape {y.shape}, expected ({X.shape[0]},)")
    if not np.isfinite(y).all():
        raise LearnerError("target contains non-finite values")
    params = _params(cfg, X.shape[1], "variance", 1)
    if X.shape[0] < params.min_leaf:
        raise LearnerError(f"need at least min_leaf={params.min_leaf} rows, got {X.shape[0]}")
    trees = _grow_all(X, y, params, cfg, threads)
    logger.debug("regression forest: %d trees on %d x %d", len(trees), *X.shape)
    return RegressionForest(trees, cfg, X.shape[1])


def fit_probability(X: np.ndarray, labels: np.ndarray, cfg: ForestConfig, n_classes: int = 4,
                    threads: int = 1) -> ProbabilityForest:
    X = _check_matrix(X)
    labels = np.asarray(labels)
    if labels.shape != (X.shape[0],):
        raise LearnerError(f"labels have shape {labels.shape}, expected ({X.shape[0]},)")
    if not np.isin(labels, np.arange(n_classes)).all():
        raise LearnerError(f"labels must lie in 0..{n_classes - 1}")
    labels = labels.astype(np.int64)
    params = _params(cfg, X.shape[1], "gini", n_classes)
    counts = np.bincount(labels, minlength=n_classes)
    short = [c for c in range(n_classes) if counts[c] < params.min_leaf]
    if short:
        raise LearnerError(f"missing class(es) {short}: each class needs at least min_leaf={params.min_leaf} rows")
    onehot = np.zeros((len(labels), n_classes))
    onehot[np.arange(len(labels)), labels] = 1.0
    trees = _grow_all(X, onehot, params, cfg, threads)
    logger.debug("probability forest: %d trees on %d x %d", len(trees), *X.shape)
    return ProbabilityForest(trees, cfg, X.shape[1])


# learner name -> (outcome fitter, propensity fitter); other learners register here
LEARNERS = {
    "random_forest": (fit_regression, fit_probability),
}
