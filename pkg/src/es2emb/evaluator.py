"""Embedding-quality protocol: 10% holdout, 5-fold CV, probe, ROC-AUC / MAE.

Every probe is evaluated on the same held-out test set; a fold's only role is
to be excluded from probe training. Reported numbers are the arithmetic mean
and the sample (n-1) standard deviation across folds.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Dataset, Task, TaskKind
from .embedder import EmbeddingMatrix

log = logging.getLogger(__name__)


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class SplitPlan:
    test_user_ids: tuple[str, ...]
    folds: tuple[tuple[str, ...], ...]
    seed: int

    @property
    def train_user_ids(self) -> tuple[str, ...]:
        return tuple(uid for fold in self.folds for uid in fold)


def _largest_remainder(counts: dict, total: int, fraction: float) -> dict:
    """Per-group allocation of ``total`` picks, proportional with largest remainder."""
    quotas = {g: n * fraction for g, n in counts.items()}
    alloc = {g: int(q) for g, q in quotas.items()}
    short = total - sum(alloc.values())
    order = sorted(counts, key=lambda g: (-(quotas[g] - alloc[g]), g))
    for g in order[:short]:
        alloc[g] += 1
    return alloc


def _spread_over_folds(
    members_by_group: dict, n_folds: int, rng: np.random.Generator
) -> list[list[str]]:
    """Distribute each group's members over folds, keeping fold sizes within 1.

    Whole multiples of n_folds go everywhere; each group's remainder goes to
    the currently smallest folds, which preserves the global balance.
    """
    folds: list[list[str]] = [[] for _ in range(n_folds)]
    for group in sorted(members_by_group, key=lambda g: (-len(members_by_group[g]), str(g))):
        members = sorted(members_by_group[group])
        rng.shuffle(members)
        base, extra = divmod(len(members), n_folds)
        sized = sorted(range(n_folds), key=lambda i: (len(folds[i]), i))
        targets = sized[:extra] + [i for i in range(n_folds) for _ in range(base)]
        # deterministic layout: first the extras, then round-robin of the base share
        cursor = 0
        for i in sized[:extra]:
            folds[i].append(members[cursor])
            cursor += 1
        for r in range(base):
            for i in range(n_folds):
                folds[i].append(members[cursor])
                cursor += 1
    return folds


def make_split_plan(
    dataset: Dataset,
    test_fraction: float = 0.1,
    n_folds: int = 5,
    seed: int = 0,
) -> SplitPlan:
    """Seeded holdout + disjoint folds over the labeled users.

    Classification splits are stratified by class; regression splits are plain
    random. Fold sizes differ by at most one.
    """
    labeled = sorted(dataset.labeled(), key=lambda s: s.user_id)
    if len(labeled) < n_folds:
        raise EvalError(f"{len(labeled)} labeled users < {n_folds} folds")
    rng = np.random.default_rng(seed)
    n_test = round(len(labeled) * test_fraction)

    if dataset.task.is_classification:
        by_class: dict[int, list[str]] = {}
        for seq in labeled:
            by_class.setdefault(int(seq.label), []).append(seq.user_id)  # type: ignore[arg-type]
        test_alloc = _largest_remainder({c: len(v) for c, v in by_class.items()}, n_test, test_fraction)
        test_ids: list[str] = []
        train_by_class: dict[int, list[str]] = {}
        for c in sorted(by_class):
            members = sorted(by_class[c])
            rng.shuffle(members)
            test_ids.extend(members[: test_alloc[c]])
            train_by_class[c] = members[test_alloc[c] :]
        folds = _spread_over_folds(train_by_class, n_folds, rng)
    else:
        ids = sorted(s.user_id for s in labeled)
        rng.shuffle(ids)
        test_ids = ids[:n_test]
        folds = _spread_over_folds({0: ids[n_test:]}, n_folds, rng)

    return SplitPlan(
        test_user_ids=tuple(sorted(test_ids)),
        folds=tuple(tuple(sorted(f)) for f in folds),
        seed=seed,
    )


@dataclass(frozen=True)
class ProbeConfig:
    l2: float = 1e-2
    max_iter: int = 10_000
    grad_tol: float = 1e-6


@dataclass
class ProbeModel:
    weights: np.ndarray  # (n_outputs, D+1), last column is the intercept
    mean: np.ndarray
    scale: np.ndarray
    task: Task
    n_iter: int
    final_objective: float
    final_grad_norm: float
    family: str = "l2-linear-gd"

    def scores(self, X: np.ndarray) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.mean) / self.scale
        Z1 = np.hstack([Z, np.ones((Z.shape[0], 1))])
        out = Z1 @ self.weights.T
        return out[:, 0] if out.shape[1] == 1 else out


def _logistic_objective(W, X1, Y, l2):
    # mean logistic loss over samples and outputs + l2 on non-intercept weights
    Z = X1 @ W.T
    # log(1 + exp(-y z)) with the stable split by sign
    m = Y * Z
    loss = np.logaddexp(0.0, -m).mean()
    grad_z = -Y * _sigmoid(-m) / m.size
    grad = grad_z.T @ X1
    reg = W.copy()
    reg[:, -1] = 0.0
    return loss + 0.5 * l2 * float((reg**2).sum()), grad + l2 * reg


def _ridge_objective(W, X1, y, l2):
    r = X1 @ W[0] - y
    n = y.size
    grad = np.empty_like(W)
    grad[0] = (X1.T @ r) / n
    reg = W.copy()
    reg[:, -1] = 0.0
    return 0.5 * float(r @ r) / n + 0.5 * l2 * float((reg**2).sum()), grad + l2 * reg


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def fit_probe(
    X: np.ndarray,
    y: Sequence[int] | Sequence[float],
    task: Task,
    config: ProbeConfig = ProbeConfig(),
    init: np.ndarray | None = None,
) -> ProbeModel:
    """Deterministic L2 probe fit by accelerated full-batch gradient descent.

    Logistic (one-vs-rest rows for multiclass) or ridge for regression, on
    features standardized with the training statistics. Stops at gradient norm
    below config.grad_tol or after config.max_iter iterations.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise EvalError("need at least 2 training rows")
    if not np.all(np.isfinite(X)):
        raise EvalError("features contain non-finite values")
    y_arr = np.asarray(y, dtype=np.float64)
    if y_arr.shape[0] != X.shape[0]:
        raise EvalError("feature/label length mismatch")

    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    X1 = np.hstack([(X - mean) / scale, np.ones((X.shape[0], 1))])
    n, d1 = X1.shape

    if task.is_classification:
        classes = np.unique(y_arr).astype(int)
        if classes.size < 2:
            raise EvalError("single-class training data")
        n_out = 1 if task.kind is TaskKind.BINARY else task.n_classes
        if task.kind is TaskKind.BINARY:
            Y = np.where(y_arr[:, None] == 1, 1.0, -1.0)
        else:
            Y = np.where(y_arr[:, None] == np.arange(n_out)[None, :], 1.0, -1.0)
        objective = lambda W: _logistic_objective(W, X1, Y, config.l2)
        lips = 0.25 * np.linalg.norm(X1, 2) ** 2 / n + config.l2
    else:
        n_out = 1
        objective = lambda W: _ridge_objective(W, X1, y_arr, config.l2)
        lips = np.linalg.norm(X1, 2) ** 2 / n + config.l2

    W = np.zeros((n_out, d1)) if init is None else np.array(init, dtype=np.float64)
    if W.shape != (n_out, d1):
        raise EvalError(f"init shape {W.shape} != {(n_out, d1)}")

    # Nesterov acceleration with the strongly-convex momentum constant
    step = 1.0 / lips
    mu = config.l2
    beta = (np.sqrt(lips) - np.sqrt(mu)) / (np.sqrt(lips) + np.sqrt(mu)) if mu > 0 else 0.9
    prev = W.copy()
    obj, grad = objective(W)
    it = 0
    gnorm = float(np.linalg.norm(grad))
    while it < config.max_iter and gnorm >= config.grad_tol:
        look = W + beta * (W - prev)
        _, grad_look = objective(look)
        prev, W = W, look - step * grad_look
        obj, grad = objective(W)
        gnorm = float(np.linalg.norm(grad))
        it += 1

    return ProbeModel(
        weights=W, mean=mean, scale=scale, task=task,
        n_iter=it, final_objective=float(obj), final_grad_norm=gnorm,
    )


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(random positive outranks random negative), ties counted one half.

    Computed by midranks; agrees exactly with pairwise counting.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise EvalError("scores and labels must be equal-length vectors")
    pos = int((y == 1).sum())
    neg = int((y == 0).sum())
    if pos + neg != y.size:
        raise EvalError("binary labels must be 0 or 1")
    if pos == 0 or neg == 0:
        raise EvalError("both classes must be present")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[order[j + 1]] == s[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - pos * (pos + 1) / 2.0) / float(pos * neg)


def roc_auc_ovr(scores: np.ndarray, labels: Sequence[int]) -> float:
    """Unweighted mean of one-vs-rest AUCs over the classes present."""
    S = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    if S.ndim != 2 or S.shape[0] != y.size:
        raise EvalError("need per-class score columns for multiclass AUC")
    classes = np.unique(y)
    if classes.size < 2:
        raise EvalError("both classes must be present")
    aucs = [roc_auc(S[:, c], (y == c).astype(int)) for c in classes]
    return float(np.mean(aucs))


def mae(predictions: Sequence[float], targets: Sequence[float]) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1 or p.size == 0:
        raise EvalError("predictions and targets must be equal-length non-empty vectors")
    return float(np.abs(p - t).mean())


@dataclass(frozen=True)
class EvalReport:
    per_fold_metric: tuple[float, ...]
    mean: float
    std: float
    metric: str
    config_digest: str
    probe_family: str = "l2-linear-gd"

    def to_json(self) -> str:
        return json.dumps(
            {
                "metric": self.metric,
                "per_fold": list(self.per_fold_metric),
                "mean": self.mean,
                "std": self.std,
                "probe_family": self.probe_family,
                "config_digest": self.config_digest,
            },
            indent=2,
        )

    def to_text(self) -> str:
        folds = "  ".join(f"{v:.4f}" for v in self.per_fold_metric)
        return (
            f"metric: {self.metric}\n"
            f"folds:  {folds}\n"
            f"result: {self.mean:.4f} ± {self.std:.4f}\n"
        )


def summarize_folds(values: Sequence[float], metric: str, config_digest: str = "") -> EvalReport:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return EvalReport(tuple(float(v) for v in arr), float(arr.mean()), std, metric, config_digest)


def _labels_by_user(dataset: Dataset) -> dict[str, int | float]:
    return {s.user_id: s.label for s in dataset.sequences if s.label is not None}


def _metric_name(task: Task) -> str:
    if task.kind is TaskKind.BINARY:
        return "roc_auc"
    if task.kind is TaskKind.MULTICLASS:
        return "roc_auc_macro_ovr"
    return "mae"


def _score_fold(
    probe: ProbeModel, X_test: np.ndarray, y_test: np.ndarray, task: Task
) -> float:
    scores = probe.scores(X_test)
    if task.kind is TaskKind.BINARY:
        return roc_auc(scores, y_test.astype(int))
    if task.kind is TaskKind.MULTICLASS:
        return roc_auc_ovr(scores, y_test.astype(int))
    return mae(scores, y_test)


def evaluate_cv(
    embeddings: EmbeddingMatrix,
    dataset: Dataset,
    plan: SplitPlan,
    probe_config: ProbeConfig = ProbeConfig(),
    label_override: dict[str, int | float] | None = None,
) -> EvalReport:
    """One probe per fold, trained on the other folds, all scored on the holdout."""
    labels = _labels_by_user(dataset) if label_override is None else label_override
    task = dataset.task

    index = {uid: i for i, uid in enumerate(embeddings.user_ids)}
    needed = list(plan.test_user_ids) + [uid for fold in plan.folds for uid in fold]
    missing = sorted(uid for uid in needed if uid not in index)
    if missing:
        raise EvalError(f"embeddings missing for users: {missing}")

    def block(uids: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        rows = [index[uid] for uid in uids]
        X = embeddings.matrix[rows].astype(np.float64)
        y = np.asarray([labels[uid] for uid in uids], dtype=np.float64)
        return X, y

    X_test, y_test = block(plan.test_user_ids)
    per_fold: list[float] = []
    for v in range(len(plan.folds)):
        train_uids = [uid for w, fold in enumerate(plan.folds) if w != v for uid in fold]
        if not train_uids:  # single-fold degenerate plan: train on the fold itself
            train_uids = list(plan.folds[v])
        X_train, y_train = block(train_uids)
        try:
            probe = fit_probe(X_train, y_train, task, probe_config)
        except EvalError as exc:
            raise EvalError(f"fold {v}: {exc}") from None
        per_fold.append(_score_fold(probe, X_test, y_test, task))

    digest = hashlib.sha256(
        json.dumps(
            {
                "l2": probe_config.l2,
                "max_iter": probe_config.max_iter,
                "grad_tol": probe_config.grad_tol,
                "seed": plan.seed,
                "n_folds": len(plan.folds),
                "metric": _metric_name(task),
            },
            sort_keys=True,
        ).encode()
    ).hexdigest()
    return summarize_folds(per_fold, _metric_name(task), digest)


@dataclass(frozen=True)
class AblationPoint:
    size: int
    mean: float
    std: float
    n_folds: int


def data_size_ablation(
    embeddings: EmbeddingMatrix,
    dataset: Dataset,
    plan: SplitPlan,
    sizes: Sequence[int],
    seed: int = 0,
    probe_config: ProbeConfig = ProbeConfig(),
) -> list[AblationPoint]:
    """Metric vs training-set size, on stratified subsamples of the train users.

    The full-size point reuses the plan verbatim, so it equals evaluate_cv
    exactly. Smaller sizes draw a seeded stratified subsample and rebuild
    min(5, size) folds over it; sizes below 2 cannot carry both classes and
    are rejected.
    """
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise EvalError("sizes must be ascending")
    train_uids = sorted(plan.train_user_ids)
    labels = _labels_by_user(dataset)
    n_folds_full = len(plan.folds)
    points: list[AblationPoint] = []
    for size in sizes:
        if size > len(train_uids):
            raise EvalError(f"size {size} exceeds {len(train_uids)} training users")
        if size == len(train_uids):
            sub_plan = plan
        else:
            if size < 2:
                raise EvalError("subsample sizes below 2 are not evaluable")
            rng = np.random.default_rng([seed, size])
            if dataset.task.is_classification:
                by_class: dict[int, list[str]] = {}
                for uid in train_uids:
                    by_class.setdefault(int(labels[uid]), []).append(uid)
                alloc = _largest_remainder(
                    {c: len(v) for c, v in by_class.items()}, size, size / len(train_uids)
                )
                chosen_by_class: dict[int, list[str]] = {}
                for c in sorted(by_class):
                    members = sorted(by_class[c])
                    rng.shuffle(members)
                    chosen_by_class[c] = members[: alloc[c]]
                n_folds = min(n_folds_full, size)
                if n_folds < n_folds_full:
                    log.warning("[datasize] size %d: folds reduced to %d", size, n_folds)
                folds = _spread_over_folds(chosen_by_class, n_folds, rng)
            else:
                members = list(train_uids)
                rng.shuffle(members)
                n_folds = min(n_folds_full, size)
                folds = _spread_over_folds({0: members[:size]}, n_folds, rng)
            sub_plan = SplitPlan(
                test_user_ids=plan.test_user_ids,
                folds=tuple(tuple(sorted(f)) for f in folds),
                seed=plan.seed,
            )
        report = evaluate_cv(embeddings, dataset, sub_plan, probe_config)
        points.append(AblationPoint(size, report.mean, report.std, len(sub_plan.folds)))
    return points
