"""Optimization, cross-validation and evaluation metrics."""

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import kernels
from . import model as M
from . import tensor as T
from .errors import ConfigError, NumericError
from .pathway_features import apply_zscore, column_stats

log = logging.getLogger(__name__)

METRICS = ("accuracy", "sensitivity", "specificity", "auc")


@dataclass
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    folds: int = 10
    normalize_pathways: bool = True
    path_loss_mode: str = "epoch"
    threshold: float = 0.5

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.path_loss_mode not in ("epoch", "batch"):
            raise ConfigError("path_loss_mode must be 'epoch' or 'batch'")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


# -- AdamW ----------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray


def adamw_step(theta, grad, state, lr, weight_decay, beta1, beta2, t, eps=1e-8):
    """One AdamW update. Weight decay is applied directly to ``theta``,
    decoupled from the bias-corrected Adam step. Returns the new array and
    updates ``state`` in place."""
    if t < 1:
        raise ValueError("step index t must be >= 1")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient passed to adamw_step")
    theta = theta - lr * weight_decay * theta
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**t)
    v_hat = state.v / (1.0 - beta2**t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    def __init__(self, tensors, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = tensors
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.state = {
            name: AdamState(np.zeros(t.shape), np.zeros(t.shape)) for name, t in tensors.items()
        }

    def step(self):
        self.t += 1
        for name, tensor in self.tensors.items():
            grad = tensor.grad if tensor.grad is not None else np.zeros(tensor.shape)
            try:
                tensor.data = adamw_step(
                    tensor.data, grad, self.state[name], self.lr, self.weight_decay,
                    self.beta1, self.beta2, self.t, self.eps,
                )
            except NumericError as exc:
                raise NumericError(f"{exc} (parameter {name!r}, step {self.t})") from None


# -- normalization and folds ------------------------------------------------------


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def normalize_imaging(features, train_idx):
    """Z-score every (ROI, feature) cell with training statistics.

    Returns the normalized array for all subjects and the statistics.
    """
    features = np.asarray(features, dtype=np.float64)
    n, r, d = features.shape
    flat = features.reshape(n, r * d)
    mean, std = column_stats(flat, train_idx)
    out = apply_zscore(flat, mean, std).reshape(n, r, d)
    return out, NormStats(mean.reshape(r, d), std.reshape(r, d))


@dataclass
class CohortSplit:
    folds: list
    stats: list = field(default_factory=list)

    def __len__(self):
        return len(self.folds)


def stratified_kfold(labels, k, seed):
    """Class-proportional folds.

    Each class is shuffled with ``seed`` and dealt round-robin over folds; the
    dealing position carries over between classes so fold sizes stay within
    one of each other. Returns a :class:`CohortSplit` of (train, test)
    index arrays, both sorted.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if k < 2:
        raise ConfigError("k must be >= 2")
    if k > n:
        raise ConfigError(f"k={k} folds requested for only {n} subjects")
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=np.int64)
    offset = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(len(members))]
        assignment[members] = (offset + np.arange(len(members))) % k
        offset = (offset + len(members)) % k
    folds = []
    for f in range(k):
        test = np.flatnonzero(assignment == f)
        train = np.flatnonzero(assignment != f)
        folds.append((train, test))
    return CohortSplit(folds)


# -- metrics --------------------------------------------------------------------


def auc_score(scores, labels):
    """Rank (Mann-Whitney) AUC with ties counted as one half; None if undefined."""
    value = kernels.rank_auc(np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=np.int64))
    return None if np.isnan(value) else float(value)


def compute_metrics(scores, labels, threshold=0.5):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pred = (scores >= threshold).astype(np.int64)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    n = len(labels)
    return {
        "accuracy": (tp + tn) / n if n else None,
        "sensitivity": tp / (tp + fn) if tp + fn else None,
        "specificity": tn / (tn + fp) if tn + fp else None,
        "auc": auc_score(scores, labels),
        "tp": tp,
        "tn": tn,
        "fp": fp,
        "fn": fn,
    }


def aggregate_metrics(per_fold):
    """Mean and population std across folds, skipping undefined values."""
    out = {}
    for name in METRICS:
        vals = [m[name] for m in per_fold if m.get(name) is not None]
        out[name] = {
            "mean": float(np.mean(vals)) if vals else None,
            "std": float(np.std(vals)) if vals else None,
            "n_folds": len(vals),
        }
    return out


# -- training -------------------------------------------------------------------


@dataclass
class TrainResult:
    params: M.ModelParams
    history: list
    delta: float


def _in_batch_pairs(labels, m, rng):
    pat = np.flatnonzero(labels == 1)
    nc = np.flatnonzero(labels == 0)
    if m == 0 or len(pat) == 0 or len(nc) == 0:
        return np.empty((0, 2), dtype=np.int64)
    return np.column_stack([rng.choice(pat, m), rng.choice(nc, m)])


def train_fold(p, img, y, model_config, train_config, seed=None):
    """Train one model on the given (already normalized) training subjects.

    Random draws come from one generator seeded with ``seed`` (default:
    ``train_config.seed``) in a fixed order: parameter init; then per epoch
    the subject permutation and the M patient and M control indices for the
    pathway-similarity pairs; then per batch the dropout masks and the two
    subjects for the sparsity penalty.
    """
    cfg, tc = model_config, train_config
    y = np.asarray(y, dtype=np.int64)
    pat, nc = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    if len(pat) == 0 or len(nc) == 0:
        raise ConfigError("training fold must contain both classes")
    rng = np.random.default_rng(tc.seed if seed is None else seed)
    params = M.ModelParams.init(cfg, rng)
    delta = cfg.delta if cfg.delta is not None else M.class_weight(y)
    opt = AdamW(params.tensors, tc.lr, tc.weight_decay, tc.beta1, tc.beta2, tc.adam_eps)
    n, bs, m = len(y), tc.batch_size, cfg.m_pairs
    history = []
    for epoch in range(tc.epochs):
        perm = rng.permutation(n)
        pair_pat = rng.choice(pat, m)
        pair_nc = rng.choice(nc, m)
        batches = [perm[i : i + bs] for i in range(0, n, bs)]
        sums = {"total": 0.0, "bce": 0.0, "sp": 0.0, "path": 0.0}
        for b, idx in enumerate(batches):
            params.zero_grad()
            out = M.forward(params, p[idx], img[idx], cfg, "train", rng)
            l_sp = M.loss_sparsity(out.attention, rng, cfg.q_sparsity, cfg.clamp_eps)
            l_path = None
            if tc.path_loss_mode == "epoch":
                if b == len(batches) - 1 and m > 0:
                    both = np.concatenate([pair_pat, pair_nc])
                    extra = M.forward(params, p[both], img[both], cfg, "train", rng)
                    pairs = np.column_stack([np.arange(m), np.arange(m) + m])
                    l_path = M.loss_path_similarity(extra.attention, pairs)
            else:
                pairs = _in_batch_pairs(y[idx], m, rng)
                if len(pairs):
                    l_path = M.loss_path_similarity(out.attention, pairs)
            total, parts = M.loss_total(out.logit, y[idx], l_sp, l_path, cfg, delta)
            T.backward(total)
            opt.step()
            for key in sums:
                sums[key] += parts[key]
        history.append({"epoch": epoch + 1, **sums})
    return TrainResult(params, history, delta)


def predict(params, p, img, config):
    """Eval-mode probabilities and attention matrices as numpy arrays."""
    with T.no_grad():
        out = M.forward(params, p, img, config, "eval")
    return out.scores(), out.attention.data


def evaluate(params, p, img, y, config, threshold=0.5):
    scores, attn = predict(params, p, img, config)
    return compute_metrics(scores, y, threshold), scores, attn


# -- cross-validation -------------------------------------------------------------


@dataclass
class CVDataset:
    """Aligned subjects with labels, imaging array and a pathway feature source.

    ``features`` must expose ``build(train_idx) -> PathwayMatrix`` whose rows
    follow ``subject_ids`` (see :mod:`neuropathx.pathway_features`).
    """

    subject_ids: list
    labels: np.ndarray
    imaging: np.ndarray
    roi_labels: list
    features: object

    @property
    def pathway_ids(self):
        return self.features.pathway_ids


@dataclass
class FoldResult:
    fold: int
    test_idx: np.ndarray
    metrics: dict
    scores: np.ndarray
    attention: np.ndarray
    history: list
    state: dict
    delta: float


@dataclass
class CVResult:
    folds: list
    aggregate: dict
    pathway_ids: list
    roi_labels: list
    subject_ids: list
    labels: np.ndarray

    def metrics_dict(self):
        return {
            "folds": [{"fold": f.fold, "n_test": int(len(f.test_idx)), "delta": f.delta,
                       **{k: f.metrics[k] for k in METRICS}} for f in self.folds],
            "aggregate": self.aggregate,
        }

    def attention_by_subject(self):
        out = {}
        for f in self.folds:
            for row, i in enumerate(f.test_idx):
                out[self.subject_ids[i]] = f.attention[row]
        return out


def _run_fold(dataset, model_config, train_config, fold, train_idx, test_idx):
    y = dataset.labels
    pm = dataset.features.build(train_idx)
    if list(pm.subject_ids) != list(dataset.subject_ids):
        raise ConfigError("pathway matrix rows do not follow the cohort order")
    if train_config.normalize_pathways:
        p_mean, p_std = column_stats(pm.scores, train_idx)
        p_all = apply_zscore(pm.scores, p_mean, p_std)
    else:
        p_mean, p_std = np.zeros(pm.scores.shape[1]), np.ones(pm.scores.shape[1])
        p_all = pm.scores
    img_all, img_stats = normalize_imaging(dataset.imaging, train_idx)
    n_p, (n_i, d) = p_all.shape[1], img_all.shape[1:]
    delta = model_config.delta if model_config.delta is not None else M.class_weight(y[train_idx])
    cfg = replace(model_config, n_pathways=n_p, n_rois=n_i, d=d, delta=delta)
    result = train_fold(
        p_all[train_idx], img_all[train_idx], y[train_idx], cfg, train_config,
        seed=train_config.seed + fold,
    )
    metrics, scores, attn = evaluate(
        result.params, p_all[test_idx], img_all[test_idx], y[test_idx], cfg, train_config.threshold
    )
    state = result.params.state_dict()
    state.update(
        {
            "norm.pathway_mean": p_mean,
            "norm.pathway_std": p_std,
            "norm.imaging_mean": img_stats.mean,
            "norm.imaging_std": img_stats.std,
        }
    )
    log.info("fold %d: auc=%s acc=%s", fold, metrics["auc"], metrics["accuracy"])
    return FoldResult(fold, test_idx, metrics, scores, attn, result.history, state, delta)


def _run_fold_packed(args):
    return _run_fold(*args)


def run_cv(dataset, model_config, train_config, out_dir=None, jobs=1):
    """Stratified k-fold training and testing with fold-local normalization.

    Each fold trains with seed ``train_config.seed + fold``. When ``out_dir``
    is given, metrics, loss history, checkpoints and per-subject test
    attention matrices are written there.
    """
    split = stratified_kfold(dataset.labels, train_config.folds, train_config.seed)
    tasks = [
        (dataset, model_config, train_config, f, tr, te) for f, (tr, te) in enumerate(split.folds)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_run_fold_packed, tasks))
    else:
        folds = [_run_fold(*t) for t in tasks]
    result = CVResult(
        folds,
        aggregate_metrics([f.metrics for f in folds]),
        list(dataset.pathway_ids),
        list(dataset.roi_labels),
        list(dataset.subject_ids),
        np.asarray(dataset.labels),
    )
    if out_dir is not None:
        write_cv_outputs(result, out_dir)
    return result


def _fmt17(x):
    return format(float(x), ".17g")


def write_attention(path, matrix, pathway_ids, roi_labels):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(["pathway_id"] + list(roi_labels)) + "\n")
        for pid, row in zip(pathway_ids, matrix):
            fh.write("\t".join([pid] + [_fmt17(v) for v in row]) + "\n")


def write_cv_outputs(result, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(result.metrics_dict(), fh, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, "history.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "epoch", "L_total", "L_bce", "L_sp", "L_path"])
        for f in result.folds:
            for h in f.history:
                w.writerow([f.fold, h["epoch"]] + [_fmt17(h[k]) for k in ("total", "bce", "sp", "path")])
    with open(os.path.join(out_dir, "predictions.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "fold", "label", "score"])
        for f in result.folds:
            for row, i in enumerate(f.test_idx):
                w.writerow([result.subject_ids[i], f.fold, int(result.labels[i]), _fmt17(f.scores[row])])
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    for f in result.folds:
        T.save_checkpoint(f.state, os.path.join(ckpt_dir, f"fold_{f.fold:02d}.npxw"))
        attn_dir = os.path.join(out_dir, "attn", str(f.fold))
        os.makedirs(attn_dir, exist_ok=True)
        for row, i in enumerate(f.test_idx):
            write_attention(
                os.path.join(attn_dir, f"{result.subject_ids[i]}.tsv"),
                f.attention[row], result.pathway_ids, result.roi_labels,
            )
