"""Loss kernels with analytic gradients with respect to the logits.

Every kernel takes a batch of logits ``(K, D)`` and returns the batch-mean
loss together with ``dlogits``, the gradient of that mean, so the caller can
backpropagate through the linear head directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .catalog import BACKGROUND, ClassCatalog, GroupPartition
from .errors import ConfigError

ALPHA_MIN, ALPHA_MAX = 0.01, 5.0


@dataclass
class LossResult:
    loss: float
    dlogits: np.ndarray
    per_proposal: np.ndarray = field(repr=False, default=None)


def softmax_probs(z: np.ndarray) -> np.ndarray:
    """Max-shifted softmax along the last axis."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_sigmoid(z):
    return -np.logaddexp(0.0, -np.asarray(z, dtype=np.float64))


def _check_labels(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ConfigError("labels must be a 1-d array")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ConfigError(f"labels must lie in 0..{num_classes - 1}")
    return labels


def softmax_ce(logits: np.ndarray, labels) -> LossResult:
    logits = np.asarray(logits, dtype=np.float64)
    K = logits.shape[0]
    labels = _check_labels(labels, logits.shape[1])
    rows = np.arange(K)
    per = -log_softmax(logits)[rows, labels]
    grad = softmax_probs(logits)
    grad[rows, labels] -= 1.0
    return LossResult(float(per.mean()), grad / K, per)


def compute_alpha(catalog: ClassCatalog) -> np.ndarray:
    """Inverse-frequency class weights, mean-normalized over the foreground and
    clipped to [0.01, 5]; background keeps weight 1."""
    counts = np.maximum(np.asarray(catalog.counts, dtype=np.float64), 1.0)
    alpha = 1.0 / counts
    alpha = np.clip(alpha / alpha.mean(), ALPHA_MIN, ALPHA_MAX)
    return np.concatenate([[1.0], alpha])


def reweight_softmax_ce(logits: np.ndarray, labels, alpha: np.ndarray) -> LossResult:
    base = softmax_ce(logits, labels)
    w = np.asarray(alpha, dtype=np.float64)[np.asarray(labels)]
    per = base.per_proposal * w
    return LossResult(float(per.mean()), base.dlogits * w[:, None], per)


def sigmoid_ce(logits: np.ndarray, targets: np.ndarray) -> LossResult:
    """Independent per-node binary cross entropy, summed over nodes."""
    logits = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    K = logits.shape[0]
    per_node = -(t * log_sigmoid(logits) + (1 - t) * log_sigmoid(-logits))
    per = per_node.sum(axis=1)
    return LossResult(float(per.mean()), (sigmoid(logits) - t) / K, per)


def g0_targets(labels) -> np.ndarray:
    """(background, foreground) one-hot targets for the background group."""
    fg = (np.asarray(labels) != BACKGROUND).astype(np.float64)
    return np.stack([1.0 - fg, fg], axis=1)


def g0_sigmoid_ce(logits2: np.ndarray, labels) -> LossResult:
    return sigmoid_ce(logits2, g0_targets(labels))


def sigmoid_focal_ce(logits: np.ndarray, labels, gamma: float = 2.0) -> LossResult:
    """Per-node sigmoid focal loss over one-hot targets, summed over nodes."""
    if gamma < 0:
        raise ConfigError("gamma must be non-negative")
    logits = np.asarray(logits, dtype=np.float64)
    K, D = logits.shape
    labels = _check_labels(labels, D)
    t = np.zeros_like(logits)
    t[np.arange(K), labels] = 1.0
    sign = 2.0 * t - 1.0
    sz = sign * logits
    log_pt = log_sigmoid(sz)
    pt = sigmoid(sz)
    one_minus = sigmoid(-sz)
    mod = one_minus**gamma
    per_node = -mod * log_pt
    grad = sign * mod * (gamma * pt * log_pt - one_minus)
    per = per_node.sum(axis=1)
    return LossResult(float(per.mean()), grad / K, per)


@dataclass
class ActivationPlan:
    """Which groups each proposal trains, and against which slot.

    ``active[k, n]`` says whether proposal k contributes a term for group n;
    ``targets[k, n]`` is the within-group slot it is scored against (-1 when
    inactive). ``sampled_others[n]`` lists proposals drafted as others for
    foreground group n.
    """

    active: np.ndarray  # (K, N+1) bool
    targets: np.ndarray  # (K, N+1) int
    sampled_others: list
    use_background: bool = True
    use_others: bool = True


def others_budget(beta: float, num_normal: int) -> int:
    """round-half-up(beta * number of in-group proposals in the batch)."""
    return int(np.floor(beta * num_normal + 0.5))


def plan_activations(
    labels,
    partition: GroupPartition,
    beta: float,
    rng: np.random.Generator,
    *,
    use_background: bool = True,
    use_others: bool = True,
) -> ActivationPlan:
    if beta < 0:
        raise ConfigError("beta must be non-negative")
    labels = _check_labels(labels, partition.catalog.num_classes)
    K, N = len(labels), partition.num_fg_groups
    group = partition.group_array()[labels]
    slot = np.array([partition.slot_of.get(int(y), -1) for y in labels], dtype=np.int64)

    active = np.zeros((K, N + 1), dtype=bool)
    targets = np.full((K, N + 1), -1, dtype=np.int64)
    if use_background:
        active[:, 0] = True
        targets[:, 0] = (labels != BACKGROUND).astype(np.int64)

    sampled = [np.zeros(0, dtype=np.int64)]
    for n in range(1, N + 1):
        normal = np.flatnonzero(group == n)
        picks = np.zeros(0, dtype=np.int64)
        if normal.size:
            active[normal, n] = True
            targets[normal, n] = slot[normal]
            if use_others:
                pool = np.flatnonzero(group != n)
                m = min(others_budget(beta, normal.size), pool.size)
                if m:
                    picks = np.sort(rng.choice(pool, size=m, replace=False))
                    active[picks, n] = True
                    targets[picks, n] = partition.others_slot(n)
        sampled.append(picks)
    return ActivationPlan(active, targets, sampled, use_background, use_others)


def bags_loss(
    logits: np.ndarray,
    labels,
    partition: GroupPartition,
    beta: float = 8.0,
    rng: np.random.Generator | None = None,
    *,
    plan: ActivationPlan | None = None,
    use_background: bool = True,
    use_others: bool = True,
) -> LossResult:
    """Balanced group softmax loss.

    Each activated foreground group contributes a softmax cross entropy over
    its slice (members plus the others node); the background group adds two
    independent sigmoid terms. Pass ``plan`` to hold the others sampling fixed.
    """
    logits = np.asarray(logits, dtype=np.float64)
    K, D = logits.shape
    if D != partition.logit_dim:
        raise ConfigError(f"logits have {D} columns, grouped layout needs {partition.logit_dim}")
    labels = _check_labels(labels, partition.catalog.num_classes)
    if plan is None:
        if rng is None:
            raise ConfigError("bags_loss needs an rng or a precomputed plan")
        plan = plan_activations(
            labels, partition, beta, rng, use_background=use_background, use_others=use_others
        )

    per = np.zeros(K)
    grad = np.zeros_like(logits)
    if plan.active[:, 0].any():
        rows = np.flatnonzero(plan.active[:, 0])
        g0 = partition.group_slice(0)
        res = g0_sigmoid_ce(logits[rows, g0], labels[rows])
        per[rows] += res.per_proposal
        grad[rows, g0] += res.dlogits * len(rows)

    for n in range(1, partition.num_fg_groups + 1):
        rows = np.flatnonzero(plan.active[:, n])
        if not rows.size:
            continue
        sl = partition.group_slice(n)
        if not plan.use_others:
            sl = slice(sl.start, sl.stop - 1)
        z = logits[rows, sl]
        t = plan.targets[rows, n]
        r = np.arange(len(rows))
        per[rows] -= log_softmax(z)[r, t]
        g = softmax_probs(z)
        g[r, t] -= 1.0
        grad[rows, sl] += g
    return LossResult(float(per.mean()), grad / K, per)
