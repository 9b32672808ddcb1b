"""Turn trained heads into per-proposal score vectors over categories 0..C."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import head as head_mod
from .catalog import BACKGROUND, GroupPartition
from .errors import ConfigError, DataError
from .losses import sigmoid, softmax_probs
from .synthdata import Split


@dataclass(eq=False)
class ScoreVector:
    """Scores indexed by category id, one row per proposal when batched.

    ``normalized`` is False when rows are not meant to sum to one.
    """

    scores: np.ndarray
    normalized: bool = True

    def argmax(self):
        return np.argmax(self.scores, axis=-1)


def softmax_predict(logits) -> ScoreVector:
    return ScoreVector(softmax_probs(logits), True)


def sigmoid_predict(logits) -> ScoreVector:
    return ScoreVector(sigmoid(logits), False)


def bags_predict(
    logits, partition: GroupPartition, *, use_background: bool = True, use_others: bool = True
) -> ScoreVector:
    """Per-group softmax, others nodes dropped, foreground rescaled by the
    background group's foreground probability.

    Without the background group the background score is the product of the
    groups' others probabilities (no group claims the proposal); with neither
    component background is never scored.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if z.shape[1] != partition.logit_dim:
        raise ConfigError(f"logits have {z.shape[1]} columns, grouped layout needs {partition.logit_dim}")
    scores = np.zeros((z.shape[0], partition.catalog.num_classes))
    not_claimed = np.ones(z.shape[0])
    for n, members in enumerate(partition.members, start=1):
        sl = partition.group_slice(n)
        if not use_others:
            sl = slice(sl.start, sl.stop - 1)
        if sl.stop == sl.start:
            continue
        p = softmax_probs(z[:, sl])
        if members:
            scores[:, list(members)] = p[:, : len(members)]
        if use_others:
            not_claimed *= p[:, -1]
    if use_background:
        fg_prob = sigmoid(z[:, partition.g0_layout[1]])
        scores *= fg_prob[:, None]
        scores[:, BACKGROUND] = 1.0 - fg_prob
    elif use_others:
        scores[:, BACKGROUND] = not_claimed
    if np.ndim(logits) == 1:
        scores = scores[0]
    return ScoreVector(scores, False)


def predict(params: head_mod.HeadParams, features) -> ScoreVector:
    """Scores from a trained head, using the rule that matches how it was trained."""
    z = head_mod.forward(params, features)
    if params.is_bags:
        variant = params.meta.get("variant", {})
        return bags_predict(
            z,
            params.layout,
            use_background=variant.get("background", True),
            use_others=variant.get("others", True),
        )
    if params.meta.get("method") == "focal":
        return sigmoid_predict(z)
    return softmax_predict(z)


def tau_normalize(params: head_mod.HeadParams, tau: float = 1.0) -> head_mod.HeadParams:
    """Divide each foreground column by its norm to the power tau.

    The background column, the bias and zero columns are left alone.
    """
    if params.is_bags:
        raise ConfigError("tau normalization applies to plain softmax heads")
    if not 0 <= tau <= 1:
        raise ConfigError("tau must lie in [0, 1]")
    out = params.copy()
    norms = head_mod.column_norms(params)
    scale = np.ones_like(norms)
    fg = np.arange(len(norms)) != BACKGROUND
    nz = fg & (norms > 0)
    scale[nz] = norms[nz] ** tau
    out.W = params.W / scale
    out.meta["tau"] = tau
    return out


def tau_select_predict(baseline: head_mod.HeadParams, tau_params: head_mod.HeadParams, features) -> ScoreVector:
    """Keep the baseline's scores where it calls background, else use the tau-normalized head."""
    if baseline.layout != tau_params.layout:
        raise ConfigError("baseline and tau-normalized heads must share a layout")
    base = softmax_predict(head_mod.forward(baseline, features)).scores
    tau = softmax_predict(head_mod.forward(tau_params, features)).scores
    is_bg = np.argmax(base, axis=-1) == BACKGROUND
    return ScoreVector(np.where(np.expand_dims(is_bg, -1), base, tau), True)


def ncm_build(split: Split, num_foreground: int) -> np.ndarray:
    """(C, d) mean train feature of each foreground category; row j-1 is category j."""
    means = np.empty((num_foreground, split.features.shape[1]))
    for j in range(1, num_foreground + 1):
        rows = split.features[split.labels == j]
        if not len(rows):
            raise DataError(f"category {j} has no train records")
        means[j - 1] = rows.mean(axis=0)
    return means


def ncm_similarities(features, means) -> np.ndarray:
    h = np.atleast_2d(np.asarray(features, dtype=np.float64))
    hn = np.linalg.norm(h, axis=1, keepdims=True)
    if np.any(hn == 0):
        raise ConfigError("cannot take cosine similarity of a zero feature")
    mn = np.linalg.norm(means, axis=1, keepdims=True)
    mn[mn == 0] = 1.0
    return (h / hn) @ (means / mn).T


def ncm_predict(features, means, bg_prob) -> ScoreVector:
    """Softmax over cosine similarities to class means, scaled by 1 - bg_prob;
    background gets bg_prob."""
    p0 = np.asarray(bg_prob, dtype=np.float64)
    if np.any((p0 < 0) | (p0 > 1)):
        raise ConfigError("background probability must lie in [0, 1]")
    sims = ncm_similarities(features, means)
    pn = softmax_probs(sims) * (1.0 - np.atleast_1d(p0))[:, None]
    scores = np.hstack([np.atleast_1d(p0)[:, None] * np.ones((len(sims), 1)), pn])
    if np.ndim(features) == 1:
        scores = scores[0]
    return ScoreVector(scores, True)
