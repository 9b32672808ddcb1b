"""Classification-level diagnostics: per-bin accuracy, background accuracy,
weight-norm profiles and the norm/count correlation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .catalog import BACKGROUND, NUM_BINS, ClassCatalog, bin_of
from .errors import ConfigError, DataError
from .synthdata import Split

NORMS_HEADER = ("category_id", "train_count", "weight_norm")
BIN_AGGREGATION = "macro"


@dataclass
class MetricsReport:
    overall_acc: float
    acc_per_bin: dict  # "1".."4" -> accuracy; bins without classes are absent
    acc_bg: float | None
    per_class_acc: dict
    weight_norms: dict | None = None
    pearson_norm_logcount: float | None = None
    method: str = ""
    config: dict = field(default_factory=dict)
    bin_aggregation: str = BIN_AGGREGATION

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def bin_acc(self, b: int):
        return self.acc_per_bin.get(str(b))


def evaluate(predictor, split: Split, catalog: ClassCatalog, *, weight_norms=None, method="", config=None):
    """Score ``split`` with ``predictor`` (features -> ScoreVector or score array).

    Per-bin accuracy is the unweighted mean of per-class accuracies in the bin;
    overall accuracy is over all records.
    """
    if not len(split):
        raise DataError("evaluation split is empty")
    out = predictor(split.features)
    scores = getattr(out, "scores", out)
    pred = np.argmax(scores, axis=1)
    correct = pred == split.labels

    per_class = {}
    for j in range(catalog.num_classes):
        mask = split.labels == j
        if mask.any():
            per_class[str(j)] = float(correct[mask].mean())

    by_bin: dict[int, list] = {b: [] for b in range(1, NUM_BINS + 1)}
    for j, n in enumerate(catalog.counts, start=1):
        if str(j) in per_class:
            by_bin[bin_of(n)].append(per_class[str(j)])
    acc_per_bin = {str(b): float(np.mean(v)) for b, v in by_bin.items() if v}

    report = MetricsReport(
        overall_acc=float(correct.mean()),
        acc_per_bin=acc_per_bin,
        acc_bg=per_class.get(str(BACKGROUND)),
        per_class_acc=per_class,
        method=method,
        config=config or {},
    )
    if weight_norms is not None:
        report.weight_norms = {str(k): v for k, v in weight_norms.items()}
        try:
            report.pearson_norm_logcount = norm_count_correlation(weight_norms, catalog)
        except ConfigError:
            report.pearson_norm_logcount = None
    return report


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    # Spread at rounding level (e.g. unit-normalized columns) counts as zero variance.
    for v, c in ((x, xc), (y, yc)):
        if np.abs(c).max(initial=0.0) <= 1e-12 * max(np.abs(v).max(initial=0.0), 1e-300):
            raise ConfigError("correlation undefined: zero variance")
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    return float(xc @ yc) / denom


def norm_count_correlation(weight_norms: dict, catalog: ClassCatalog) -> float:
    """Pearson correlation of foreground column norms with log(1 + count)."""
    ids = range(1, catalog.num_classes)
    if catalog.num_foreground < 3:
        raise ConfigError("need at least three foreground categories")
    norms = [weight_norms[j] for j in ids]
    logc = [math.log1p(catalog.count(j)) for j in ids]
    return pearson(norms, logc)


def bin_mean_norms(weight_norms: dict, catalog: ClassCatalog) -> dict[int, float]:
    by_bin: dict[int, list] = {}
    for j, n in enumerate(catalog.counts, start=1):
        by_bin.setdefault(bin_of(n), []).append(weight_norms[j])
    return {b: float(np.mean(v)) for b, v in sorted(by_bin.items())}


def export_norms(weight_norms: dict, catalog: ClassCatalog, path) -> None:
    """CSV of (category_id, train_count, weight_norm), most frequent first."""
    rows = sorted(range(1, catalog.num_classes), key=lambda j: (-catalog.count(j), j))
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(NORMS_HEADER)
        for j in rows:
            w.writerow([j, catalog.count(j), repr(float(weight_norms[j]))])


def read_norms(path) -> list[tuple[int, int, float]]:
    with open(Path(path), newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if tuple(header) != NORMS_HEADER:
            raise DataError(f"unexpected norms header {header}")
        return [(int(a), int(b), float(c)) for a, b, c in r]
