"""Mini-batch SGD over a frozen feature set; only the linear head moves."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import head as head_mod
from . import losses
from .catalog import BACKGROUND, ClassCatalog, GroupPartition, bin_of
from .errors import ConfigError, DataError, NumericalError
from .synthdata import Dataset, Split

METHODS = ("softmax", "bags", "reweight", "focal", "tail_finetune")
SAMPLERS = ("uniform", "rfs")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "softmax"
    epochs: int = 12
    batch_size: int = 512
    lr: float = 0.01
    lr_decay_epochs: tuple = (8, 11)
    lr_decay_factor: float = 0.1
    warmup_steps: int = 500
    warmup_ratio: float = 1.0 / 3.0
    weight_decay: float = 1e-4
    beta: float = 8.0
    gamma: float = 2.0
    sampler: str = "uniform"
    rfs_t: float = 0.001
    tail_bin: int = 2
    bags_background: bool = True
    bags_others: bool = True
    seed: int = 0

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"unknown sampler {self.sampler!r}; valid: {', '.join(SAMPLERS)}")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.beta < 0 or self.gamma < 0:
            raise ConfigError("beta and gamma must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "lr_decay_epochs" in d:
            d["lr_decay_epochs"] = tuple(d["lr_decay_epochs"])
        return cls(**d)


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)
    epoch_lr: list = field(default_factory=list)
    steps: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def epoch_lr(config: TrainConfig, epoch: int) -> float:
    """Scheduled rate for a 1-indexed epoch, ignoring warmup."""
    passed = sum(1 for e in config.lr_decay_epochs if epoch >= e)
    return config.lr * config.lr_decay_factor**passed


def step_lr(config: TrainConfig, epoch: int, step: int) -> float:
    """Rate at a global 0-indexed step: the epoch rate under linear warmup."""
    lr = epoch_lr(config, epoch)
    if step < config.warmup_steps:
        r = config.warmup_ratio
        lr *= r + (1.0 - r) * step / config.warmup_steps
    return lr


def image_category_sets(dataset: Dataset) -> dict[int, set]:
    return {
        img: set(int(y) for y in dataset.train.labels[idx] if y != BACKGROUND)
        for img, idx in dataset.images().items()
    }


def rfs_repeat_factors(dataset_or_images, t: float = 0.001) -> dict[int, float]:
    """Per-image repeat factor max(1, max over its categories of sqrt(t / f(c))).

    ``f(c)`` is the fraction of images containing category c. Accepts a
    Dataset or a mapping image id -> set of categories present.
    """
    images = dataset_or_images
    if isinstance(images, Dataset):
        images = image_category_sets(images)
    num_images = len(images)
    freq: dict[int, int] = {}
    for cats in images.values():
        for c in cats:
            freq[c] = freq.get(c, 0) + 1
    cat_factor = {c: max(1.0, math.sqrt(t / (n / num_images))) for c, n in freq.items()}
    return {img: max([1.0] + [cat_factor[c] for c in cats]) for img, cats in images.items()}


def rfs_expand(factors: dict[int, float], rng: np.random.Generator) -> list[int]:
    """Epoch image list: floor(r) copies of each image plus one more with
    probability frac(r)."""
    ids = sorted(factors)
    r = np.array([factors[i] for i in ids])
    whole = np.floor(r).astype(np.int64)
    whole += rng.random(len(r)) < (r - whole)
    return [i for i, k in zip(ids, whole) for _ in range(k)]


def tail_record_mask(dataset: Dataset, catalog: ClassCatalog, threshold_bin: int = 2) -> np.ndarray:
    """Boolean mask over train records: background or a category in a bin <= threshold_bin."""
    if threshold_bin not in (1, 2):
        raise ConfigError("threshold_bin must be 1 or 2")
    keep_cat = np.zeros(catalog.num_classes, dtype=bool)
    for j, n in enumerate(catalog.counts, start=1):
        keep_cat[j] = bin_of(n) <= threshold_bin
    if not keep_cat.any():
        raise DataError(f"no categories fall in bins <= {threshold_bin}")
    keep_cat[BACKGROUND] = True
    return keep_cat[dataset.train.labels]


def tail_finetune_filter(dataset: Dataset, catalog: ClassCatalog, threshold_bin: int = 2) -> Split:
    """Train records that are background or belong to a bin <= threshold_bin."""
    return dataset.train.subset(np.flatnonzero(tail_record_mask(dataset, catalog, threshold_bin)))


class _Objective:
    """Loss dispatch for one method; carries any per-run state."""

    def __init__(self, config: TrainConfig, layout, catalog: ClassCatalog, rng):
        self.config = config
        self.layout = layout
        self.rng = rng
        self.alpha = losses.compute_alpha(catalog) if config.method == "reweight" else None

    def __call__(self, logits, labels) -> losses.LossResult:
        m = self.config.method
        if m == "bags":
            return losses.bags_loss(
                logits,
                labels,
                self.layout,
                self.config.beta,
                self.rng,
                use_background=self.config.bags_background,
                use_others=self.config.bags_others,
            )
        if m == "reweight":
            return losses.reweight_softmax_ce(logits, labels, self.alpha)
        if m == "focal":
            return losses.sigmoid_focal_ce(logits, labels, self.config.gamma)
        return losses.softmax_ce(logits, labels)


def sgd_step(params, h, dlogits, lr, weight_decay):
    """In-place update; weight decay applies to W only."""
    dW = h.T @ dlogits
    db = dlogits.sum(axis=0)
    params.W -= lr * (dW + weight_decay * params.W)
    params.b -= lr * db


def train(dataset: Dataset, layout, config: TrainConfig, init_params=None):
    """Train a head on ``dataset.train``; returns ``(params, history)``.

    ``tail_finetune`` continues from ``init_params`` on the tail-filtered split;
    every other method starts from a fresh random head.
    """
    config.validate()
    is_grouped = isinstance(layout, GroupPartition)
    if (config.method == "bags") != is_grouped:
        raise ConfigError(f"method {config.method!r} does not match layout {type(layout).__name__}")
    if is_grouped and layout.catalog != dataset.catalog:
        raise ConfigError("group partition was built for a different catalog")
    if not is_grouped and layout.num_classes != dataset.catalog.num_classes:
        raise ConfigError("layout does not match the dataset catalog")

    seeds = np.random.SeedSequence(config.seed).spawn(3)
    order_rng, loss_rng = np.random.default_rng(seeds[1]), np.random.default_rng(seeds[2])

    X, Y = dataset.train.features, dataset.train.labels
    keep = None
    if config.method == "tail_finetune":
        if init_params is None:
            raise ConfigError("tail_finetune needs a trained baseline to start from")
        keep = tail_record_mask(dataset, dataset.catalog, config.tail_bin)
        if not np.any(Y[keep] != BACKGROUND):
            raise DataError("tail filter left no foreground records")
    if init_params is not None:
        if init_params.layout != layout:
            raise ConfigError("initial parameters use a different layout")
        params = init_params.copy()
    else:
        params = head_mod.init(layout, dataset.feature_dim, int(seeds[0].generate_state(1)[0]))
    params.meta.update(seed=config.seed, method=config.method)
    if is_grouped:
        params.meta["variant"] = {"background": config.bags_background, "others": config.bags_others}

    objective = _Objective(config, layout, dataset.catalog, loss_rng)
    if config.sampler == "rfs":
        images = dataset.images()
        factors = rfs_repeat_factors(image_category_sets(dataset), config.rfs_t)
    base_order = np.arange(len(Y)) if keep is None else np.flatnonzero(keep)

    history = TrainHistory()
    step = 0
    for epoch in range(1, config.epochs + 1):
        if config.sampler == "rfs":
            order = np.concatenate([images[i] for i in rfs_expand(factors, order_rng)])
            if keep is not None:
                order = order[keep[order]]
        else:
            order = base_order
        order = order_rng.permutation(order)

        total, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            h, y = X[idx], Y[idx]
            res = objective(head_mod.forward(params, h), y)
            if not math.isfinite(res.loss):
                raise NumericalError(f"non-finite loss at step {step}", step=step)
            sgd_step(params, h, res.dlogits, step_lr(config, epoch, step), config.weight_decay)
            total += res.loss * len(idx)
            seen += len(idx)
            step += 1
        history.epoch_loss.append(total / seen)
        history.epoch_lr.append(epoch_lr(config, epoch))
    history.steps = step
    if not (np.isfinite(params.W).all() and np.isfinite(params.b).all()):
        raise NumericalError(f"non-finite parameters after step {step}", step=step)
    return params, history
