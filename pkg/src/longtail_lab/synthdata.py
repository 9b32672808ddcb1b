"""Deterministic synthetic long-tail proposal features.

Each foreground category gets a Gaussian prototype; its proposals are the
prototype plus isotropic noise. Prototypes share a common offset from the
origin (``objectness``) so that foreground is linearly distinguishable from
background on average. Background proposals come from a broad
zero-mean Gaussian covering the whole prototype cloud. Train proposals are
packed into pseudo-images so image-level samplers have something to act on.

On disk a dataset is a directory with ``manifest.json`` (config, catalog and
the record table) and ``features.bin`` (little-endian float32, row-major).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .catalog import BACKGROUND, ClassCatalog
from .errors import ConfigError, DataError

FORMAT = "longtail-lab-dataset/1"
MANIFEST = "manifest.json"
FEATURES = "features.bin"
EVAL_IMAGE_ID = -1


@dataclass(frozen=True)
class SynthConfig:
    num_foreground: int = 100
    feature_dim: int = 64
    zipf_exponent: float = 1.5
    min_count: int = 5
    max_count: int = 5000
    prototype_scale: float = 8.0
    objectness: float = 6.0
    noise_sigma: float = 4.0
    proposals_per_image: int = 16
    bg_fraction: float = 0.75
    eval_per_class: int = 20
    seed: int = 0

    def validate(self):
        if self.num_foreground < 1:
            raise ConfigError("num_foreground must be >= 1")
        if self.feature_dim < 2:
            raise ConfigError("feature_dim must be >= 2")
        if not 0 <= self.bg_fraction < 1:
            raise ConfigError("bg_fraction must lie in [0, 1)")
        if self.min_count < 1:
            raise ConfigError("min_count must be >= 1")
        if self.max_count < self.min_count:
            raise ConfigError("max_count must be >= min_count")
        if self.eval_per_class < 1:
            raise ConfigError("eval_per_class must be >= 1")
        if self.zipf_exponent < 0:
            raise ConfigError("zipf_exponent must be non-negative")
        if self.prototype_scale <= 0 or self.noise_sigma < 0:
            raise ConfigError("prototype_scale must be > 0 and noise_sigma >= 0")
        if self.proposals_per_image * (1 - self.bg_fraction) < 1:
            raise ConfigError("each pseudo-image needs room for at least one foreground proposal")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ProposalRecord:
    feature: np.ndarray
    label: int
    image_id: int


@dataclass(eq=False)
class Split:
    """Column-oriented proposal records."""

    features: np.ndarray  # (n, d) float64 holding float32-representable values
    labels: np.ndarray  # (n,) int64
    image_ids: np.ndarray  # (n,) int64

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        for h, y, i in zip(self.features, self.labels, self.image_ids):
            yield ProposalRecord(h, int(y), int(i))

    def subset(self, idx) -> "Split":
        return Split(self.features[idx], self.labels[idx], self.image_ids[idx])

    def __eq__(self, other):
        if not isinstance(other, Split):
            return NotImplemented
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.image_ids, other.image_ids)
        )


@dataclass(eq=False)
class Dataset:
    config: SynthConfig
    catalog: ClassCatalog
    train: Split
    eval: Split

    @property
    def feature_dim(self) -> int:
        return self.train.features.shape[1]

    def images(self) -> dict[int, np.ndarray]:
        """Train record indices grouped by pseudo-image id."""
        order = np.argsort(self.train.image_ids, kind="stable")
        ids, starts = np.unique(self.train.image_ids[order], return_index=True)
        return {int(i): chunk for i, chunk in zip(ids, np.split(order, starts[1:]))}

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.config == other.config
            and self.catalog == other.catalog
            and self.train == other.train
            and self.eval == other.eval
        )


def power_law_counts(config: SynthConfig) -> np.ndarray:
    """Counts max_count * r**-s for rank r = 1..C, rounded half up and clipped."""
    r = np.arange(1, config.num_foreground + 1, dtype=np.float64)
    raw = np.floor(config.max_count * r ** (-config.zipf_exponent) + 0.5)
    return np.clip(raw, config.min_count, config.max_count).astype(np.int64)


def zipf_exponent_for(num_foreground: int, min_count: int, max_count: int) -> float:
    """Exponent making rank C land exactly on min_count."""
    if num_foreground < 2:
        return 0.0
    return math.log(max_count / min_count) / math.log(num_foreground)


def _streams(seed: int):
    names = ("prototypes", "layout", "train_noise", "background", "eval")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def class_prototypes(config: SynthConfig) -> np.ndarray:
    """(C+1, d) prototypes; row 0 (background) is zero. float32-exact.

    Foreground prototypes are isotropic Gaussian around a common offset of
    length ``objectness * prototype_scale`` along the all-ones direction.
    """
    rng = _streams(config.seed)["prototypes"]
    d = config.feature_dim
    center = config.objectness * np.ones(d) / np.sqrt(d)
    protos = config.prototype_scale * (center + rng.standard_normal((config.num_foreground, d)))
    protos = np.vstack([np.zeros((1, config.feature_dim)), protos])
    return _f32(protos)


def _f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def _foreground_features(protos, labels, sigma, rng):
    noise = rng.standard_normal((len(labels), protos.shape[1]))
    return protos[labels] + sigma * noise


def _background_features(n, config, rng):
    scale = math.sqrt(config.prototype_scale**2 + config.noise_sigma**2)
    return scale * rng.standard_normal((n, config.feature_dim))


def _pack_images(counts, config, rng):
    """Label sequence and image id per train record.

    Foreground labels are laid out class by class (classes in random order)
    and cut into consecutive chunks, so each image sees one or two classes.
    """
    P = config.proposals_per_image
    per_image = P * (1 - config.bg_fraction)
    total_fg = int(counts.sum())
    num_images = max(1, int(math.floor(total_fg / per_image + 0.5)))
    base, extra = divmod(total_fg, num_images)
    if base + (extra > 0) > P:
        raise ConfigError("foreground does not fit into proposals_per_image")
    fg_sizes = np.full(num_images, base, dtype=np.int64)
    fg_sizes[rng.permutation(num_images)[:extra]] += 1

    class_order = rng.permutation(len(counts))
    fg_labels = np.concatenate([np.full(counts[c], c + 1, dtype=np.int64) for c in class_order])
    cuts = np.cumsum(fg_sizes)[:-1]

    labels, image_ids = [], []
    for img, chunk in enumerate(np.split(fg_labels, cuts)):
        labels.append(chunk)
        labels.append(np.full(P - len(chunk), BACKGROUND, dtype=np.int64))
        image_ids.append(np.full(P, img, dtype=np.int64))
    return np.concatenate(labels), np.concatenate(image_ids)


def generate(config: SynthConfig) -> Dataset:
    config.validate()
    rngs = _streams(config.seed)
    counts = power_law_counts(config)
    protos = class_prototypes(config)

    labels, image_ids = _pack_images(counts, config, rngs["layout"])
    feats = np.empty((len(labels), config.feature_dim))
    fg = labels != BACKGROUND
    feats[fg] = _foreground_features(protos, labels[fg], config.noise_sigma, rngs["train_noise"])
    feats[~fg] = _background_features(int((~fg).sum()), config, rngs["background"])
    train = Split(_f32(feats), labels, image_ids)

    C, E = config.num_foreground, config.eval_per_class
    n_bg_eval = int(math.floor(C * E * config.bg_fraction / (1 - config.bg_fraction) + 0.5))
    eval_labels = np.concatenate([np.repeat(np.arange(1, C + 1), E), np.zeros(n_bg_eval, dtype=np.int64)])
    eval_feats = np.empty((len(eval_labels), config.feature_dim))
    efg = eval_labels != BACKGROUND
    eval_rng = rngs["eval"]
    eval_feats[efg] = _foreground_features(protos, eval_labels[efg], config.noise_sigma, eval_rng)
    eval_feats[~efg] = _background_features(n_bg_eval, config, eval_rng)
    evals = Split(_f32(eval_feats), eval_labels, np.full(len(eval_labels), EVAL_IMAGE_ID))

    realized = np.bincount(train.labels, minlength=C + 1)[1:]
    catalog = ClassCatalog(tuple(int(c) for c in realized))
    return Dataset(config=config, catalog=catalog, train=train, eval=evals)


def serialize(dataset: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records = [[int(y), int(i), "train"] for y, i in zip(dataset.train.labels, dataset.train.image_ids)]
    records += [[int(y), int(i), "eval"] for y, i in zip(dataset.eval.labels, dataset.eval.image_ids)]
    manifest = {
        "format": FORMAT,
        "config": dataset.config.to_dict(),
        "catalog": dataset.catalog.to_dict(),
        "feature_dim": dataset.feature_dim,
        "records": records,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n")
    blob = np.vstack([dataset.train.features, dataset.eval.features]).astype("<f4")
    (path / FEATURES).write_bytes(blob.tobytes(order="C"))


def deserialize(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError as e:
        raise DataError(f"no dataset at {path}: {e}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DataError(f"corrupt manifest header in {path}: {e}") from e
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise DataError(f"corrupt manifest header in {path}: unrecognized format")
    try:
        config = SynthConfig.from_dict(manifest["config"])
        catalog = ClassCatalog.from_dict(manifest["catalog"])
        d = int(manifest["feature_dim"])
        table = manifest["records"]
        labels = np.array([r[0] for r in table], dtype=np.int64)
        image_ids = np.array([r[1] for r in table], dtype=np.int64)
        is_train = np.array([r[2] == "train" for r in table], dtype=bool)
    except (KeyError, TypeError, IndexError, ValueError) as e:
        raise DataError(f"corrupt manifest header in {path}: {e}") from e

    try:
        raw = (path / FEATURES).read_bytes()
    except FileNotFoundError as e:
        raise DataError(f"missing feature blob in {path}") from e
    expected = len(table) * d * 4
    if len(raw) < expected:
        raise DataError(f"truncated feature blob: {len(raw)} bytes, expected {expected}")
    if len(raw) != expected:
        raise DataError(
            f"dimension mismatch: blob holds {len(raw)} bytes but manifest describes "
            f"{len(table)} records of dimension {d} ({expected} bytes)"
        )
    feats = np.frombuffer(raw, dtype="<f4").reshape(len(table), d).astype(np.float64)

    if not is_train.any():
        raise DataError("dataset has an empty train split")
    if labels.size and (labels.min() < 0 or labels.max() > catalog.num_foreground):
        raise DataError(f"labels outside 0..{catalog.num_foreground}")
    if not np.isfinite(feats).all():
        raise DataError("non-finite feature values")
    train = Split(feats[is_train], labels[is_train], image_ids[is_train])
    evals = Split(feats[~is_train], labels[~is_train], image_ids[~is_train])
    realized = np.bincount(train.labels, minlength=catalog.num_classes)[1:]
    if tuple(int(c) for c in realized) != catalog.counts:
        raise DataError("catalog counts disagree with the train split")
    return Dataset(config=config, catalog=catalog, train=train, eval=evals)
