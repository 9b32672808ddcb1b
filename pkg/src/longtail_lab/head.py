"""The linear classifier head ``z = h @ W + b`` and its checkpoint format.

A checkpoint is one JSON header line followed by W (row-major) and b as
little-endian float64.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .catalog import INF, ClassCatalog, GroupPartition, PlainLayout, assign_groups
from .errors import ConfigError, DataError

INIT_STD = 0.01
CHECKPOINT_FORMAT = "longtail-lab-head/1"


def layout_tag(layout) -> dict:
    if isinstance(layout, GroupPartition):
        return {"kind": "bags", **layout.to_dict()}
    return {"kind": "plain", "num_classes": layout.num_classes}


def layout_from_tag(tag: dict, catalog: ClassCatalog):
    if tag["kind"] == "plain":
        if tag["num_classes"] != catalog.num_classes:
            raise DataError(
                f"checkpoint has {tag['num_classes']} classes, dataset has {catalog.num_classes}"
            )
        return PlainLayout(catalog.num_classes)
    if tag["kind"] == "bags":
        bounds = [(lo, INF if hi is None else hi) for lo, hi in tag["boundaries"]]
        part = assign_groups(catalog, bounds)
        if [list(m) for m in part.members] != tag["members"]:
            raise DataError("checkpoint group membership does not match dataset catalog")
        return part
    raise DataError(f"unknown layout kind {tag['kind']!r}")


@dataclass(eq=False)
class HeadParams:
    W: np.ndarray  # (d, D)
    b: np.ndarray  # (D,)
    layout: object = field(repr=False)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ConfigError(f"bad parameter shapes W{self.W.shape} b{self.b.shape}")
        if self.W.shape[1] != self.layout.logit_dim:
            raise ConfigError(
                f"W has {self.W.shape[1]} columns but the layout needs {self.layout.logit_dim}"
            )

    @property
    def feature_dim(self) -> int:
        return self.W.shape[0]

    @property
    def is_bags(self) -> bool:
        return isinstance(self.layout, GroupPartition)

    def copy(self) -> "HeadParams":
        return HeadParams(self.W.copy(), self.b.copy(), self.layout, dict(self.meta))


def init(layout, feature_dim: int, seed: int) -> HeadParams:
    rng = np.random.default_rng(seed)
    W = INIT_STD * rng.standard_normal((feature_dim, layout.logit_dim))
    return HeadParams(W, np.zeros(layout.logit_dim), layout, {"seed": seed})


def forward(params: HeadParams, h: np.ndarray) -> np.ndarray:
    """Logits for one feature vector (d,) or a batch (n, d)."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != params.feature_dim:
        raise ConfigError(f"feature dimension {h.shape[-1]} != head dimension {params.feature_dim}")
    return h @ params.W + params.b


def column_norms(params: HeadParams) -> np.ndarray:
    return np.sqrt(np.sum(params.W**2, axis=0))


def weight_norms(params: HeadParams) -> dict[int, float]:
    """Norm of each category's column, keyed by category id (0 = background).

    Others nodes of a grouped head are left out; see ``others_norms``.
    """
    norms = column_norms(params)
    cols = params.layout.category_columns()
    return {j: float(norms[c]) for j, c in enumerate(cols)}


def others_norms(params: HeadParams) -> dict[int, float]:
    if not params.is_bags:
        return {}
    norms = column_norms(params)
    return {n: float(norms[c]) for n, c in enumerate(params.layout.others_columns())}


def save_checkpoint(params: HeadParams, path) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "layout": layout_tag(params.layout),
        "d": params.feature_dim,
        "D": params.layout.logit_dim,
        "seed": params.meta.get("seed"),
        "method": params.meta.get("method"),
    }
    if "variant" in params.meta:
        header["variant"] = params.meta["variant"]
    blob = np.concatenate([params.W.ravel(order="C"), params.b]).astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(blob)


def load_checkpoint(path, catalog: ClassCatalog) -> HeadParams:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    head, sep, blob = raw.partition(b"\n")
    try:
        header = json.loads(head)
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("unrecognized format")
        d, D = int(header["d"]), int(header["D"])
    except (ValueError, KeyError, TypeError) as e:
        raise DataError(f"corrupt checkpoint header in {path}: {e}") from e
    if len(blob) != 8 * (d * D + D):
        raise DataError(f"checkpoint blob has {len(blob)} bytes, expected {8 * (d * D + D)}")
    values = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    layout = layout_from_tag(header["layout"], catalog)
    meta = {"seed": header.get("seed"), "method": header.get("method")}
    if "variant" in header:
        meta["variant"] = header["variant"]
    return HeadParams(values[: d * D].reshape(d, D), values[d * D :].copy(), layout, meta)
