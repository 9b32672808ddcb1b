"""Category metadata, evaluation bins and the count-based group partition.

Category 0 is always background. Foreground categories are 1..C.
Bins and groups both use half-open count intervals ``[low, high)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

BACKGROUND = 0
NUM_BINS = 4
INF = math.inf

# Four groups, thresholds at 10, 100 and 1000 instances.
DEFAULT_BOUNDARIES = ((0, 10), (10, 100), (100, 1000), (1000, INF))


@dataclass(frozen=True)
class ClassCatalog:
    """Foreground categories 1..C with their training-instance counts."""

    counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if len(counts) < 1:
            raise ConfigError("catalog needs at least one foreground category")
        if any(c < 0 for c in counts):
            raise ConfigError("instance counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    @property
    def num_foreground(self) -> int:
        return len(self.counts)

    @property
    def num_classes(self) -> int:
        """Foreground categories plus background."""
        return len(self.counts) + 1

    def count(self, category: int) -> int:
        if not 1 <= category <= self.num_foreground:
            raise KeyError(category)
        return self.counts[category - 1]

    def count_array(self) -> np.ndarray:
        """Counts indexed by category id; entry 0 (background) is 0."""
        return np.asarray((0,) + self.counts, dtype=np.int64)

    def bins(self) -> dict[int, int]:
        return {j: bin_of(n) for j, n in enumerate(self.counts, start=1)}

    def bin_histogram(self) -> dict[int, int]:
        hist = {i: 0 for i in range(1, NUM_BINS + 1)}
        for b in self.bins().values():
            hist[b] += 1
        return hist

    def to_dict(self) -> dict:
        return {"num_foreground": self.num_foreground, "counts": list(self.counts)}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassCatalog":
        counts = d["counts"]
        if int(d["num_foreground"]) != len(counts):
            raise ConfigError(
                f"catalog declares {d['num_foreground']} categories but lists {len(counts)} counts"
            )
        return cls(tuple(counts))


def bin_of(count: int) -> int:
    """Evaluation bin for an instance count: bin i holds [10**(i-1), 10**i).

    Counts below 1 fall in bin 1 and anything from 1000 up is clamped to bin 4.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    if count < 1:
        return 1
    b = 1
    while b < NUM_BINS and count >= 10**b:
        b += 1
    return b


def boundaries_for(num_groups: int) -> tuple[tuple[float, float], ...]:
    """Contiguous boundaries splitting counts [1, 10**4) evenly in log space.

    ``num_groups=4`` reproduces ``DEFAULT_BOUNDARIES``; 8 halves every decade.
    """
    if num_groups < 1:
        raise ConfigError("need at least one group")
    edges = []
    for i in range(1, num_groups):
        e = 10 ** (4 * i / num_groups)
        edges.append(int(round(e)) if abs(e - round(e)) < 1e-9 else e)
    lows = [0] + edges
    highs = edges + [INF]
    return tuple(zip(lows, highs))


def _check_boundaries(boundaries) -> tuple[tuple[float, float], ...]:
    # JSON has no infinity; None stands for an open upper end.
    bounds = tuple((lo, INF if hi is None else hi) for lo, hi in boundaries)
    if not bounds:
        raise ConfigError("boundaries must not be empty")
    if bounds[0][0] != 0:
        raise ConfigError("first group must start at 0")
    if bounds[-1][1] != INF:
        raise ConfigError("last group must be open-ended (high = inf)")
    for (lo, hi), (nlo, _) in zip(bounds, bounds[1:]):
        if hi != nlo:
            raise ConfigError(f"boundaries not contiguous: {hi} != {nlo}")
    for lo, hi in bounds:
        if not lo < hi:
            raise ConfigError(f"empty group interval [{lo}, {hi})")
    return bounds


@dataclass(frozen=True)
class GroupPartition:
    """BAGS group structure over a catalog.

    Logit layout (flat index order): group 0 as (background, others), then
    each foreground group 1..N as its member categories in ascending id
    followed by that group's others node.
    """

    catalog: ClassCatalog
    boundaries: tuple[tuple[float, float], ...]
    members: tuple[tuple[int, ...], ...]  # members[n-1] for groups 1..N
    group_of: dict[int, int] = field(repr=False)
    slot_of: dict[int, int] = field(repr=False)

    @property
    def num_fg_groups(self) -> int:
        return len(self.members)

    @property
    def logit_dim(self) -> int:
        return self.catalog.num_classes + self.num_fg_groups + 1

    def others_slot(self, group: int) -> int:
        if group == 0:
            return 1
        return len(self.members[group - 1])

    @property
    def g0_layout(self) -> tuple[int, int]:
        """Flat indices of the (background, others) nodes of group 0."""
        return (0, 1)

    def group_slice(self, group: int) -> slice:
        """Flat logit range of a group, including its others node."""
        if group == 0:
            return slice(0, 2)
        start = 2
        for n in range(1, group):
            start += len(self.members[n - 1]) + 1
        return slice(start, start + len(self.members[group - 1]) + 1)

    def flat_index(self, node) -> int:
        return self.logit_layout()[node]

    def logit_layout(self) -> dict[tuple[str, int], int]:
        """Map ("category", j) and ("others", n) nodes onto flat indices."""
        layout = {("category", BACKGROUND): 0, ("others", 0): 1}
        idx = 2
        for n, mem in enumerate(self.members, start=1):
            for j in mem:
                layout[("category", j)] = idx
                idx += 1
            layout[("others", n)] = idx
            idx += 1
        return layout

    def category_columns(self) -> np.ndarray:
        """Flat column of each category id 0..C."""
        lay = self.logit_layout()
        return np.array([lay[("category", j)] for j in range(self.catalog.num_classes)])

    def others_columns(self) -> np.ndarray:
        """Flat column of the others node of groups 0..N."""
        lay = self.logit_layout()
        return np.array([lay[("others", n)] for n in range(self.num_fg_groups + 1)])

    def group_array(self) -> np.ndarray:
        """Group index per category id; background maps to 0."""
        g = np.zeros(self.catalog.num_classes, dtype=np.int64)
        for j, n in self.group_of.items():
            g[j] = n
        return g

    def to_dict(self) -> dict:
        return {
            "boundaries": [[lo, None if hi == INF else hi] for lo, hi in self.boundaries],
            "members": [list(m) for m in self.members],
        }


def assign_groups(catalog: ClassCatalog, boundaries=DEFAULT_BOUNDARIES) -> GroupPartition:
    """Place every foreground category in the group whose interval holds its count."""
    bounds = _check_boundaries(boundaries)
    members: list[list[int]] = [[] for _ in bounds]
    group_of, slot_of = {}, {}
    for j, n_j in enumerate(catalog.counts, start=1):
        for n, (lo, hi) in enumerate(bounds, start=1):
            if lo <= n_j < hi:
                group_of[j] = n
                slot_of[j] = len(members[n - 1])
                members[n - 1].append(j)
                break
    return GroupPartition(
        catalog=catalog,
        boundaries=bounds,
        members=tuple(tuple(m) for m in members),
        group_of=group_of,
        slot_of=slot_of,
    )


@dataclass(frozen=True)
class PlainLayout:
    """The (C+1)-way layout of an ordinary softmax head: column j is category j."""

    num_classes: int

    @property
    def logit_dim(self) -> int:
        return self.num_classes

    def category_columns(self) -> np.ndarray:
        return np.arange(self.num_classes)
