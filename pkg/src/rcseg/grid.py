"""Dense rasters, digital connectivity, and per-region intensity statistics.

A label raster assigns each pixel a small nonnegative integer: 0 is the single
background region (an open set that may be disconnected), positive values are
foreground regions. An intensity raster holds float64 values. Both are plain
C-order numpy arrays of dimension 2 or 3; all flat indices used across the
package refer to this C order.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

LABEL_DTYPE = np.int32

# Connectedness-compatible foreground/background adjacency pairs per dimension.
_VALID_PAIRS = {2: {4: 8, 8: 4}, 3: {6: 26, 26: 6}}
_FULL = {2: 8, 3: 26}


def validate_labels(labels: np.ndarray) -> np.ndarray:
    if labels.ndim not in (2, 3):
        raise ValueError(f"label raster must be 2-D or 3-D, got {labels.ndim}-D")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"label raster must be integer, got {labels.dtype}")
    if labels.size and labels.min() < 0:
        raise ValueError("label raster contains negative labels")
    return labels


def validate_image(image: np.ndarray) -> np.ndarray:
    if image.ndim not in (2, 3):
        raise ValueError(f"intensity raster must be 2-D or 3-D, got {image.ndim}-D")
    if not np.all(np.isfinite(image)):
        raise ValueError("intensity raster contains non-finite values")
    return image


@functools.lru_cache(maxsize=None)
def _offsets(ndim: int, count: int) -> np.ndarray:
    """Neighbor offsets for a given adjacency count (4/8 in 2-D, 6/26 in 3-D)."""
    grids = np.meshgrid(*([np.array([-1, 0, 1])] * ndim), indexing="ij")
    all_offsets = np.stack([g.ravel() for g in grids], axis=1)
    nonzero = all_offsets[np.any(all_offsets != 0, axis=1)]
    if count == _FULL[ndim]:
        out = nonzero
    else:
        out = nonzero[np.sum(np.abs(nonzero), axis=1) == 1]
    out = np.ascontiguousarray(out)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Connectivity:
    """A foreground/background adjacency pair that keeps contours well defined.

    Only the two pairings per dimension that avoid connectivity paradoxes are
    accepted: (8, 4) or (4, 8) in 2-D and (26, 6) or (6, 26) in 3-D. The
    default picks the full box neighborhood for foreground.
    """

    ndim: int
    foreground: int

    def __post_init__(self):
        if self.ndim not in _VALID_PAIRS:
            raise ValueError(f"unsupported dimension {self.ndim}")
        if self.foreground not in _VALID_PAIRS[self.ndim]:
            raise ValueError(
                f"foreground adjacency {self.foreground} invalid in {self.ndim}-D"
            )

    @classmethod
    def default(cls, ndim: int) -> "Connectivity":
        return cls(ndim, _FULL[ndim])

    @property
    def background(self) -> int:
        return _VALID_PAIRS[self.ndim][self.foreground]

    @property
    def fg_offsets(self) -> np.ndarray:
        return _offsets(self.ndim, self.foreground)

    @property
    def bg_offsets(self) -> np.ndarray:
        return _offsets(self.ndim, self.background)

    @property
    def fg_structure(self) -> np.ndarray:
        order = 1 if self.foreground != _FULL[self.ndim] else self.ndim
        return ndimage.generate_binary_structure(self.ndim, order)


def flood_fill_components(labels: np.ndarray, target: int, conn: Connectivity):
    """All connected components of ``target`` under the foreground adjacency.

    Returns a list of 1-D arrays of flat pixel indices, one per component,
    ordered by first-encountered pixel in raster order.
    """
    comp, n = ndimage.label(labels == target, structure=conn.fg_structure)
    flat = comp.ravel()
    return [np.flatnonzero(flat == k) for k in range(1, n + 1)]


def count_components(labels: np.ndarray, target: int, conn: Connectivity) -> int:
    return ndimage.label(labels == target, structure=conn.fg_structure)[1]


@dataclass
class RegionStats:
    """Sufficient statistics (count, sum, sum of squares) of one region."""

    label: int
    count: int = 0
    total: float = 0.0
    total_sq: float = 0.0

    def add(self, value: float) -> None:
        self.count += 1
        self.total += value
        self.total_sq += value * value

    def remove(self, value: float) -> None:
        if self.count == 0:
            raise ValueError(f"removing a pixel from empty region {self.label}")
        self.count -= 1
        self.total -= value
        self.total_sq -= value * value

    @property
    def mean(self) -> float:
        if self.count == 0:
            raise ValueError(f"mean of empty region {self.label} is undefined")
        return self.total / self.count


class StatsTable:
    """Region statistics for every label of a raster, indexed by label value.

    The table is sized once from the maximum label; the engine never creates
    labels beyond the initial set, so the size is fixed for a whole run.
    """

    def __init__(self, n_labels: int):
        self.n_labels = int(n_labels)
        self.count = np.zeros(self.n_labels, dtype=np.int64)
        self.total = np.zeros(self.n_labels, dtype=np.float64)
        self.total_sq = np.zeros(self.n_labels, dtype=np.float64)

    @classmethod
    def from_labels(cls, labels: np.ndarray, image: np.ndarray,
                    n_labels: int | None = None) -> "StatsTable":
        validate_labels(labels)
        if labels.shape != image.shape:
            raise ValueError("label and intensity rasters differ in shape")
        if n_labels is None:
            n_labels = int(labels.max()) + 1
        table = cls(n_labels)
        flat = labels.ravel()
        vals = image.ravel().astype(np.float64)
        table.count = np.bincount(flat, minlength=n_labels).astype(np.int64)
        table.total = np.bincount(flat, weights=vals, minlength=n_labels)
        table.total_sq = np.bincount(flat, weights=vals * vals, minlength=n_labels)
        return table

    def add(self, label: int, value: float) -> None:
        self.count[label] += 1
        self.total[label] += value
        self.total_sq[label] += value * value

    def remove(self, label: int, value: float) -> None:
        if self.count[label] == 0:
            raise ValueError(f"removing a pixel from empty region {label}")
        self.count[label] -= 1
        self.total[label] -= value
        self.total_sq[label] -= value * value

    def live_labels(self) -> np.ndarray:
        return np.flatnonzero(self.count > 0)

    def snapshot(self, label: int) -> RegionStats:
        return RegionStats(label, int(self.count[label]),
                           float(self.total[label]), float(self.total_sq[label]))
