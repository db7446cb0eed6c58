"""Smoothed-gradient machinery: interaction kernel, cell lists, contour filter.

The raw per-particle energy increments form a discrete L2 gradient. Filtering
them with a compactly supported kernel over nearby particles approximates a
first-order Sobolev gradient: each particle is pulled toward the locally
averaged increment of its own side of the contour minus that of the opposing
side. Support is strictly below half the length scale, so a cell list with
that edge makes the filter linear in the particle count.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SobolevParams:
    length_scale: float = 12.0   # kernel support is (-length_scale/2, length_scale/2)
    epsilon: float = 1.0 / 24.0  # weight of the derivative term in the metric

    def __post_init__(self):
        if self.length_scale <= 0:
            raise ValueError("length_scale must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @property
    def cutoff(self) -> float:
        return self.length_scale / 2.0


def kernel_eval(r, params: SobolevParams):
    """Evaluate the smoothing kernel at signed distance(s) ``r``.

    With epsilon = 1/24 the kernel decays to exactly zero at +-length_scale/2.
    Evaluation outside [-length_scale/2, length_scale/2] is a contract
    violation and raises.
    """
    r = np.asarray(r, dtype=np.float64)
    E = params.length_scale
    if np.any(np.abs(r) > E / 2.0):
        raise ValueError("kernel evaluated outside its support")
    u = np.abs(r) / E
    val = (1.0 + (u * u - u + 1.0 / 6.0) / (2.0 * params.epsilon)) / E
    if val.ndim == 0:
        return float(val)
    return val


class CellList:
    """Uniform bucket grid over integer particle coordinates.

    Bucket edge equals the interaction cutoff, so all partners of a particle
    live in the 3^d buckets around its own.
    """

    def __init__(self, coords: np.ndarray, edge: float):
        if coords.ndim != 2 or coords.shape[1] not in (2, 3):
            raise ValueError("coords must be (n, 2) or (n, 3)")
        if edge <= 0:
            raise ValueError("bucket edge must be positive")
        self.coords = np.asarray(coords, dtype=np.int64)
        self.edge = float(edge)
        cells = np.floor_divide(self.coords, self.edge).astype(np.int64)
        self._cells = cells
        self._buckets: dict[tuple, np.ndarray] = {}
        if len(cells):
            order = np.lexsort(cells.T[::-1])
            sorted_cells = cells[order]
            change = np.any(np.diff(sorted_cells, axis=0) != 0, axis=1)
            starts = np.concatenate([[0], np.flatnonzero(change) + 1, [len(order)]])
            for i in range(len(starts) - 1):
                key = tuple(sorted_cells[starts[i]].tolist())
                self._buckets[key] = order[starts[i]:starts[i + 1]]

    def __len__(self) -> int:
        return len(self.coords)

    def query(self, point, cutoff: float, exclude: int | None = None) -> np.ndarray:
        """Indices of particles strictly within ``cutoff`` of ``point``."""
        point = np.asarray(point, dtype=np.float64)
        cell = np.floor(point / self.edge).astype(np.int64)
        found = []
        for off in _cell_offsets(point.size):
            bucket = self._buckets.get(tuple((cell + off).tolist()))
            if bucket is not None:
                found.append(bucket)
        if not found:
            return np.empty(0, dtype=np.int64)
        cand = np.concatenate(found)
        d2 = np.sum((self.coords[cand] - point) ** 2, axis=1)
        keep = cand[d2 < cutoff * cutoff]
        if exclude is not None:
            keep = keep[keep != exclude]
        return np.sort(keep)

    def pairs(self, cutoff: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All ordered pairs (p, q) with d(p, q) < cutoff, including p == q.

        Returns (p_idx, q_idx, distance). Squared distances are integers, so
        the strict cutoff test is exact.
        """
        pi_parts, qi_parts = [], []
        keys = list(self._buckets.keys())
        for key in keys:
            mine = self._buckets[key]
            for off in _cell_offsets(self.coords.shape[1]):
                other = self._buckets.get(tuple(k + o for k, o in zip(key, off)))
                if other is None:
                    continue
                pi_parts.append(np.repeat(mine, len(other)))
                qi_parts.append(np.tile(other, len(mine)))
        if not pi_parts:
            e = np.empty(0, dtype=np.int64)
            return e, e, np.empty(0, dtype=np.float64)
        pi = np.concatenate(pi_parts)
        qi = np.concatenate(qi_parts)
        d2 = np.sum((self.coords[pi] - self.coords[qi]) ** 2, axis=1)
        keep = d2 < cutoff * cutoff
        return pi[keep], qi[keep], np.sqrt(d2[keep].astype(np.float64))


@functools.lru_cache(maxsize=None)
def _cell_offsets(ndim: int) -> tuple:
    rng = np.array([-1, 0, 1])
    grids = np.meshgrid(*([rng] * ndim), indexing="ij")
    offs = np.stack([g.ravel() for g in grids], axis=1)
    return tuple(tuple(int(v) for v in row) for row in offs)


def build_cell_list(coords: np.ndarray, params: SobolevParams) -> CellList:
    return CellList(coords, params.cutoff)


def sobolev_filter(coords: np.ndarray, owners: np.ndarray, competitors: np.ndarray,
                   raw: np.ndarray, params: SobolevParams,
                   cells: CellList | None = None) -> np.ndarray:
    """Two-sided kernel smoothing of per-particle increments.

    For particle p the output is the kernel-weighted average of raw increments
    over same-side particles q (owner label equal to p's owner, p included)
    minus the average over opposing particles (competing label equal to p's
    owner). Either side may be empty and then contributes zero. The result is
    bitwise independent of particle storage order.
    """
    owners = np.asarray(owners, dtype=np.int64)
    competitors = np.asarray(competitors, dtype=np.int64)
    raw = np.asarray(raw, dtype=np.float64)
    n = len(raw)
    if cells is None:
        cells = build_cell_list(coords, params)
    pi, qi, dist = cells.pairs(params.cutoff)
    # canonical pair order: summation must not depend on storage order
    flat = np.ravel_multi_index(
        tuple(cells.coords[:, k] for k in range(cells.coords.shape[1])),
        tuple(int(cells.coords[:, k].max()) + 1 for k in range(cells.coords.shape[1]))
    ) if n else np.empty(0, dtype=np.int64)
    order = np.lexsort((competitors[qi], flat[qi], competitors[pi], flat[pi]))
    pi, qi, dist = pi[order], qi[order], dist[order]
    weight = kernel_eval(dist, params) if len(dist) else np.empty(0)
    contrib = weight * raw[qi]
    same = owners[qi] == owners[pi]
    opp = competitors[qi] == owners[pi]
    same_sum = np.zeros(n)
    opp_sum = np.zeros(n)
    np.add.at(same_sum, pi[same], contrib[same])
    np.add.at(opp_sum, pi[opp], contrib[opp])
    same_cnt = np.bincount(pi[same], minlength=n)
    opp_cnt = np.bincount(pi[opp], minlength=n)
    out = np.where(same_cnt > 0, same_sum / np.maximum(same_cnt, 1), 0.0)
    out -= np.where(opp_cnt > 0, opp_sum / np.maximum(opp_cnt, 1), 0.0)
    return out


def detect_oscillation(energies, moves, window: int = 10,
                       tol_rel: float = 1e-6) -> bool:
    """True when recent iterations churn without making progress.

    Fires iff the last ``window`` iterations all accepted moves yet the total
    energy failed to decrease by more than tol_rel * |current energy| over the
    window. Histories shorter than the window never fire.
    """
    if len(energies) < window or window < 2:
        return False
    e = list(energies[-window:])
    m = list(moves[-window:])
    if min(m) <= 0:
        return False
    threshold = tol_rel * abs(e[-1])
    return (e[0] - e[-1]) <= threshold
