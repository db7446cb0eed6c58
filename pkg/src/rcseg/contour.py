"""Contour particles and topology-safe single-pixel moves.

A particle is a candidate relabeling of one pixel: it is keyed by the flat
pixel index and the competing label. A pixel carries one particle per distinct
neighbor label under the background adjacency, which is the adjacency that
defines where the contour sits. Background pixels next to foreground carry
growth particles (owner 0); foreground pixels next to anything else carry
shrink or handover particles.
"""
from __future__ import annotations

import functools

import numpy as np
from scipy import ndimage

from .grid import Connectivity, validate_labels


class StaleParticleError(RuntimeError):
    """The particle's stored labels no longer match the raster."""


class ContourState:
    """Particle set indexed by pixel: flat index -> set of competing labels."""

    def __init__(self):
        self._competitors: dict[int, set[int]] = {}

    def __len__(self) -> int:
        return sum(len(c) for c in self._competitors.values())

    def competitors_at(self, pixel: int) -> frozenset:
        return frozenset(self._competitors.get(pixel, ()))

    def set_pixel(self, pixel: int, competitors: set[int]) -> None:
        if competitors:
            self._competitors[pixel] = set(competitors)
        else:
            self._competitors.pop(pixel, None)

    def as_key_set(self) -> set[tuple[int, int]]:
        return {(x, c) for x, comps in self._competitors.items() for c in comps}

    def as_arrays(self, labels: np.ndarray):
        """Snapshot (pixels, owners, competitors) as flat int64 arrays."""
        n = len(self)
        xs = np.empty(n, dtype=np.int64)
        cs = np.empty(n, dtype=np.int64)
        i = 0
        for x, comps in self._competitors.items():
            for c in comps:
                xs[i] = x
                cs[i] = c
                i += 1
        owners = labels.ravel()[xs].astype(np.int64)
        return xs, owners, cs

    def pixels_of_region(self, label: int, labels: np.ndarray) -> np.ndarray:
        """Contour pixels owned by one region (scan over the particle set)."""
        flat = labels.ravel()
        return np.array(sorted(x for x in self._competitors if flat[x] == label),
                        dtype=np.int64)


def _neighbor_labels(labels: np.ndarray, coord: tuple, offsets: np.ndarray):
    """Labels of the in-bounds neighbors of one pixel, as a python list."""
    out = []
    shape = labels.shape
    for off in offsets:
        ok = True
        idx = []
        for k in range(len(shape)):
            c = coord[k] + int(off[k])
            if c < 0 or c >= shape[k]:
                ok = False
                break
            idx.append(c)
        if ok:
            out.append(int(labels[tuple(idx)]))
    return out


def scan_contour(labels: np.ndarray, conn: Connectivity) -> ContourState:
    """Full raster scan building the particle set from scratch.

    For every pixel with at least one background-adjacency neighbor carrying a
    different label, one particle per distinct such label is created.
    """
    validate_labels(labels)
    ndim = labels.ndim
    pix_parts = []
    comp_parts = []
    for off in conn.bg_offsets:
        src = tuple(slice(max(0, -o), labels.shape[k] - max(0, o))
                    for k, o in enumerate(off))
        dst = tuple(slice(max(0, o), labels.shape[k] + min(0, o))
                    for k, o in enumerate(off))
        a = labels[src]
        b = labels[dst]
        differ = a != b
        if not differ.any():
            continue
        coords = np.nonzero(differ)
        src_coords = [coords[k] + src[k].start for k in range(ndim)]
        pix_parts.append(np.ravel_multi_index(src_coords, labels.shape))
        comp_parts.append(b[differ])
    state = ContourState()
    if not pix_parts:
        return state
    pix = np.concatenate(pix_parts)
    comp = np.concatenate(comp_parts).astype(np.int64)
    keys = np.unique(np.stack([pix, comp], axis=1), axis=0)
    for x, c in keys:
        state._competitors.setdefault(int(x), set()).add(int(c))
    return state


def repair_pixel(labels: np.ndarray, contour: ContourState, pixel: int,
                 conn: Connectivity) -> None:
    """Recompute the particle set of one pixel from the current raster."""
    coord = np.unravel_index(pixel, labels.shape)
    own = int(labels.ravel()[pixel])
    nbs = _neighbor_labels(labels, coord, conn.bg_offsets)
    contour.set_pixel(pixel, {l for l in nbs if l != own})


def _local_component_count(labels: np.ndarray, coord: tuple, label: int,
                           conn: Connectivity) -> int:
    """Components of ``label`` among the punctured box neighbors of a pixel.

    Counted under the foreground adjacency restricted to the 3^d window,
    seeded only from cells foreground-adjacent to the center. A count of 1
    proves the removal of the center cannot disconnect the region; >= 1 needs
    the global fallback.
    """
    shape = labels.shape
    cells = []
    for off in _box_cells(len(shape)):
        if all(o == 0 for o in off):
            continue
        idx = tuple(coord[k] + off[k] for k in range(len(shape)))
        if all(0 <= idx[k] < shape[k] for k in range(len(shape))):
            if labels[idx] == label:
                cells.append(off)
    if not cells:
        return 0
    fg = {tuple(o) for o in conn.fg_offsets.tolist()}
    seeds = [c for c in cells if c in fg]
    if not seeds:
        return 2  # same-label mass only diagonal to the center: inconclusive
    cell_set = set(cells)
    seen = {seeds[0]}
    queue = [seeds[0]]
    while queue:
        cur = queue.pop()
        for off in fg:
            nxt = tuple(cur[k] + off[k] for k in range(len(shape)))
            if nxt in cell_set and nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return 1 if all(s in seen for s in seeds) else 2


@functools.lru_cache(maxsize=None)
def _box_cells(ndim: int):
    grids = np.meshgrid(*([np.array([-1, 0, 1])] * ndim), indexing="ij")
    return [tuple(int(g.ravel()[i]) for g in grids) for i in range(3 ** ndim)]


def is_move_admissible(labels: np.ndarray, pixel: int, competitor: int,
                       conn: Connectivity, allow_fusion: bool = False,
                       allow_vanish: bool = True,
                       region_count: int | None = None) -> bool:
    """Whether relabeling ``pixel`` to ``competitor`` keeps the raster legal.

    Legal means: every foreground region stays one connected component, no two
    distinct foreground labels come into contact unless fusion is allowed, and
    the last pixel of a region is only surrendered when vanishing is allowed.
    Background connectedness is never constrained.
    """
    flat = labels.ravel()
    owner = int(flat[pixel])
    if owner == competitor:
        return False
    coord = np.unravel_index(pixel, labels.shape)
    if owner > 0:
        count = region_count
        if count is None:
            count = int(np.count_nonzero(flat == owner))
        if count == 1:
            if not allow_vanish:
                return False
        else:
            k = _local_component_count(labels, coord, owner, conn)
            if k != 1:
                # local test inconclusive: flood fill the donor region with
                # the pixel removed and require a single component
                mask = labels == owner
                mask.ravel()[pixel] = False
                if ndimage.label(mask, structure=conn.fg_structure)[1] != 1:
                    return False
    if competitor > 0 and not allow_fusion:
        for l in _neighbor_labels(labels, coord, conn.fg_offsets):
            if l > 0 and l != owner and l != competitor:
                return False
    return True


def apply_move(labels: np.ndarray, contour: ContourState, stats, image: np.ndarray,
               pixel: int, owner: int, competitor: int, conn: Connectivity) -> None:
    """Execute one accepted move and locally repair the particle set.

    Raises StaleParticleError when the stored owner no longer matches the
    raster or the competing label is no longer adjacent. Admissibility is the
    caller's responsibility.
    """
    flat = labels.ravel()
    if int(flat[pixel]) != owner:
        raise StaleParticleError(f"pixel {pixel}: owner changed")
    coord = np.unravel_index(pixel, labels.shape)
    if competitor not in _neighbor_labels(labels, coord, conn.bg_offsets):
        raise StaleParticleError(f"pixel {pixel}: competitor {competitor} not adjacent")
    value = float(image.ravel()[pixel])
    flat[pixel] = competitor
    stats.remove(owner, value)
    stats.add(competitor, value)
    repair_pixel(labels, contour, pixel, conn)
    shape = labels.shape
    for off in conn.bg_offsets:
        idx = []
        ok = True
        for k in range(len(shape)):
            c = coord[k] + int(off[k])
            if c < 0 or c >= shape[k]:
                ok = False
                break
            idx.append(c)
        if ok:
            repair_pixel(labels, contour,
                         int(np.ravel_multi_index(tuple(idx), shape)), conn)
