"""Greedy particle-driven region competition over a label raster.

Each iteration snapshots the particle set, scores every candidate move by its
total energy increment (optionally smoothed by the Sobolev contour filter),
executes improving moves in rank order with re-checked admissibility, and
repairs the contour locally. Energy is tracked incrementally from the true
per-move increments and resynchronized against the from-scratch oracle on a
fixed cadence.

When the smoothed flow stops making progress while still churning (an
oscillation), the engine permanently falls back to the plain flow; if the
plain flow itself oscillates, the run halts and reports the lower-energy
labeling of the oscillating pair.
"""
from __future__ import annotations

import itertools
import math
import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .contour import apply_move, is_move_admissible, scan_contour
from .energy import (EnergyConfig, EnergyModel, EnergyValue, delta_internal,
                     delta_internal_batch, evaluate_total)
from .grid import LABEL_DTYPE, Connectivity, validate_image, validate_labels
from .sobolev import SobolevParams, detect_oscillation, sobolev_filter
from .synth import blur

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass
class OptimizerConfig:
    gradient: str = "sobolev"       # "l2" | "sobolev"
    max_iterations: int = 2000
    oscillation_window: int = 10
    oscillation_tol: float = 1e-6   # relative to |current energy|
    move_budget: float = 1.0        # fraction of particles executable per iteration
    seed: int = 0                   # tie-breaking seed
    allow_fusion: bool = False
    allow_vanish: bool = True
    vanish_grace: int = 0           # iterations during which regions may not vanish
    resync_every: int = 10
    drift_tolerance: float = 1e-6
    debug_check_rate: float = 0.0   # fraction of candidates checked against the oracle

    def __post_init__(self):
        if self.gradient not in ("l2", "sobolev"):
            raise ValueError(f"unknown gradient mode {self.gradient!r}")
        if not 0.0 < self.move_budget <= 1.0:
            raise ValueError("move_budget must be in (0, 1]")


@dataclass
class IterationRecord:
    iteration: int
    energy: float
    moves: int
    particles: int
    mode: str
    seconds: float


@dataclass
class RunResult:
    labels: np.ndarray
    trace: list
    status: str                # converged | fallback-then-converged | oscillation-halt | max-iter
    iterations: int
    wall_seconds: float
    final_energy: EnergyValue
    region_count: int
    fallback_iteration: int | None = None


def _tie_keys(pixels: np.ndarray, competitors: np.ndarray, seed: int) -> np.ndarray:
    """Seeded order-independent tie-break keys from (pixel, competitor)."""
    z = pixels.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
    z ^= competitors.astype(np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
    z ^= np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class RegionCompetition:
    """Stateful engine; owns a working copy of the initial labeling."""

    def __init__(self, image: np.ndarray, init_labels: np.ndarray,
                 energy_config: EnergyConfig,
                 sobolev_params: SobolevParams | None = None,
                 config: OptimizerConfig | None = None,
                 conn: Connectivity | None = None):
        validate_image(image)
        validate_labels(init_labels)
        if image.shape != init_labels.shape:
            raise ValueError("image and labels differ in shape")
        self.image = np.ascontiguousarray(image, dtype=np.float64)
        self.labels = np.ascontiguousarray(init_labels, dtype=LABEL_DTYPE).copy()
        self.conn = conn if conn is not None else Connectivity.default(image.ndim)
        self.energy_config = energy_config
        self.sobolev_params = sobolev_params if sobolev_params is not None \
            else SobolevParams()
        self.config = config if config is not None else OptimizerConfig()
        self.mode = self.config.gradient
        self.model = EnergyModel(self.image, self.labels, energy_config)
        self.contour = scan_contour(self.labels, self.conn)
        self.iteration = 0
        self.fallback_iteration: int | None = None
        self.trace: list[IterationRecord] = []
        self.last_candidates = None   # (pixels, owners, competitors, rank values)
        self._energy = evaluate_total(self.labels, self.image, energy_config).total
        self._mode_start = 0
        self._rng = np.random.default_rng(self.config.seed)

    # -- single iteration ----------------------------------------------------

    def iterate(self) -> IterationRecord:
        t0 = time.perf_counter()
        self.iteration += 1
        cfg = self.config
        lam = self.energy_config.lam
        xs, owners, comps = self.contour.as_arrays(self.labels)
        n = len(xs)
        moves = 0
        if n:
            raw_ext = self.model.delta_external_batch(xs, owners, comps)
            raw_int = delta_internal_batch(self.labels, xs, owners, comps)
            if cfg.debug_check_rate > 0.0:
                self._debug_check(xs, owners, comps, raw_ext, raw_int)
            if self.mode == "sobolev":
                coords = np.stack(np.unravel_index(xs, self.labels.shape), axis=1)
                smoothed = sobolev_filter(coords, owners, comps, raw_ext,
                                          self.sobolev_params)
                rank_values = smoothed + lam * raw_int
            else:
                rank_values = raw_ext + lam * raw_int
            self.last_candidates = (xs, owners, comps, rank_values)
            ties = _tie_keys(xs, comps, cfg.seed)
            order = np.lexsort((comps, xs, ties, rank_values))
            budget = int(math.ceil(cfg.move_budget * n))
            moves = self._execute(order, xs, owners, comps, rank_values,
                                  budget, lam)
        else:
            self.last_candidates = (xs, owners, comps,
                                    np.empty(0, dtype=np.float64))
        if self.iteration % cfg.resync_every == 0:
            # flips keep the smooth fields exact for integer-count images;
            # rebuilding here bounds roundoff accumulation on float data
            self.model.refresh()
            self._resync()
        rec = IterationRecord(self.iteration, self._energy, moves,
                              len(self.contour), self.mode,
                              time.perf_counter() - t0)
        self.trace.append(rec)
        return rec

    def _execute(self, order, xs, owners, comps, rank_values, budget, lam) -> int:
        cfg = self.config
        conn = self.conn
        flat_labels = self.labels.ravel()
        allow_vanish = cfg.allow_vanish and (self.iteration > cfg.vanish_grace)
        moved: set[int] = set()
        moves = 0
        for idx in order:
            if rank_values[idx] >= 0.0:
                break
            if moves >= budget:
                break
            x = int(xs[idx])
            a = int(owners[idx])
            b = int(comps[idx])
            if x in moved:
                continue
            if int(flat_labels[x]) != a:
                continue  # stale: owner changed earlier in the batch
            if b not in self.contour.competitors_at(x):
                continue  # stale: competitor no longer adjacent
            count = int(self.model.stats.count[a]) if a > 0 else None
            if not is_move_admissible(self.labels, x, b, conn, cfg.allow_fusion,
                                      allow_vanish, region_count=count):
                continue
            # true increment against the current raster: the l2 flow executes
            # only genuinely improving moves, and the energy ledger stays exact
            # in both modes
            d_tot = (self.model.delta_external(x, a, b)
                     + lam * delta_internal(self.labels, x, b))
            if self.mode == "l2" and not (d_tot < 0.0):
                continue
            apply_move(self.labels, self.contour, self.model.stats, self.image,
                       x, a, b, conn)
            self.model.apply_flip(x, a, b)
            self._energy += d_tot
            moved.add(x)
            moves += 1
        return moves

    def _resync(self) -> None:
        oracle = evaluate_total(self.labels, self.image, self.energy_config)
        drift = abs(oracle.total - self._energy)
        if drift > self.config.drift_tolerance:
            raise RuntimeError(
                f"incremental energy drifted {drift:.3e} from the oracle "
                f"at iteration {self.iteration}")
        self._energy = oracle.total

    def _debug_check(self, xs, owners, comps, raw_ext, raw_int) -> None:
        n = len(xs)
        k = max(1, int(round(self.config.debug_check_rate * n)))
        sample = self._rng.choice(n, size=min(k, n), replace=False)
        lam = self.energy_config.lam
        before = evaluate_total(self.labels, self.image, self.energy_config)
        for i in sample:
            x, b = int(xs[i]), int(comps[i])
            trial = self.labels.copy()
            trial.ravel()[x] = b
            after = evaluate_total(trial, self.image, self.energy_config)
            oracle = after.total - before.total
            mine = float(raw_ext[i] + lam * raw_int[i])
            tol = max(1e-9 * abs(oracle), 1e-12)
            if abs(mine - oracle) > tol:
                raise RuntimeError(
                    f"incremental delta {mine!r} disagrees with oracle "
                    f"{oracle!r} at pixel {x} -> {b}")

    # -- full run --------------------------------------------------------------

    def run(self, on_iteration=None) -> RunResult:
        cfg = self.config
        t0 = time.perf_counter()
        status = "max-iter"
        for _ in range(cfg.max_iterations):
            prev_labels = self.labels.copy()
            prev_energy = self._energy
            rec = self.iterate()
            if on_iteration is not None:
                on_iteration(self, rec)
            if rec.moves == 0:
                status = ("fallback-then-converged"
                          if self.fallback_iteration is not None else "converged")
                break
            recent = self.trace[self._mode_start:]
            if detect_oscillation([r.energy for r in recent],
                                  [r.moves for r in recent],
                                  cfg.oscillation_window, cfg.oscillation_tol):
                if self.mode == "sobolev":
                    self.mode = "l2"
                    self.fallback_iteration = self.iteration
                    self._mode_start = len(self.trace)
                else:
                    status = "oscillation-halt"
                    if prev_energy < self._energy:
                        # keep the better labeling of the oscillating pair
                        self.labels[...] = prev_labels
                        self.model.refresh()
                        self.contour = scan_contour(self.labels, self.conn)
                        self._energy = prev_energy
                    break
        final = evaluate_total(self.labels, self.image, self.energy_config)
        self._energy = final.total
        region_count = int(np.count_nonzero(self.model.stats.count[1:] > 0))
        return RunResult(labels=self.labels, trace=self.trace, status=status,
                         iterations=len(self.trace),
                         wall_seconds=time.perf_counter() - t0,
                         final_energy=final, region_count=region_count,
                         fallback_iteration=self.fallback_iteration)


def run(image: np.ndarray, init_labels: np.ndarray, energy_config: EnergyConfig,
        sobolev_params: SobolevParams | None = None,
        config: OptimizerConfig | None = None,
        conn: Connectivity | None = None, on_iteration=None) -> RunResult:
    engine = RegionCompetition(image, init_labels, energy_config,
                               sobolev_params, config, conn)
    return engine.run(on_iteration=on_iteration)


# -- seeding -------------------------------------------------------------------

def otsu_threshold(hist: np.ndarray) -> int | None:
    """Between-class-variance-maximizing split of a 256-bin histogram.

    Returns t such that bins [0, t] and [t+1, 255] are the two classes, or
    None when every split leaves one class empty.
    """
    hist = np.asarray(hist, dtype=np.float64)
    if hist.shape != (256,):
        raise ValueError("otsu_threshold expects a 256-bin histogram")
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    s0 = np.cumsum(hist * levels)
    total_w = w0[-1]
    total_s = s0[-1]
    w0 = w0[:-1]
    s0 = s0[:-1]
    w1 = total_w - w0
    s1 = total_s - s0
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        return None
    mu0 = np.where(w0 > 0, s0 / np.maximum(w0, 1), 0.0)
    mu1 = np.where(w1 > 0, s1 / np.maximum(w1, 1), 0.0)
    var_between = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -np.inf)
    return int(np.argmax(var_between))


def split_disjoint_labels(labels: np.ndarray, conn: Connectivity) -> np.ndarray:
    """Renumber so every positive label is one connected component (1..K)."""
    out = np.zeros(labels.shape, dtype=LABEL_DTYPE)
    next_label = 1
    for l in np.unique(labels):
        if l <= 0:
            continue
        comp, n = ndimage.label(labels == l, structure=conn.fg_structure)
        for k in range(1, n + 1):
            out[comp == k] = next_label
            next_label += 1
    return out


def _bubble_labels(dims, per_axis: int, radius: float) -> np.ndarray:
    labels = np.zeros(dims, dtype=LABEL_DTYPE)
    grids = np.indices(dims, dtype=np.float64)
    axes_centers = [[(i + 0.5) * d / per_axis for i in range(per_axis)]
                    for d in dims]
    label = 1
    for center in itertools.product(*axes_centers):
        d2 = sum((g - c) ** 2 for g, c in zip(grids, center))
        labels[d2 <= radius * radius] = label
        label += 1
    return labels


def initialize(image: np.ndarray, scheme: str,
               conn: Connectivity | None = None) -> np.ndarray:
    """Build an initial labeling from a scheme string.

    Schemes: ``rect`` (one centered rectangle), ``bubbles:<n>[:<r>]`` (an
    n-per-axis lattice of disks, radius r, default 4), ``otsu`` (histogram
    threshold, one label per connected component), ``maxima:<sigma>:<r>``
    (disks of radius r seeded at strict local maxima after Gaussian blur with
    sigma), ``file:<path>`` (labels read from file). All schemes are
    normalized so every positive label is a single connected component.
    """
    validate_image(image)
    if conn is None:
        conn = Connectivity.default(image.ndim)
    dims = image.shape
    if scheme == "rect":
        labels = np.zeros(dims, dtype=LABEL_DTYPE)
        core = tuple(slice(max(1, s // 4), s - max(1, s // 4)) for s in dims)
        labels[core] = 1
        return split_disjoint_labels(labels, conn)
    if scheme.startswith("bubbles:"):
        parts = scheme.split(":")
        if len(parts) not in (2, 3):
            raise ValueError(f"bad bubbles scheme {scheme!r}")
        per_axis = int(parts[1])
        radius = float(parts[2]) if len(parts) == 3 else 4.0
        if per_axis < 1 or radius <= 0:
            raise ValueError(f"bad bubbles scheme {scheme!r}")
        return split_disjoint_labels(_bubble_labels(dims, per_axis, radius), conn)
    if scheme == "otsu":
        lo, hi = float(image.min()), float(image.max())
        if hi == lo:
            warnings.warn("otsu seeding on a constant image: empty foreground")
            return np.zeros(dims, dtype=LABEL_DTYPE)
        bins = np.rint((image - lo) / (hi - lo) * 255.0).astype(np.int64)
        hist = np.bincount(bins.ravel(), minlength=256)[:256]
        t = otsu_threshold(hist)
        if t is None:
            warnings.warn("otsu seeding found no valid split: empty foreground")
            return np.zeros(dims, dtype=LABEL_DTYPE)
        labels = (bins > t).astype(LABEL_DTYPE)
        return split_disjoint_labels(labels, conn)
    if scheme.startswith("maxima:"):
        parts = scheme.split(":")
        if len(parts) != 3:
            raise ValueError(f"bad maxima scheme {scheme!r}")
        sigma = float(parts[1])
        radius = float(parts[2])
        smooth = blur(image, sigma)
        footprint = np.ones((3,) * image.ndim, dtype=bool)
        footprint[(1,) * image.ndim] = False
        neighbor_max = ndimage.maximum_filter(smooth, footprint=footprint,
                                              mode="constant", cval=-np.inf)
        peaks = np.argwhere(smooth > neighbor_max)
        labels = np.zeros(dims, dtype=LABEL_DTYPE)
        grids = np.indices(dims, dtype=np.float64)
        for i, center in enumerate(peaks, start=1):
            d2 = sum((g - c) ** 2 for g, c in zip(grids, center))
            labels[d2 <= radius * radius] = i
        return split_disjoint_labels(labels, conn)
    if scheme.startswith("file:"):
        from .imageio import read_labels
        labels = read_labels(scheme[5:])
        if labels.shape != dims:
            raise ValueError(
                f"label file shape {labels.shape} does not match image {dims}")
        return split_disjoint_labels(labels, conn)
    raise ValueError(f"unknown initialization scheme {scheme!r}")
