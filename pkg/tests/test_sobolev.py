"""Kernel values, neighbor queries, and the interaction filter vs brute force."""
import numpy as np
import pytest

from rcseg.sobolev import (CellList, SobolevParams, build_cell_list,
                           detect_oscillation, kernel_eval, sobolev_filter)


def _brute_neighbors(coords, i, cutoff, exclude_self):
    out = []
    c2 = cutoff * cutoff
    for j in range(len(coords)):
        if exclude_self and j == i:
            continue
        d2 = float(((coords[j] - coords[i]) ** 2).sum())
        if d2 < c2:
            out.append(j)
    return sorted(out)


def _brute_filter(coords, owners, competitors, raw, params):
    """All-pairs reference: mean kernel-weighted score over the same-side
    set (including self) minus the mean over the opposing set."""
    n = len(raw)
    out = np.zeros(n)
    c2 = params.cutoff * params.cutoff
    for i in range(n):
        num_same = num_opp = 0.0
        cnt_same = cnt_opp = 0
        for j in range(n):
            d2 = float(((coords[j] - coords[i]) ** 2).sum())
            if d2 >= c2:
                continue
            w = kernel_eval(np.sqrt(d2), params)
            if owners[j] == owners[i]:
                num_same += w * raw[j]
                cnt_same += 1
            if competitors[j] == owners[i]:
                num_opp += w * raw[j]
                cnt_opp += 1
        same = num_same / cnt_same if cnt_same else 0.0
        opp = num_opp / cnt_opp if cnt_opp else 0.0
        out[i] = same - opp
    return out


def test_params_validation_and_cutoff():
    p = SobolevParams()
    assert p.length_scale == 12.0
    assert p.cutoff == 6.0
    assert SobolevParams(length_scale=5.0).cutoff == 2.5
    with pytest.raises(ValueError):
        SobolevParams(length_scale=0.0)
    with pytest.raises(ValueError):
        SobolevParams(epsilon=0.0)


def test_kernel_reference_values():
    p = SobolevParams(length_scale=12.0, epsilon=1.0 / 24.0)
    assert abs(kernel_eval(0.0, p) - 0.25) < 1e-12
    assert abs(kernel_eval(3.0, p) - 0.0625) < 1e-12
    # clamps to zero exactly at the support boundary
    assert abs(kernel_eval(6.0 - 1e-13, p)) < 1e-12
    assert abs(kernel_eval(-6.0 + 1e-13, p)) < 1e-12


def test_kernel_even_and_positive_inside():
    rng = np.random.default_rng(3)
    p = SobolevParams()
    r = rng.uniform(-5.999, 5.999, size=100)
    assert np.array_equal(kernel_eval(r, p), kernel_eval(-r, p))
    assert np.all(kernel_eval(r, p) >= 0.0)


def test_kernel_outside_support_raises():
    p = SobolevParams()
    with pytest.raises(ValueError):
        kernel_eval(6.1, p)
    with pytest.raises(ValueError):
        kernel_eval(np.array([0.0, -7.0]), p)


def test_cell_list_empty_and_single():
    empty = CellList(np.zeros((0, 2), dtype=np.int64), 6.0)
    assert empty.query(np.array([0, 0]), 6.0).size == 0
    one = CellList(np.array([[5, 5]], dtype=np.int64), 6.0)
    assert list(one.query(np.array([5, 5]), 6.0)) == [0]
    assert list(one.query(np.array([5, 5]), 6.0, exclude=0)) == []


def test_cell_list_queries_match_brute_force():
    rng = np.random.default_rng(5)
    for ndim, n in ((2, 1000), (3, 1000)):
        coords = rng.integers(0, 60, size=(n, ndim)).astype(np.int64)
        cutoff = 6.0
        cells = CellList(coords, cutoff)
        for i in rng.integers(0, n, size=40):
            got = sorted(cells.query(coords[i], cutoff, exclude=int(i)))
            assert got == _brute_neighbors(coords, int(i), cutoff, True)
        got = sorted(cells.query(coords[7], cutoff))
        assert got == _brute_neighbors(coords, 7, cutoff, False)


def test_cell_list_pairs_match_brute_force():
    rng = np.random.default_rng(11)
    coords = rng.integers(0, 25, size=(120, 2)).astype(np.int64)
    cells = CellList(coords, 6.0)
    pi, qi, dist = cells.pairs(6.0)
    got = set(zip(pi.tolist(), qi.tolist()))
    assert len(got) == len(pi)  # no duplicated pairs
    want = set()
    for i in range(len(coords)):
        for j in _brute_neighbors(coords, i, 6.0, False):
            want.add((i, j))
    assert got == want
    d2 = ((coords[pi] - coords[qi]) ** 2).sum(axis=1)
    assert np.array_equal(dist, np.sqrt(d2.astype(np.float64)))


def test_build_cell_list_strict_cutoff():
    # two points exactly at the cutoff distance do not see each other
    coords = np.array([[0, 0], [6, 0], [5, 0]], dtype=np.int64)
    cells = build_cell_list(coords, SobolevParams())
    assert list(cells.query(coords[0], 6.0, exclude=0)) == [2]


def test_filter_zero_scores_stay_zero():
    rng = np.random.default_rng(13)
    coords = rng.integers(0, 20, size=(50, 2)).astype(np.int64)
    owners = rng.integers(0, 3, size=50).astype(np.int32)
    competitors = (owners + 1) % 3
    out = sobolev_filter(coords, owners, competitors, np.zeros(50),
                         SobolevParams())
    assert np.array_equal(out, np.zeros(50))


def test_filter_single_particle():
    coords = np.array([[4, 4]], dtype=np.int64)
    out = sobolev_filter(coords, np.array([1], dtype=np.int32),
                         np.array([0], dtype=np.int32), np.array([2.0]),
                         SobolevParams())
    # only the self term survives: kernel weight at distance zero is 0.25,
    # side cardinality 1, nothing on the opposing side
    assert abs(out[0] - 0.5) < 1e-12


def test_filter_matches_all_pairs_oracle():
    rng = np.random.default_rng(17)
    p = SobolevParams()
    for ndim in (2, 3):
        coords = rng.integers(0, 40, size=(500, ndim)).astype(np.int64)
        owners = rng.integers(0, 4, size=500).astype(np.int32)
        # a real particle always proposes a label different from its owner
        competitors = ((owners + rng.integers(1, 4, size=500)) % 4
                       ).astype(np.int32)
        raw = rng.normal(size=500)
        got = sobolev_filter(coords, owners, competitors, raw, p)
        want = _brute_filter(coords, owners, competitors, raw, p)
        assert np.max(np.abs(got - want)) < 1e-12


def test_filter_linearity():
    rng = np.random.default_rng(19)
    p = SobolevParams()
    coords = rng.integers(0, 30, size=(200, 2)).astype(np.int64)
    owners = rng.integers(0, 3, size=200).astype(np.int32)
    competitors = rng.integers(0, 3, size=200).astype(np.int32)
    a = rng.normal(size=200)
    b = rng.normal(size=200)
    cells = build_cell_list(coords, p)
    fa = sobolev_filter(coords, owners, competitors, a, p, cells)
    fb = sobolev_filter(coords, owners, competitors, b, p, cells)
    fab = sobolev_filter(coords, owners, competitors, 2.0 * a - 3.0 * b, p,
                         cells)
    assert np.max(np.abs(fab - (2.0 * fa - 3.0 * fb))) < 1e-12


def test_filter_ignores_storage_order():
    rng = np.random.default_rng(23)
    p = SobolevParams()
    coords = rng.integers(0, 30, size=(150, 2)).astype(np.int64)
    owners = rng.integers(0, 3, size=150).astype(np.int32)
    competitors = rng.integers(0, 3, size=150).astype(np.int32)
    raw = rng.normal(size=150)
    base = sobolev_filter(coords, owners, competitors, raw, p)
    perm = rng.permutation(150)
    shuffled = sobolev_filter(coords[perm], owners[perm], competitors[perm],
                              raw[perm], p)
    assert np.array_equal(shuffled, base[perm])


def test_filter_locality():
    # far-away particles cannot change nearby outputs, bit for bit
    rng = np.random.default_rng(29)
    p = SobolevParams()
    near = rng.integers(0, 10, size=(60, 2)).astype(np.int64)
    far = rng.integers(100, 110, size=(40, 2)).astype(np.int64)
    coords = np.vstack([near, far])
    owners = rng.integers(0, 3, size=100).astype(np.int32)
    competitors = rng.integers(0, 3, size=100).astype(np.int32)
    raw = rng.normal(size=100)
    full = sobolev_filter(coords, owners, competitors, raw, p)
    alone = sobolev_filter(near, owners[:60], competitors[:60], raw[:60], p)
    assert np.array_equal(full[:60], alone)


def test_filter_empty_sides_are_zero():
    # two isolated label-1 particles competing against absent label 2:
    # opposing side empty for both, same side present
    coords = np.array([[0, 0], [2, 0]], dtype=np.int64)
    owners = np.array([1, 1], dtype=np.int32)
    competitors = np.array([2, 2], dtype=np.int32)
    raw = np.array([1.0, 3.0])
    p = SobolevParams()
    out = sobolev_filter(coords, owners, competitors, raw, p)
    w0 = kernel_eval(0.0, p)
    w2 = kernel_eval(2.0, p)
    want0 = (w0 * 1.0 + w2 * 3.0) / 2.0
    assert abs(out[0] - want0) < 1e-12
    # an opposing particle of a label nobody owns contributes nowhere
    competitors2 = np.array([0, 0], dtype=np.int32)
    out2 = sobolev_filter(coords, owners, competitors2, raw, p)
    assert np.array_equal(out, out2)


def test_detect_oscillation_cases():
    flat = [10.0] * 10
    falling = [float(10 - i) for i in range(10)]
    cycle = [5.0, 6.0] * 5
    moves = [3] * 10
    assert detect_oscillation(flat, moves)
    assert detect_oscillation(cycle, moves)
    assert not detect_oscillation(falling, moves)
    # a zero-move iteration inside the window suppresses the verdict
    assert not detect_oscillation(flat, [3] * 9 + [0])
    # too little history
    assert not detect_oscillation(flat[:5], moves[:5])
    assert not detect_oscillation(flat, moves, window=1)
    # boundary: shrink of exactly tol * |last| still counts as stagnant
    # (powers of two keep the comparison exact in floating point)
    seq = [1.0 + 0.5] + [1.0] * 9
    assert detect_oscillation(seq, moves, tol_rel=0.5)
    seq2 = [1.0 + 0.75] + [1.0] * 9
    assert not detect_oscillation(seq2, moves, tol_rel=0.5)
