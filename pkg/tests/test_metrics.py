import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossmod.metrics import aggregate, asd, boundary, dice_score, evaluate_case, format_table, write_table_csv

from oracles import brute_asd, brute_boundary


def test_dice_examples():
    gt = np.zeros((4, 4, 4), np.uint8)
    gt[0, 0, :4] = 1
    assert dice_score(gt, gt, 1) == 100.0
    other = np.zeros_like(gt)
    other[3, 3, :2] = 1
    assert dice_score(other, gt, 1) == 0.0
    pred = np.zeros_like(gt)
    pred[0, 0, :2] = 1
    assert dice_score(pred, gt, 1) == pytest.approx(100 * 4 / 6)
    assert dice_score(np.zeros_like(gt), np.zeros_like(gt), 1) == 100.0
    with pytest.raises(ValueError, match="shape"):
        dice_score(gt, gt[:2], 1)


def test_dice_symmetric_and_permutation_invariant(rng):
    a = rng.integers(0, 3, size=(5, 6, 7))
    b = rng.integers(0, 3, size=(5, 6, 7))
    perm = rng.permutation(a.size)
    for c in range(3):
        assert dice_score(a, b, c) == dice_score(b, a, c)
        assert dice_score(a.ravel()[perm], b.ravel()[perm], c) == dice_score(a, b, c)


def test_asd_identical_is_zero():
    m = np.zeros((6, 6, 6), np.uint8)
    m[1:4, 2:5, 1:3] = 1
    assert asd(m, m, 1) == 0.0


def test_asd_offset_unit_cubes():
    a = np.zeros((8, 8, 8), np.uint8)
    b = np.zeros_like(a)
    a[2, 3, 3] = 1
    b[5, 3, 3] = 1
    assert asd(a, b, 1) == 3.0
    assert brute_asd(a == 1, b == 1) == 3.0


def test_asd_empty_is_na():
    a = np.zeros((4, 4, 4), np.uint8)
    b = a.copy()
    b[1, 1, 1] = 1
    assert asd(a, b, 1) is None
    assert asd(b, a, 1) is None


def test_asd_respects_spacing():
    a = np.zeros((8, 8, 8), np.uint8)
    b = np.zeros_like(a)
    a[2, 3, 3] = 1
    b[5, 3, 3] = 1
    assert asd(a, b, 1, spacing=(2.0, 1.0, 1.0)) == 6.0


def test_boundary_matches_brute_force(rng):
    m = rng.random((7, 8, 9)) < 0.5
    ours = np.argwhere(boundary(m)).astype(float)
    ref = brute_boundary(m)
    assert sorted(map(tuple, ours)) == sorted(map(tuple, ref))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 16), st.floats(0.05, 0.6))
def test_asd_matches_all_pairs_oracle(seed, n, density):
    r = np.random.default_rng(seed)
    shape = (n, r.integers(3, 17), r.integers(3, 17))
    a = (r.random(shape) < density).astype(np.uint8)
    b = (r.random(shape) < density).astype(np.uint8)
    ref = brute_asd(a == 1, b == 1)
    got = asd(a, b, 1)
    if ref is None:
        assert got is None
    else:
        assert got == pytest.approx(ref, rel=1e-12, abs=1e-12)
        assert asd(b, a, 1) == pytest.approx(got, rel=1e-12)


def test_asd_zero_iff_equal_boundaries(rng):
    a = np.zeros((6, 6, 6), np.uint8)
    a[1:5, 1:5, 1:5] = 1
    b = a.copy()
    b[2, 2, 2] = 0  # interior hole changes the boundary set
    assert asd(a, b, 1) > 0


def test_aggregate_rules():
    one = aggregate([{1: {"dice": 80.0, "asd": 2.0}}])
    assert one.classes[1].dice_std == 0.0 and one.classes[1].asd_std == 0.0
    two = aggregate([{1: {"dice": 80.0, "asd": 1.0}}, {1: {"dice": 90.0, "asd": 3.0}}])
    assert two.classes[1].dice_mean == 85.0 and two.classes[1].dice_std == 5.0
    four = aggregate([{1: {"dice": 50.0, "asd": a}} for a in (1.0, None, 2.0, 3.0)])
    s = four.classes[1]
    assert s.asd_mean == 2.0 and s.asd_na == 1 and s.n_cases == 4
    allna = aggregate([{1: {"dice": 0.0, "asd": None}}])
    assert allna.classes[1].asd_mean is None
    with pytest.raises(ValueError):
        aggregate([])


def test_table_and_csv(tmp_path):
    gt = np.zeros((4, 8, 8), np.uint8)
    gt[1:3, 2:5, 2:5] = 1
    gt[1:3, 5:7, 5:7] = 2
    pred = gt.copy()
    pred[:, :, 4] = 0
    rep = aggregate([evaluate_case(pred, gt, [1, 2])], {1: "AA", 2: "LA-blood"})
    text = format_table({"Seg-X": rep, "Seg-Y": rep})
    lines = text.splitlines()
    assert lines[0].split() == ["method", "AA", "Dice", "AA", "ASD", "LA-blood", "Dice", "LA-blood", "ASD"]
    assert len(lines) == 4
    write_table_csv({"Seg-X": rep}, tmp_path / "t.csv")
    rows = (tmp_path / "t.csv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].startswith("Seg-X,")
    rep.to_csv(tmp_path / "r.csv")
    assert "dice_mean" in (tmp_path / "r.csv").read_text()
