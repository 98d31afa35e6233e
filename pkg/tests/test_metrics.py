import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from attnseg.errors import DimensionError, UndefinedMetricError
from attnseg.metrics import assd, boundary_mask, dice, extract_boundary, report

from oracles import assd_brute, boundary_points, dice_brute


def random_mask(r, size=16, p=None):
    p = r.uniform(0.1, 0.7) if p is None else p
    m = r.random((size, size)) < p
    if not m.any():
        m[r.integers(size), r.integers(size)] = True
    return m


# -------------------------------------------------------------------- dice


def test_dice_hand_cases():
    a = np.zeros((4, 4), bool)
    a[0, :2] = True
    b = np.zeros((4, 4), bool)
    b[0, 1:3] = True
    assert dice(a, b) == 0.5
    assert dice(a, a) == 1.0
    assert dice(a, np.roll(a, 2, axis=0)) == 0.0
    assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    assert dice(a, np.zeros((4, 4))) == 0.0


def test_dice_shape_mismatch():
    with pytest.raises(DimensionError):
        dice(np.zeros((3, 3)), np.zeros((3, 4)))


def test_dice_matches_brute_force_on_random_pairs():
    r = np.random.default_rng(0)
    for _ in range(200):
        a, b = random_mask(r), random_mask(r)
        assert abs(dice(a, b) - dice_brute(a, b)) < 1e-9


# -------------------------------------------------------------- boundaries


def test_boundary_examples():
    single = np.zeros((5, 5), bool)
    single[2, 3] = True
    assert extract_boundary(single).tolist() == [[2, 3]]
    square = np.zeros((5, 5), bool)
    square[1:4, 1:4] = True
    pts = {tuple(p) for p in extract_boundary(square)}
    assert len(pts) == 8 and (2, 2) not in pts
    assert extract_boundary(np.zeros((4, 4), bool)).shape == (0, 2)


def test_image_edge_counts_as_background():
    full = np.ones((3, 3), bool)
    assert boundary_mask(full).sum() == 8


def test_boundary_matches_enumeration():
    r = np.random.default_rng(1)
    for _ in range(50):
        m = random_mask(r)
        assert sorted(map(tuple, extract_boundary(m).tolist())) == sorted(boundary_points(m))


# -------------------------------------------------------------------- assd


def test_assd_hand_cases():
    a = np.zeros((6, 6), bool)
    a[0, 0] = True
    b = np.zeros((6, 6), bool)
    b[3, 4] = True
    assert assd(a, b) == 5.0
    assert assd(a, a) == 0.0


def test_assd_empty_is_undefined():
    with pytest.raises(UndefinedMetricError):
        assd(np.zeros((4, 4)), np.ones((4, 4)))


def test_assd_matches_brute_force_on_random_pairs():
    r = np.random.default_rng(2)
    for _ in range(200):
        a, b = random_mask(r), random_mask(r)
        assert abs(assd(a, b) - assd_brute(a, b)) < 1e-9


@given(st.integers(0, 2**31), st.integers(-3, 3), st.integers(-3, 3))
def test_symmetry_and_translation_invariance(seed, dy, dx):
    r = np.random.default_rng(seed)
    a = np.zeros((24, 24), bool)
    b = np.zeros((24, 24), bool)
    a[6:18, 6:18] = random_mask(r, 12)
    b[6:18, 6:18] = random_mask(r, 12)
    assert dice(a, b) == dice(b, a)
    assert abs(assd(a, b) - assd(b, a)) < 1e-12
    ta, tb = np.roll(a, (dy, dx), axis=(0, 1)), np.roll(b, (dy, dx), axis=(0, 1))
    assert abs(dice(ta, tb) - dice(a, b)) < 1e-12
    assert abs(assd(ta, tb) - assd(a, b)) < 1e-9


# ------------------------------------------------------------------ report


def test_report_perfect_prediction():
    m = np.zeros((8, 8), int)
    m[2:5, 2:6] = 1
    s = report([m], [m], [1]).summary()["1"]
    assert s["dice_mean"] == 1.0 and s["dice_std"] == 0.0
    assert s["assd_mean"] == 0.0 and s["assd_undefined"] == 0


def test_report_mean_and_population_std():
    m = np.zeros((8, 8), int)
    m[2:5, 2:6] = 1
    other = np.zeros((8, 8), int)
    other[6:8, 6:8] = 1
    s = report([m, other], [m, m], [1]).summary()["1"]
    assert s["dice_mean"] == 0.5 and s["dice_std"] == 0.5


def test_report_records_undefined_assd():
    m = np.zeros((8, 8), int)
    m[1:3, 1:3] = 1
    rep = report([np.zeros((8, 8), int), m], [m, m], [1])
    assert rep.assd[1] == [None, 0.0]
    s = rep.summary()["1"]
    assert s["assd_undefined"] == 1 and s["assd_mean"] == 0.0


def test_report_matches_recomputation_and_serialises():
    r = np.random.default_rng(3)
    gt = [r.integers(0, 3, (16, 16)) for _ in range(4)]
    pred = [r.integers(0, 3, (16, 16)) for _ in range(4)]
    rep = report(pred, gt, [1, 2], ids=list("abcd"), seconds=[0.1] * 4)
    for k in (1, 2):
        for i in range(4):
            assert abs(rep.dice[k][i] - dice_brute(pred[i] == k, gt[i] == k)) < 1e-12
            assert abs(rep.assd[k][i] - assd_brute(pred[i] == k, gt[i] == k)) < 1e-9
    rows = rep.to_csv().strip().splitlines()
    assert rows[0] == "id,class,dice_pct,assd_pix" and len(rows) == 1 + 4 * 2
    data = json.loads(rep.to_json())
    assert data["images"][0]["seconds"] == 0.1
    assert "Dice(%)" in rep.table()
