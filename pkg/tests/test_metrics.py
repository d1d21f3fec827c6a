import csv
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mpcgnet.metrics import (
    METRIC_NAMES,
    MetricsConfig,
    all_metrics,
    dice_iou,
    e_measure,
    evaluate_dataset,
    mae,
    nearest_foreground,
    s_measure,
    weighted_fmeasure,
)

from metric_cases import random_case
from oracles import emeasure_oracle, fbw_oracle, smeasure_oracle

GOLDEN = Path(__file__).parent / "data" / "metrics_golden.json"

maps = st.integers(2, 10).flatmap(
    lambda n: st.tuples(
        arrays(np.float64, (n, n), elements=st.floats(0, 1)),
        arrays(np.bool_, (n, n)),
    )
)


# ---------------------------------------------------------------- dice / iou / mae


def test_dice_iou_perfect():
    gt = np.zeros((6, 6), bool)
    gt[1:4, 2:5] = True
    d, i = dice_iou(gt.astype(float), gt)
    assert d == pytest.approx(1) and i == pytest.approx(1)


def test_dice_iou_disjoint():
    gt = np.zeros((4, 4), bool)
    pred = np.zeros((4, 4))
    gt[0, 0] = True
    pred[3, 3] = 1
    d, i = dice_iou(pred, gt)
    assert d < 1e-8 and i < 1e-8


def test_dice_iou_hand_counted():
    gt = np.zeros((4, 4), bool)
    gt[0, :] = True  # |gt| = 4
    pred = np.zeros((4, 4))
    pred[0, 0] = pred[0, 1] = 0.9  # two hits
    pred[2, 2] = 0.7  # one false positive
    d, i = dice_iou(pred, gt)
    assert d == pytest.approx(4 / 7, abs=1e-6)
    assert i == pytest.approx(2 / 5, abs=1e-6)


def test_threshold_is_strict():
    gt = np.ones((2, 2), bool)
    d, _ = dice_iou(np.full((2, 2), 0.5), gt)
    assert d < 1e-6


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        dice_iou(np.zeros((3, 3)), np.zeros((3, 4), bool))
    with pytest.raises(ValueError, match="shape"):
        mae(np.zeros((3, 3)), np.zeros((4, 3), bool))


def test_mae_cases(rng):
    gt = rng.random((8, 8)) < 0.5
    assert mae(gt.astype(float), gt) == 0
    assert mae(1.0 - gt, gt) == 1
    assert mae(np.full((8, 8), 0.5), gt) == 0.5


def test_dice_iou_identity_1000_pairs(rng):
    for _ in range(1000):
        n = rng.integers(2, 12)
        gt = rng.random((n, n)) < rng.random()
        pred = rng.random((n, n))
        p = pred > 0.5
        if (p | gt).sum() == 0:
            continue
        d, i = dice_iou(pred, gt)
        assert abs(d - 2 * i / (1 + i)) < 1e-6


@settings(max_examples=60, deadline=None)
@given(maps, st.floats(0.01, 0.49), st.floats(0.51, 1.0))
def test_binarization_invariance(pair, lo, hi):
    pred, gt = pair
    moved = np.where(pred > 0.5, hi, lo)
    assert dice_iou(pred, gt) == dice_iou(moved, gt)


# ---------------------------------------------------------------- reference measures


def test_nearest_foreground_tie_break():
    gt = np.zeros((3, 3), bool)
    gt[0, 0] = gt[0, 2] = True
    dist, idx = nearest_foreground(gt)
    assert idx[0, 1] == 0  # equidistant from both; first in row-major order wins
    assert dist[2, 1] == pytest.approx(np.sqrt(5))


@pytest.mark.parametrize("size", [8, 12])
def test_nearest_foreground_matches_edt_distances(rng, size):
    from scipy import ndimage

    gt = rng.random((size, size)) < 0.2
    gt[0, 0] = True
    dist, _ = nearest_foreground(gt)
    np.testing.assert_allclose(dist, ndimage.distance_transform_edt(~gt))


def test_fbw_perfect_and_inverse(rng):
    gt = rng.random((8, 8)) < 0.4
    gt[2, 2] = True
    gt[5, 5] = False
    assert weighted_fmeasure(gt.astype(float), gt) == pytest.approx(1, abs=1e-9)
    assert weighted_fmeasure(1.0 - gt, gt) < 1e-9


def test_fbw_degenerate():
    gt = np.zeros((5, 5), bool)
    assert weighted_fmeasure(np.zeros((5, 5)), gt) == 1.0
    assert weighted_fmeasure(np.full((5, 5), 0.4), gt) == 1.0
    pred = np.zeros((5, 5))
    pred[1, 1] = 0.9
    assert weighted_fmeasure(pred, gt) == 0.0


def test_smeasure_perfect_and_degenerate(rng):
    gt = rng.random((8, 8)) < 0.4
    gt[0, 0], gt[7, 7] = True, False
    assert s_measure(gt.astype(float), gt) == pytest.approx(1, abs=1e-6)
    empty = np.zeros((6, 6), bool)
    assert s_measure(np.zeros((6, 6)), empty) == 1
    p = rng.random((6, 6))
    assert s_measure(p, empty) == pytest.approx(1 - p.mean())
    assert s_measure(p, ~empty) == pytest.approx(p.mean())


def test_emeasure_perfect_and_checker():
    gt = np.array([[1, 0], [0, 1]], bool)
    assert e_measure(gt.astype(float), gt) == pytest.approx(1)
    assert e_measure(1.0 - gt, gt) < 0.5
    big = np.zeros((6, 6), bool)
    big[:4] = True  # foreground fraction above one half
    assert e_measure(big.astype(float), big) == pytest.approx(1)


def test_emeasure_degenerate(rng):
    empty = np.zeros((4, 4), bool)
    assert e_measure(np.zeros((4, 4)), empty) == 1
    assert e_measure(np.ones((4, 4)), ~empty) == 1
    pred = np.zeros((4, 4))
    pred[0, :2] = 1
    assert e_measure(pred, empty) == pytest.approx(1 - 2 / 16)


@pytest.mark.parametrize("seed", range(20))
def test_transcription_oracles_8x8(seed):
    pred, gt = random_case(seed)
    assert abs(weighted_fmeasure(pred, gt) - fbw_oracle(pred, gt)) < 1e-6
    assert abs(s_measure(pred, gt) - smeasure_oracle(pred, gt)) < 1e-6
    assert abs(e_measure(pred, gt) - emeasure_oracle(pred, gt)) < 1e-6


# ---------------------------------------------------------------- properties


@settings(max_examples=120, deadline=None)
@given(maps)
def test_all_measures_in_unit_range(pair):
    pred, gt = pair
    for name, v in all_metrics(pred, gt).items():
        assert 0.0 <= v <= 1.0, name


@pytest.mark.parametrize("seed", range(5))
def test_monotone_degradation(seed):
    rng = np.random.default_rng(seed)
    gt = random_case(seed + 50, size=10)[1]
    best = all_metrics(gt.astype(float), gt)
    for _ in range(100):
        other = all_metrics(rng.random(gt.shape) ** rng.uniform(0.3, 3), gt)
        for k in ("dice", "iou", "fbw", "smeasure", "emeasure"):
            assert best[k] >= other[k] - 1e-12, k
        assert best["mae"] <= other["mae"]


def test_config_validation():
    with pytest.raises(ValueError):
        MetricsConfig(tau=1.0)
    with pytest.raises(ValueError):
        MetricsConfig(alpha=1.5)


# ---------------------------------------------------------------- dataset


def test_dataset_single_perfect():
    gt = np.zeros((8, 8), bool)
    gt[2:6, 2:6] = True
    rep = evaluate_dataset([gt.astype(float)], [gt])
    m = rep.means
    for k in ("dice", "iou", "fbw", "smeasure", "emeasure"):
        assert m[k] == pytest.approx(1, abs=1e-6)
    assert m["mae"] == 0


def test_dataset_mean_of_two():
    gt = np.zeros((4, 4), bool)
    gt[:2] = True
    rep = evaluate_dataset([gt.astype(float), 1.0 - gt], [gt, gt])
    assert rep.means["dice"] == pytest.approx(0.5, abs=1e-6)


def test_dataset_count_mismatch():
    with pytest.raises(ValueError):
        evaluate_dataset([np.zeros((2, 2))], [])


def test_golden_fixture():
    data = json.loads(GOLDEN.read_text())
    for row in data["cases"]:
        pred, gt = random_case(row["seed"], size=data["size"])
        got = all_metrics(pred, gt)
        for k in METRIC_NAMES:
            assert got[k] == pytest.approx(row[k], abs=1e-9), (row["seed"], k)


def test_csv_export(tmp_path):
    gt = np.zeros((4, 4), bool)
    gt[:2] = True
    rep = evaluate_dataset([gt.astype(float), 1.0 - gt], [gt, gt], names=["a", "b"])
    path = tmp_path / "m.csv"
    rep.to_csv(path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["image", "dice", "iou", "fbw", "smeasure", "emeasure", "mae"]
    assert [r[0] for r in rows[1:]] == ["a", "b", "MEAN"]
    assert rows[1][1] == "1.000000"
    assert all(len(v.split(".")[1]) == 6 for v in rows[3][1:])
    assert "dice=50.00" in rep.percent_row()
