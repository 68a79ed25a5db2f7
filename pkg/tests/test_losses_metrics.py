import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from msfuse.errors import DegenerateWarning, DimensionError
from msfuse.gradcheck import gradcheck
from msfuse.losses import EPS, bce_loss, combined_loss, dice_loss, one_hot_targets
from msfuse.metrics import EvalReport, dsc_aggregated, dsc_case, evaluate, mean_aggregated_dsc
from msfuse.tensor import Tensor


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def test_bce_half_probability():
    assert bce_loss(np.ones((1, 1)), _t([[0.5]])).item() == pytest.approx(0.693147, abs=1e-6)


def test_bce_near_one_is_near_zero():
    assert bce_loss(np.ones((1, 1)), _t([[1 - EPS]])).item() == pytest.approx(0.0, abs=1e-6)


def test_bce_clamp_keeps_hard_zero_finite():
    assert np.isfinite(bce_loss(np.ones((1, 1)), _t([[0.0]])).item())


def test_bce_matches_per_voxel_formula():
    rng = np.random.default_rng(0)
    y = (rng.random((2, 2, 2, 2)) > 0.5).astype(float)
    p = rng.random((2, 2, 2, 2))
    assert bce_loss(y, _t(p)).item() == pytest.approx(oracles.bce(y, p), rel=1e-12)


def test_dice_empty_masks_is_zero():
    z = np.zeros((2, 2, 2, 2))
    assert dice_loss(z, _t(z)).item() == pytest.approx(0.0, abs=1e-12)


def test_dice_perfect_binary_prediction_is_zero():
    y = np.zeros((2, 3, 3, 3))
    y[0, :2, 1, 1] = 1
    y[1, 2, 2, :] = 1
    assert dice_loss(y, _t(y)).item() == pytest.approx(0.0, abs=1e-12)


def test_dice_disjoint_four_voxels():
    y = np.zeros((1, 1, 2, 4))
    p = np.zeros((1, 1, 2, 4))
    y[0, 0, 0, :] = 1
    p[0, 0, 1, :] = 1
    assert dice_loss(y, _t(p)).item() == pytest.approx(1 - 1 / 9, abs=1e-6)


def test_combined_loss_components_and_weights():
    rng = np.random.default_rng(1)
    y = (rng.random((2, 3, 3, 3)) > 0.7).astype(float)
    p = rng.uniform(0.01, 0.99, (2, 3, 3, 3))
    lv = combined_loss(y, _t(p))
    assert lv.bce.item() == bce_loss(y, _t(p)).item()
    assert lv.dice.item() == dice_loss(y, _t(p)).item()
    assert lv.total.item() == pytest.approx(0.5 * lv.bce.item() + 0.5 * lv.dice.item(), rel=1e-12)


def test_combined_loss_perfect_prediction_near_zero():
    y = np.zeros((2, 2, 2, 2))
    y[0, 0] = 1
    p = np.clip(y, EPS, 1 - EPS)
    assert combined_loss(y, _t(p)).total.item() == pytest.approx(0.0, abs=1e-5)


def test_combined_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    y = (rng.random((2, 2, 3, 2)) > 0.5).astype(float)
    p = Tensor(rng.uniform(0.1, 0.9, (2, 2, 3, 2)), requires_grad=True)
    assert gradcheck(lambda p: combined_loss(y, p).total, [p]).passed


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_loss_ranges(seed):
    rng = np.random.default_rng(seed)
    y = (rng.random((2, 3, 2, 2)) > 0.5).astype(float)
    p = rng.random((2, 3, 2, 2))
    d = dice_loss(y, _t(p)).item()
    assert 0.0 <= d < 1.0
    assert bce_loss(y, _t(p)).item() >= 0.0
    assert dice_loss(y, _t(y)).item() == pytest.approx(0.0, abs=1e-12)


def test_one_hot_targets_channels():
    m = np.array([[[0, 1, 2]]])
    oh = one_hot_targets(m)
    assert oh.shape == (2, 1, 1, 3)
    assert oh[0].ravel().tolist() == [0, 1, 0] and oh[1].ravel().tolist() == [0, 0, 1]


# ---------------------------------------------------------------- metrics

def _mask_with(n, offset=0, size=100, label=1):
    m = np.zeros(size, dtype=np.uint8)
    m[offset:offset + n] = label
    return m


def test_dsc_case_examples():
    g = _mask_with(20)
    assert dsc_case(g, g, 1) == 1.0
    assert dsc_case(_mask_with(20, 50), g, 1) == 0.0
    assert dsc_case(_mask_with(20, 10), g, 1) == 0.5
    assert dsc_case(np.zeros(5), np.zeros(5), 1) == 1.0


def test_dsc_case_extent_mismatch():
    with pytest.raises(DimensionError):
        dsc_case(np.zeros(4), np.zeros(5), 1)


def test_dsc_aggregated_pools_before_ratio():
    case1 = (_mask_with(20, 10), _mask_with(20))
    case2 = (np.zeros(100, np.uint8), _mask_with(10))
    assert dsc_aggregated([case1, case2], 1) == pytest.approx(0.4)
    assert dsc_aggregated([case1], 1) == dsc_case(*case1, 1)


def test_dsc_aggregated_all_empty_warns():
    with pytest.warns(DegenerateWarning):
        assert dsc_aggregated([(np.zeros(3), np.zeros(3))], 2) == 1.0


def test_dsc_aggregated_equals_case_dsc_for_alike_cases():
    a = (_mask_with(20, 10), _mask_with(20))
    b = (_mask_with(20, 60), _mask_with(20, 50))
    assert dsc_aggregated([a, b], 1) == pytest.approx(dsc_case(*a, 1)) == pytest.approx(dsc_case(*b, 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 3))
def test_dsc_symmetric_and_bounded(seed, n_cases):
    rng = np.random.default_rng(seed)
    cases = [(rng.integers(0, 3, (4, 4, 4)), rng.integers(0, 3, (4, 4, 4))) for _ in range(n_cases)]
    for cid in (1, 2):
        d = dsc_case(*cases[0], cid)
        assert 0.0 <= d <= 1.0
        assert d == dsc_case(cases[0][1], cases[0][0], cid)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateWarning)
            assert dsc_aggregated(cases, cid) == oracles.dsc_aggregated(cases, cid)


def test_eval_report_json_and_csv(tmp_path):
    g = np.zeros((4, 4, 4), np.uint8)
    g[:2] = 1
    g[3, 3, 3] = 2
    p = g.copy()
    p[3, 3, 3] = 0
    rep = evaluate({"b": (p, g), "a": (g, g)})
    assert rep.per_case["a"] == {"GTVp": 1.0, "GTVn": 1.0}
    assert rep.classwise["GTVn"] == pytest.approx(2 / 3)
    assert rep.mean_aggregated == pytest.approx((1.0 + 2 / 3) / 2)
    assert rep.pooled == pytest.approx(2 * 65 / 131)
    rep.write(tmp_path / "r.json", tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "case_id,class,dsc"
    assert lines[1:3] == ["a,GTVp,1.0", "a,GTVn,1.0"]
    assert len(lines) == 5
    d = json.loads((tmp_path / "r.json").read_text())
    assert set(d) == {"per_case", "classwise", "mean_aggregated", "pooled"}
    assert isinstance(rep, EvalReport)


def test_mean_aggregated_dsc_is_class_mean():
    g = np.array([1, 1, 2, 0])
    p = np.array([1, 0, 2, 0])
    assert mean_aggregated_dsc([(p, g)]) == pytest.approx((2 / 3 + 1.0) / 2)
