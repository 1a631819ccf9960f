import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calflow.flow import ConditionalFlow, FlowConfig
from calflow.histogram import KernelConfig, make_grid
from calflow.losses import LossConfig, alignment_report, cal_loss, per_channel_w1, total_loss


def _pair(seed=0, shape=(3, 8, 8)):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.05, 0.95, size=shape), rng.uniform(0.05, 0.95, size=shape)


def test_config_defaults_and_validation():
    cfg = LossConfig()
    assert cfg.lam == 0.01
    assert cfg.kernel is not None
    assert cfg.kernel.delta_scale == KernelConfig.for_grid(cfg.grid).delta_scale
    with pytest.raises(ValueError):
        LossConfig(lam=-0.1)
    with pytest.raises(ValueError):
        LossConfig(channel_reduction="median")


def test_identical_images_give_zero_loss_and_zero_gradient():
    a, _ = _pair(1)
    cfg = LossConfig()
    assert np.array_equal(per_channel_w1(a, a, cfg), np.zeros(3))
    value, grad = cal_loss(a, a, cfg)
    assert value == 0.0
    assert np.array_equal(grad, np.zeros_like(a))


def test_channel_swap_is_detected():
    a, _ = _pair(2)
    swapped = a[[2, 1, 0]]
    value, _ = cal_loss(swapped, a, LossConfig())
    assert value > 0.01


def test_shape_validation():
    cfg = LossConfig()
    with pytest.raises(ValueError):
        per_channel_w1(np.zeros((1, 4, 4)), np.zeros((1, 4, 4)), cfg)
    with pytest.raises(ValueError):
        per_channel_w1(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)), cfg)
    with pytest.raises(ValueError):
        cal_loss(np.zeros((3, 4)), np.zeros((3, 4)), cfg)


def test_mean_reduction_is_sum_over_three():
    a, b = _pair(3)
    sum_val, sum_grad = cal_loss(a, b, LossConfig(channel_reduction="sum"))
    mean_val, mean_grad = cal_loss(a, b, LossConfig(channel_reduction="mean"))
    assert mean_val == pytest.approx(sum_val / 3.0, rel=1e-15)
    assert mean_grad == pytest.approx(sum_grad / 3.0, rel=1e-15)


def test_cal_matches_per_channel_sum():
    a, b = _pair(4)
    cfg = LossConfig()
    value, _ = cal_loss(a, b, cfg)
    assert value == pytest.approx(per_channel_w1(a, b, cfg).sum(), rel=1e-15)


def test_value_is_permutation_invariant_within_channels():
    a, b = _pair(5)
    cfg = LossConfig()
    base, _ = cal_loss(a, b, cfg)
    rng = np.random.default_rng(6)
    shuffled = np.stack([rng.permutation(a[c].ravel()).reshape(a[c].shape) for c in range(3)])
    again, _ = cal_loss(shuffled, b, cfg)
    assert again == pytest.approx(base, rel=1e-12)


def test_gradient_descends_the_loss():
    a, b = _pair(7, shape=(3, 16, 16))
    cfg = LossConfig()
    value, grad = cal_loss(a, b, cfg)
    stepped, _ = cal_loss(a - 1e-3 * grad / np.abs(grad).max(), b, cfg)
    assert stepped < value


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.3))
def test_loss_nonnegative_and_symmetric_in_value(seed, shift):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.1, 0.6, size=(3, 4, 4))
    b = np.clip(a + shift, 0.0, 1.0)
    cfg = LossConfig(grid=make_grid(0.0, 1.0, 16))
    fwd, _ = cal_loss(a, b, cfg)
    rev, _ = cal_loss(b, a, cfg)
    assert fwd >= 0.0
    assert fwd == pytest.approx(rev, abs=1e-12)


def test_report_json_shape():
    a, b = _pair(8)
    report = alignment_report(a, b, LossConfig(lam=0.25))
    payload = report.to_json_dict()
    assert set(payload) == {"nll", "cal", "total", "lambda", "w1_r", "w1_g", "w1_b"}
    assert payload["nll"] is None
    assert payload["total"] is None
    assert payload["lambda"] == 0.25
    assert payload["cal"] == pytest.approx(payload["w1_r"] + payload["w1_g"] + payload["w1_b"], rel=1e-12)


def test_total_combines_likelihood_and_alignment():
    flow = ConditionalFlow(FlowConfig(steps=1, width=4, cond_channels=2))
    rng = np.random.default_rng(9)
    flow.set_params(0.2 * rng.normal(size=flow.n_params))
    low = rng.uniform(size=(3, 8, 8))
    ref = rng.uniform(size=(3, 8, 8))
    cfg = LossConfig(lam=0.5)
    report = total_loss(flow, low, ref, cfg)
    assert report.nll == pytest.approx(flow.nll(ref, low), rel=1e-15)
    expected_cal = per_channel_w1(flow.enhance(low, tau=0.0), ref, cfg).sum()
    assert report.cal == pytest.approx(expected_cal, rel=1e-12)
    assert report.total == pytest.approx(report.nll + 0.5 * report.cal, rel=1e-12)
    zero = total_loss(flow, low, ref, LossConfig(lam=0.0))
    assert zero.total == zero.nll
