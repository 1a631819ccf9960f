import numpy as np
import pytest

from calflow.flow import ConditionalFlow, FlowConfig
from calflow.losses import LossConfig, per_channel_w1
from calflow.optim import (
    GradCheckReport,
    LossRecord,
    NonFiniteGradientError,
    OptimizerState,
    TrainConfig,
    adam_step,
    central_diff_grad,
    gradcheck_flow,
    held_out_w1,
    numerical_jacobian,
    optimize_pixels_cal,
    relative_error,
    run_gradchecks,
    sgd_step,
    train_flow,
    write_loss_curve,
)


def _tiny_flow(seed=5):
    return ConditionalFlow(FlowConfig(steps=1, width=4, cond_channels=2), rng=np.random.default_rng(seed))


def _tiny_pairs(n=2, size=8, seed=0):
    rng = np.random.default_rng(seed)
    return [
        (rng.uniform(0.0, 0.5, size=(3, size, size)), rng.uniform(0.3, 1.0, size=(3, size, size)))
        for _ in range(n)
    ]


# ------------------------------------------------------------------ steppers


def test_adam_first_step_closed_form():
    # with zero state, the first update is lr * g / (|g| + eps) elementwise
    params = np.array([1.0, 2.0])
    grad = np.array([0.5, -3.0])
    new, state = adam_step(params, grad, OptimizerState.zeros(2), lr=0.1)
    assert new == pytest.approx([0.900000002, 2.0999999996666667], rel=1e-15)
    assert state.t == 1
    assert state.m == pytest.approx(0.1 * grad, rel=1e-15)
    assert state.v == pytest.approx(0.001 * grad * grad, rel=1e-15)


def test_adam_state_threads_through_steps():
    params = np.array([0.0])
    state = OptimizerState.zeros(1)
    for expected_t in (1, 2, 3):
        params, state = adam_step(params, np.array([1.0]), state, lr=0.01)
        assert state.t == expected_t
    assert params[0] == pytest.approx(-0.03, rel=1e-6)


def test_steppers_validate_shapes():
    with pytest.raises(ValueError):
        adam_step(np.zeros(3), np.zeros(2), OptimizerState.zeros(3), lr=0.1)
    with pytest.raises(ValueError):
        sgd_step(np.zeros(3), np.zeros(2), lr=0.1)


def test_steppers_reject_non_finite_gradients():
    grad = np.array([0.0, np.nan])
    with pytest.raises(NonFiniteGradientError):
        adam_step(np.zeros(2), grad, OptimizerState.zeros(2), lr=0.1)
    with pytest.raises(NonFiniteGradientError, match="second"):
        sgd_step(np.zeros(2), grad, lr=0.1, blocks=[("first", 1), ("second", 1)])
    with pytest.raises(NonFiniteGradientError):
        sgd_step(np.zeros(2), np.array([np.inf, 0.0]), lr=0.1)


def test_sgd_step_is_exact():
    new = sgd_step(np.array([1.0, -1.0]), np.array([0.5, 0.25]), lr=0.1)
    assert np.array_equal(new, [0.95, -1.025])


# ------------------------------------------------------------- flow training


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patch_size=5)
    with pytest.raises(ValueError):
        TrainConfig(patch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(max_steps=-1)
    with pytest.raises(ValueError):
        TrainConfig(log_every=0)
    with pytest.raises(ValueError):
        TrainConfig(lam=-0.5)
    with pytest.raises(ValueError):
        TrainConfig(method="lbfgs")
    assert TrainConfig().method == "adam"


def test_train_flow_validates_inputs():
    cfg = TrainConfig(patch_size=4, batch_size=2, max_steps=1)
    with pytest.raises(ValueError):
        train_flow(_tiny_flow(), [], cfg)
    with pytest.raises(ValueError):
        train_flow(ConditionalFlow(FlowConfig(steps=0)), _tiny_pairs(), cfg)
    small = [(np.zeros((3, 2, 2)), np.zeros((3, 2, 2)))]
    with pytest.raises(ValueError):
        train_flow(_tiny_flow(), small, cfg)
    mismatched = [(np.zeros((3, 8, 8)), np.zeros((3, 8, 10)))]
    with pytest.raises(ValueError):
        train_flow(_tiny_flow(), mismatched, cfg)


def test_train_flow_record_layout_and_determinism():
    cfg = TrainConfig(patch_size=4, batch_size=2, max_steps=3, log_every=1, lr=1e-3, lam=0.01, seed=0)
    pairs = _tiny_pairs()
    first = train_flow(_tiny_flow(), pairs, cfg)
    second = train_flow(_tiny_flow(), pairs, cfg)

    assert [r.step for r in first.records] == [0, 1, 2, 3]
    for a, b in zip(first.records, second.records):
        assert (a.step, a.nll, a.cal, a.total) == (b.step, b.nll, b.cal, b.total)
    assert np.array_equal(first.final_params, second.final_params)
    for r in first.records:
        assert np.isfinite(r.nll) and np.isfinite(r.cal)
        assert r.total == pytest.approx(r.nll + cfg.lam * r.cal, rel=1e-12)


def test_train_flow_logs_cal_even_without_weight():
    cfg = TrainConfig(patch_size=4, batch_size=2, max_steps=2, log_every=1, lr=1e-3, lam=0.0, seed=1)
    result = train_flow(_tiny_flow(), _tiny_pairs(), cfg)
    for r in result.records:
        assert r.cal > 0.0
        assert r.total == r.nll


def test_train_flow_initializes_actnorm_once():
    flow = _tiny_flow()
    assert not flow.actnorm_initialized
    train_flow(flow, _tiny_pairs(), TrainConfig(patch_size=4, batch_size=2, max_steps=1))
    assert flow.actnorm_initialized


def test_write_loss_curve_round_trips_floats(tmp_path):
    records = [
        LossRecord(step=0, nll=1.0 / 3.0, cal=0.1234567890123456789, total=2.0),
        LossRecord(step=10, nll=-5.5, cal=0.0, total=-5.5),
    ]
    path = tmp_path / "curve.csv"
    write_loss_curve(records, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,nll,cal,total"
    assert len(lines) == 3
    for line, rec in zip(lines[1:], records):
        step, nll, cal, total = line.split(",")
        assert int(step) == rec.step
        assert float(nll) == rec.nll
        assert float(cal) == rec.cal
        assert float(total) == rec.total


def test_held_out_w1_matches_manual_mean():
    flow = _tiny_flow()
    pairs = _tiny_pairs(n=3)
    cfg = LossConfig()
    expected = np.mean([per_channel_w1(flow.enhance(low), ref, cfg).sum() for low, ref in pairs])
    assert held_out_w1(flow, pairs) == pytest.approx(expected, rel=1e-15)
    with pytest.raises(ValueError):
        held_out_w1(flow, [])


# ------------------------------------------------------ pixel-space descent


def test_pixel_descent_fixed_point_on_identical_images():
    rng = np.random.default_rng(3)
    img = rng.uniform(0.2, 0.8, size=(3, 8, 8))
    result = optimize_pixels_cal(img, img.copy(), steps=50)
    assert result.history == [0.0]
    assert result.steps_taken == 0
    assert np.array_equal(result.image, img)
    result.image[0, 0, 0] = 99.0
    assert img[0, 0, 0] != 99.0


def test_pixel_descent_is_monotone_and_reduces_loss():
    rng = np.random.default_rng(0)
    ref = rng.uniform(0.1, 0.9, size=(3, 16, 16))
    shifted = ref.copy()
    shifted[0] = np.clip(shifted[0] + 0.2, 0.0, 1.0)
    result = optimize_pixels_cal(shifted, ref, steps=120)
    hist = np.asarray(result.history)
    assert np.all(np.diff(hist) <= 0.0)
    assert hist[-1] < 0.5 * hist[0]
    assert result.steps_taken == len(result.history) - 1
    assert np.all(np.isfinite(result.image))


def test_pixel_descent_respects_stop_threshold():
    rng = np.random.default_rng(1)
    ref = rng.uniform(0.1, 0.9, size=(3, 16, 16))
    shifted = np.clip(ref + 0.15, 0.0, 1.0)
    threshold_probe = optimize_pixels_cal(shifted, ref, steps=1, max_halvings=0)
    initial = threshold_probe.history[0]
    result = optimize_pixels_cal(shifted, ref, steps=400, stop_threshold=0.5 * initial)
    assert result.history[-1] <= 0.5 * initial
    assert result.steps_taken < 400


def test_pixel_descent_rejects_non_finite_input():
    ref = np.full((3, 4, 4), 0.5)
    bad = ref.copy()
    bad[1, 2, 2] = np.nan
    with pytest.raises(NonFiniteGradientError):
        optimize_pixels_cal(bad, ref, steps=5)


def test_pixel_descent_mean_reduction_matches_scaled_sum():
    rng = np.random.default_rng(2)
    ref = rng.uniform(0.1, 0.9, size=(3, 8, 8))
    shifted = np.clip(ref + 0.1, 0.0, 1.0)
    by_sum = optimize_pixels_cal(shifted, ref, LossConfig(channel_reduction="sum"), steps=20)
    by_mean = optimize_pixels_cal(shifted, ref, LossConfig(channel_reduction="mean"), steps=20)
    assert by_mean.history[0] == pytest.approx(by_sum.history[0] / 3.0, rel=1e-12)


# --------------------------------------------------- finite-difference audit


def test_central_diff_grad_on_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    grad = central_diff_grad(lambda v: float((v**2).sum()), x)
    assert grad == pytest.approx(2.0 * x, abs=1e-8)


def test_numerical_jacobian_on_linear_map():
    a = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    jac = numerical_jacobian(lambda v: a @ v, np.array([0.3, -0.7]))
    assert jac == pytest.approx(a, abs=1e-8)


def test_relative_error_definition():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)
    assert relative_error(1.0, 2.0) == pytest.approx(0.5)


def test_gradcheck_report_predicate():
    good = GradCheckReport("x", max_rel_error=1e-8, tolerance=1e-6, n_checked=10, n_excluded=0)
    bad = GradCheckReport("x", max_rel_error=1e-3, tolerance=1e-6, n_checked=10, n_excluded=1)
    assert good.passed and not bad.passed
    payload = bad.to_json_dict()
    assert payload["passed"] is False
    assert payload["n_excluded"] == 1
    assert set(payload) == {"name", "max_rel_error", "tolerance", "n_checked", "n_excluded", "passed"}


def test_all_gradchecks_pass():
    reports = run_gradchecks(seed=0)
    assert [r.name for r in reports] == ["hist", "cal", "flow_nll"]
    for report in reports:
        assert report.passed, f"{report.name}: {report.max_rel_error} >= {report.tolerance}"
        assert report.n_checked > 0


def test_flow_gradcheck_tolerates_sub_noise_coordinates():
    # Seed 1 draws parameters whose smallest gradient components sit below
    # what a central difference of the NLL can resolve (absolute agreement
    # ~3e-9 against an oracle noise floor ~6e-9); a bare elementwise
    # relative error misreports those as failures.
    report = gradcheck_flow(seed=1)
    assert report.passed, f"{report.max_rel_error} >= {report.tolerance}"
    assert report.n_checked > 0
