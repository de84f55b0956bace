import math

import numpy as np
import pytest
from scipy.special import expit

from src.core.approximator import (
    SLFN,
    Dataset,
    bp_flops_per_example,
    bp_gradient_check,
    bp_train,
    compare_training_cost,
    elm_train,
    forward,
    init_slfn,
    l2_error,
    nested_training_errors,
    train_to_tolerance,
)
from src.core.component_map import ComponentMap
from src.core.config import settings
from src.core.errors import InvalidInputError
from src.core.seeding import make_rng


def _one_neuron(**kwargs) -> SLFN:
    return SLFN(a=[[0.5]], b=[0.5], beta=[0.5], **kwargs)


# ----------------------------------------------------------------------
# 順伝播
# ----------------------------------------------------------------------
def test_forward_with_zero_beta_is_zero():
    net = init_slfn(2, 16, seed=3)
    assert np.all(forward(net, np.ones((5, 2))) == 0.0)


def test_forward_identity_neuron():
    net = SLFN(a=[[0.0]], b=[0.0], beta=[2.0], activation="identity", unbounded_ok=True)
    assert forward(net, np.array([1.0]))[0] == 0.0
    net = SLFN(a=[[0.0]], b=[1.0], beta=[2.0], activation="identity", unbounded_ok=True)
    assert forward(net, np.array([5.0]))[0] == 2.0


def test_forward_is_order_independent_and_linear_in_beta():
    net = init_slfn(1, 8, seed=1)
    rng = make_rng(1, "beta")
    beta = rng.normal(size=(8, 1))
    x = np.linspace(-1.0, 1.0, 7).reshape(-1, 1)
    order = np.arange(8)[::-1]
    reversed_net = SLFN(a=net.a[order], b=net.b[order], beta=beta[order])
    assert np.allclose(forward(net.with_beta(beta), x), forward(reversed_net, x), atol=1e-14)
    assert np.allclose(
        forward(net.with_beta(3.0 * beta), x), 3.0 * forward(net.with_beta(beta), x), atol=1e-14
    )


def test_forward_dimension_mismatch():
    net = init_slfn(2, 4)
    with pytest.raises(InvalidInputError):
        forward(net, np.zeros((3, 3)))


def test_unbounded_activation_needs_opt_in():
    with pytest.raises(InvalidInputError):
        SLFN(a=[[1.0]], b=[0.0], beta=[1.0], activation="identity")
    with pytest.raises(InvalidInputError):
        SLFN(a=[[1.0]], b=[0.0], beta=[1.0], activation="relu6")


# ----------------------------------------------------------------------
# BP
# ----------------------------------------------------------------------
def test_single_bp_step_by_hand():
    net = _one_neuron()
    data = Dataset(inputs=[[1.0]], targets=[1.0], lower=[0.0], upper=[1.0])
    trained, report = bp_train(net, data, alpha=0.1, epochs=1)

    h = expit(1.0)
    err = 1.0 - 0.5 * h
    delta_hidden = h * (1.0 - h) * 0.5 * err
    assert trained.beta[0, 0] == pytest.approx(0.5 + 0.1 * h * err, abs=1e-15)
    assert trained.a[0, 0] == pytest.approx(0.5 + 0.1 * delta_hidden, abs=1e-15)
    assert trained.b[0] == pytest.approx(0.5 + 0.1 * delta_hidden, abs=1e-15)
    assert report.epochs == 1
    assert report.flop_count == bp_flops_per_example(1, 1, 1) == 20


def test_zero_epochs_leaves_net_unchanged():
    net = _one_neuron()
    data = Dataset(inputs=[[0.2], [0.8]], targets=[0.0, 1.0], lower=[0.0], upper=[1.0])
    trained, report = bp_train(net, data, alpha=0.1, epochs=0)
    assert np.array_equal(trained.a, net.a)
    assert np.array_equal(trained.b, net.b)
    assert np.array_equal(trained.beta, net.beta)
    assert report.flop_count == 0


def test_zero_error_leaves_weights_unchanged():
    net = _one_neuron()
    x = np.array([[0.0], [0.3], [1.0]])
    data = Dataset(inputs=x, targets=forward(net, x), lower=[0.0], upper=[1.0])
    trained, _ = bp_train(net, data, alpha=0.5, epochs=3)
    assert np.array_equal(trained.a, net.a)
    assert np.array_equal(trained.b, net.b)
    assert np.array_equal(trained.beta, net.beta)


def test_bp_flop_count_scales_with_epochs_and_samples():
    net = init_slfn(1, 6, seed=2, lower=np.array([0.0]), upper=np.array([1.0]), stream="bp")
    x = np.linspace(0.0, 1.0, 10)
    data = Dataset(inputs=x, targets=np.sin(x), lower=[0.0], upper=[1.0])
    _, report = bp_train(net, data, alpha=0.05, epochs=3)
    assert report.flop_count == 3 * 10 * bp_flops_per_example(1, 6, 1)


def test_bp_divergence_returns_input_net():
    net = SLFN(a=[[1.0]], b=[0.0], beta=[1.0], activation="identity", unbounded_ok=True)
    x = np.linspace(-1.0, 1.0, 10)
    data = Dataset(inputs=x, targets=np.ones(10), lower=[-1.0], upper=[1.0])
    trained, report = bp_train(net, data, alpha=50.0, epochs=1000)
    assert report.diverged
    assert report.solve_status == "diverged"
    assert report.diverged_at is not None
    assert math.isinf(report.final_l2)
    assert trained is net


def test_bp_rejects_bad_arguments():
    net = _one_neuron()
    data = Dataset(inputs=[[1.0]], targets=[1.0], lower=[0.0], upper=[1.0])
    with pytest.raises(InvalidInputError):
        bp_train(net, data, alpha=0.0, epochs=1)
    with pytest.raises(InvalidInputError):
        bp_train(net, data, alpha=0.1, epochs=-1)


def test_gradient_check_on_random_nets():
    worst = 0.0
    for k in range(50):
        rng = make_rng(7, "gradcheck", k)
        d = int(rng.integers(1, 3))
        L = int(rng.integers(1, 6))
        net = SLFN(
            a=rng.normal(size=(L, d)),
            b=rng.normal(size=L),
            beta=rng.normal(size=(L, 1)),
            activation="sigmoid" if k % 2 == 0 else "tanh",
            lower=-np.ones(d),
            upper=np.ones(d),
        )
        data = Dataset(
            inputs=rng.uniform(-1.0, 1.0, size=(8, d)),
            targets=rng.normal(size=8),
            lower=-np.ones(d),
            upper=np.ones(d),
        )
        worst = max(worst, bp_gradient_check(net, data))
    assert worst < 1e-6


def test_gradient_check_is_exact_for_identity_activation():
    rng = make_rng(8, "gradcheck")
    net = SLFN(
        a=rng.normal(size=(3, 1)),
        b=rng.normal(size=3),
        beta=rng.normal(size=(3, 1)),
        activation="identity",
        unbounded_ok=True,
    )
    data = Dataset(
        inputs=rng.uniform(-1.0, 1.0, size=5), targets=rng.normal(size=5), lower=[-1.0], upper=[1.0]
    )
    # 各パラメータについて E は2次式なので中心差分は丸め誤差のみ
    assert bp_gradient_check(net, data, h=1e-3) < 1e-9


def test_gradient_check_needs_positive_step():
    data = Dataset(inputs=[[1.0]], targets=[1.0], lower=[0.0], upper=[1.0])
    with pytest.raises(InvalidInputError):
        bp_gradient_check(_one_neuron(), data, h=0.0)


# ----------------------------------------------------------------------
# ELM
# ----------------------------------------------------------------------
def _sin_pi(n: int = 512) -> ComponentMap:
    return ComponentMap.from_function(lambda p: np.sin(np.pi * p[:, 0]), -1.0, 1.0, n, name="sin_pi")


def test_elm_zero_targets_give_zero_beta():
    cmap = ComponentMap.from_function(lambda p: np.zeros(len(p)), 0.0, 1.0, 32)
    net, report = elm_train(Dataset.from_map(cmap), 16)
    assert np.all(net.beta == 0.0)
    assert report.final_l2 == 0.0


def test_elm_large_ridge_shrinks_beta():
    data = Dataset.from_map(_sin_pi(64))
    net, _ = elm_train(data, 16, ridge=1e12)
    assert np.max(np.abs(net.beta)) < 1e-6


def test_elm_fits_sin():
    data = Dataset.from_map(_sin_pi())
    net, report = elm_train(data, 200, hidden_scale=4.0, seed=0)
    assert report.final_l2 < 0.05
    assert report.solve_status == "ok"
    assert report.flop_count > 0
    assert net.hidden_count == 200


def test_elm_rank_deficient_without_ridge():
    x = np.array([0.0, 0.3, 0.6, 1.0])
    data = Dataset(inputs=x, targets=np.sin(x), lower=[0.0], upper=[1.0])
    net, report = elm_train(data, 16, ridge=0.0)
    assert report.solve_status == "rank_deficient"
    assert report.rank <= 4
    # 独立な4列で4点を補間し、残りの列の β は 0
    assert np.count_nonzero(net.beta) == report.rank
    assert report.final_l2 < 1e-8
    assert np.all(np.isfinite(net.beta))


def test_elm_rejects_negative_ridge():
    with pytest.raises(InvalidInputError):
        elm_train(Dataset.from_map(_sin_pi(32)), 8, ridge=-1.0)


NESTED_COUNTS = [8, 16, 32, 64, 128, 256]


@pytest.mark.parametrize(
    "fixture", ["sin_map", "step_map", "triangle_map", "square_map", "lif_map", "sigmoid_synapse"]
)
def test_elm_training_error_is_monotone_in_hidden_count(fixture, request):
    data = Dataset.from_map(request.getfixturevalue(fixture))
    errors = [elm_train(data, L, ridge=0.0, seed=5)[1].final_l2 for L in NESTED_COUNTS]
    assert all(later <= earlier + 1e-12 for earlier, later in zip(errors, errors[1:]))


def test_elm_monotone_on_sin_pi():
    data = Dataset.from_map(_sin_pi())
    errors = [elm_train(data, L, ridge=0.0, seed=5)[1].final_l2 for L in NESTED_COUNTS]
    assert all(later <= earlier + 1e-12 for earlier, later in zip(errors, errors[1:]))


def test_nested_training_errors_match_elm_train(step_map):
    data = Dataset.from_map(step_map)
    nested = nested_training_errors(data, NESTED_COUNTS, seed=5)
    direct = [elm_train(data, L, ridge=0.0, seed=5)[1].final_l2 for L in NESTED_COUNTS]
    assert nested == pytest.approx(direct, rel=1e-9, abs=1e-12)


def test_elm_without_ridge_net_matches_reported_error(triangle_map):
    data = Dataset.from_map(triangle_map)
    net, report = elm_train(data, 64, ridge=0.0, seed=5)
    assert l2_error(net, triangle_map) == pytest.approx(report.final_l2, abs=1e-4)


def test_init_slfn_prefix_is_shared():
    small = init_slfn(2, 8, seed=4)
    large = init_slfn(2, 32, seed=4)
    assert np.array_equal(small.a, large.a[:8])
    assert np.array_equal(small.b, large.b[:8])


# ----------------------------------------------------------------------
# 誤差
# ----------------------------------------------------------------------
def test_l2_error_against_constant_and_sin():
    one = ComponentMap.from_function(lambda p: np.ones(len(p)), 0.0, 1.0, 65)
    zero_net = init_slfn(1, 4, lower=np.array([0.0]), upper=np.array([1.0]))
    assert l2_error(zero_net, one) == pytest.approx(1.0, abs=1e-12)

    zero_net = init_slfn(1, 4, lower=np.array([-1.0]), upper=np.array([1.0]))
    assert l2_error(zero_net, _sin_pi(257)) == pytest.approx(1.0, abs=5e-3)


def test_l2_error_rejects_other_domain():
    net = init_slfn(1, 4, lower=np.array([0.0]), upper=np.array([1.0]))
    with pytest.raises(InvalidInputError):
        l2_error(net, _sin_pi(64))


# ----------------------------------------------------------------------
# 許容誤差までの学習
# ----------------------------------------------------------------------
def test_constant_target_stops_at_initial_width():
    cmap = ComponentMap.from_function(lambda p: np.zeros(len(p)), 0.0, 1.0, 64)
    net, report = train_to_tolerance(cmap, 1e-3)
    assert report.met
    assert report.hidden_count == 8
    assert report.held_out_l2 == 0.0
    assert len(report.history) == 1


def test_synapse_twin_meets_tolerance(sigmoid_synapse):
    net, report = train_to_tolerance(sigmoid_synapse, 1e-2, seed=1)
    assert report.met
    assert report.hidden_count <= 256
    assert report.held_out_l2 < 1e-2
    assert l2_error(net, sigmoid_synapse) < 1e-2


def test_lif_twin_meets_tolerance(lif_map):
    _, report = train_to_tolerance(lif_map, 1e-2, seed=1)
    assert report.met
    assert report.hidden_count <= 512


def test_training_is_deterministic(sigmoid_synapse):
    net_a, rep_a = train_to_tolerance(sigmoid_synapse, 1e-3, seed=9)
    net_b, rep_b = train_to_tolerance(sigmoid_synapse, 1e-3, seed=9)
    assert np.array_equal(net_a.beta, net_b.beta)
    assert rep_a.to_dict() == rep_b.to_dict()


def test_unmet_budget_returns_best_net(sin_map):
    net, report = train_to_tolerance(sin_map, 1e-12, budget=8)
    assert report.met is False
    assert report.hidden_count == 8
    assert len(report.history) == 1
    assert net.hidden_count == 8


def test_bp_training_respects_epoch_budget(sigmoid_synapse):
    _, report = train_to_tolerance(sigmoid_synapse, 1e-12, method="bp", budget=20, hidden_count=4)
    assert report.method == "bp"
    assert report.met is False
    assert report.epochs <= 20
    assert report.flop_count == 20 * 64 * bp_flops_per_example(1, 4, 1)


def test_train_to_tolerance_rejects_bad_arguments(sin_map):
    with pytest.raises(InvalidInputError):
        train_to_tolerance(sin_map, 0.0)
    with pytest.raises(InvalidInputError):
        train_to_tolerance(sin_map, 0.1, method="svm")
    with pytest.raises(InvalidInputError):
        train_to_tolerance(sin_map, 0.1, budget=4)


def test_compare_training_cost(sigmoid_synapse):
    result = compare_training_cost(sigmoid_synapse, seed=0, bp_epochs=5, bp_hidden=4)
    assert set(result) == {"target", "seed", "bp", "elm", "flop_ratio_bp_over_elm"}
    assert result["bp"]["flop_count"] == 5 * 64 * bp_flops_per_example(1, 4, 1)
    assert result["elm"]["reached_bp_error"]
    assert result["flop_ratio_bp_over_elm"] > 0


def test_compare_training_cost_rejects_empty_hidden_budget(sigmoid_synapse):
    settings.elm_max_hidden = 4
    with pytest.raises(InvalidInputError):
        compare_training_cost(sigmoid_synapse, seed=0, bp_epochs=1, bp_hidden=4)


# ----------------------------------------------------------------------
# 保存
# ----------------------------------------------------------------------
def test_net_save_and_load(tmp_path):
    net = init_slfn(2, 5, seed=6, lower=np.zeros(2), upper=np.ones(2)).with_beta(np.arange(5.0))
    net.save(tmp_path / "twin.json")
    loaded = SLFN.load(tmp_path / "twin.json")
    assert np.array_equal(loaded.a, net.a)
    assert np.array_equal(loaded.beta, net.beta)
    assert np.array_equal(loaded.lower, net.lower)
    assert loaded.activation == "sigmoid"


def test_net_file_missing_field():
    with pytest.raises(InvalidInputError, match="beta"):
        SLFN.from_dict({"hidden_count": 1, "input_dim": 1, "output_dim": 1, "a": [0], "b": [0]})
