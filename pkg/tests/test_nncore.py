"""Network engine: forward/backward, losses, optimizers, gradient oracle."""
import math

import numpy as np
import pytest

from fedmarket.errors import BatchNormBatchError, ContractError
from fedmarket.nncore import (
    BatchNorm1d,
    LossSpec,
    MlpModel,
    OptimizerState,
    combined_loss,
    cross_entropy,
    gradient_check,
    kl_distill,
    optimizer_step,
    softmax_t,
)

# Regression fixture: recorded from this engine's first run and frozen.
GOLDEN_BATCH = np.array(
    [
        [1.2301533574825742e-03, 2.9874553750846988e-01,
         -2.7413785536221758e-01, -8.9059183875727421e-01],
        [-4.5467078517172255e-01, -9.9164655499646237e-01,
         6.0143602597438485e-02, 1.3402152455545335e+00],
    ]
)
GOLDEN_LOGITS = np.array(
    [
        [0.1655064207491195, 0.08003830382242647, 0.211131001748818],
        [-0.2931696739244708, -0.00403837458471026, 0.20493934556287363],
    ]
)


def small_model(seed=0, hidden=(6,), dims=(4, 3), batchnorm=False):
    return MlpModel(dims[0], hidden, dims[1], batchnorm=batchnorm,
                    rng=np.random.default_rng(seed))


class TestForward:
    def test_zero_weight_single_dense_gives_zero_logits(self):
        model = MlpModel(4, (), 3)
        model.set_params(np.zeros(model.param_count))
        batch = np.random.default_rng(1).normal(size=(5, 4))
        np.testing.assert_array_equal(model.forward(batch, "eval"), np.zeros((5, 3)))

    def test_identity_dense_maps_identity_batch(self):
        model = MlpModel(3, (), 3)
        vec = np.concatenate([np.eye(3).ravel(), np.zeros(3)])
        model.set_params(vec)
        np.testing.assert_array_equal(model.forward(np.eye(3), "eval"), np.eye(3))

    def test_golden_two_layer_forward(self):
        model = MlpModel(4, (5,), 3, rng=np.random.default_rng(42))
        np.testing.assert_allclose(
            model.forward(GOLDEN_BATCH, "eval"), GOLDEN_LOGITS, rtol=1e-12
        )

    def test_dimension_mismatch_rejected(self):
        model = small_model()
        with pytest.raises(ContractError):
            model.forward(np.zeros((2, 7)), "eval")

    def test_logits_shape_contract(self):
        model = small_model()
        out = model.forward(np.zeros((9, 4)), "eval")
        assert out.shape == (9, 3)


class TestSoftmaxT:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax_t(np.array([0.0, 0.0]), 1.0), [0.5, 0.5])

    def test_closed_form_two_thirds(self):
        p = softmax_t(np.array([math.log(2.0), 0.0]), 1.0)
        np.testing.assert_allclose(p, [2.0 / 3.0, 1.0 / 3.0], rtol=1e-14)

    def test_infinite_temperature_limit(self):
        p = softmax_t(np.array([math.log(2.0), 0.0]), 1e6)
        np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-5)

    def test_scaling_logits_and_temperature_together_is_exact(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(6, 4))
        np.testing.assert_array_equal(softmax_t(2.0 * z, 2.0), softmax_t(z, 1.0))

    def test_rejects_nonfinite(self):
        with pytest.raises(ContractError):
            softmax_t(np.array([np.inf, 0.0]), 1.0)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = cross_entropy(np.zeros((3, 4)), np.array([0, 1, 2]))
        assert loss == pytest.approx(math.log(4.0), rel=1e-12)

    def test_confident_correct_is_tiny(self):
        logits = np.zeros((2, 3))
        logits[0, 1] = 1000.0
        logits[1, 2] = 1000.0
        loss, _ = cross_entropy(logits, np.array([1, 2]))
        assert 0 <= loss < 1e-6

    def test_closed_form_ln3(self):
        loss, _ = cross_entropy(np.array([[math.log(2.0), 0.0]]), np.array([1]))
        assert loss == pytest.approx(math.log(3.0), rel=1e-12)

    def test_gradient_is_softmax_minus_onehot_over_rows(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(5, 3))
        labels = np.array([0, 2, 1, 1, 0])
        _, grad = cross_entropy(logits, labels)
        expected = softmax_t(logits, 1.0)
        expected[np.arange(5), labels] -= 1.0
        np.testing.assert_allclose(grad, expected / 5.0, rtol=1e-12)

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ContractError):
            cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


class TestKlDistill:
    def test_zero_when_teacher_equals_student(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(6, 5))
        teacher = softmax_t(z, 2.0)
        loss, grad = kl_distill(z, teacher, 2.0)
        assert 0.0 <= loss < 1e-12
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_closed_form_value(self):
        loss, _ = kl_distill(np.array([[0.0, 0.0]]), np.array([[0.25, 0.75]]), 1.0)
        expected = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
        assert loss == pytest.approx(expected, rel=1e-12)

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            z = 3.0 * rng.normal(size=(4, 6))
            teacher = rng.dirichlet(np.ones(6), size=4)
            loss, _ = kl_distill(z, teacher, 1.0)
            assert loss >= 0.0
            if loss < 1e-12:
                np.testing.assert_allclose(softmax_t(z, 1.0), teacher, atol=1e-9)

    def test_unnormalized_teacher_rejected(self):
        with pytest.raises(ContractError):
            kl_distill(np.zeros((1, 3)), np.array([[0.5, 0.4, 0.3]]), 1.0)

    def test_teacher_gets_no_gradient(self):
        # gradient array covers the student only; teacher array is untouched
        teacher = np.array([[0.3, 0.7]])
        before = teacher.copy()
        _, grad = kl_distill(np.array([[0.1, -0.4]]), teacher, 1.5)
        assert grad.shape == (1, 2)
        np.testing.assert_array_equal(teacher, before)


class TestCombinedLoss:
    def test_lambda_zero_reduces_to_plain_ce(self):
        model = small_model(seed=1)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(8, 4))
        y = rng.integers(0, 3, size=8)
        loss, _ = combined_loss(model, LossSpec(lam=0.0, temperature=2.0),
                                local_batch=x, labels=y)
        ce, _ = cross_entropy(model.forward(x, "eval"), y)
        assert loss == pytest.approx(ce, rel=1e-12)

    def test_lambda_one_reduces_to_scaled_kl(self):
        model = small_model(seed=2)
        rng = np.random.default_rng(5)
        x = rng.normal(size=(8, 4))
        teacher = rng.dirichlet(np.ones(3), size=8)
        spec = LossSpec(lam=1.0, temperature=3.0)
        loss, _ = combined_loss(model, spec, ref_batch=x, teacher_probs=teacher)
        kl, _ = kl_distill(model.forward(x, "eval"), teacher, 3.0)
        assert loss == pytest.approx(9.0 * kl, rel=1e-12)

    def test_prox_at_anchor_contributes_zero(self):
        model = small_model(seed=3)
        rng = np.random.default_rng(6)
        x = rng.normal(size=(8, 4))
        y = rng.integers(0, 3, size=8)
        spec = LossSpec(lam=0.0, temperature=1.0, prox_mu=0.01)
        anchored, _ = combined_loss(model, spec, local_batch=x, labels=y,
                                    global_params=model.get_params())
        free, _ = combined_loss(model, spec, local_batch=x, labels=y)
        assert anchored == free

    def test_all_parts_absent_rejected(self):
        with pytest.raises(ContractError):
            combined_loss(small_model(), LossSpec())


class TestOptimizers:
    def test_zero_gradient_keeps_params(self):
        for kind in ("sgd", "adam"):
            state = OptimizerState.for_model(kind, 1e-3, 4)
            params = np.array([1.0, -1.0, 2.0, 0.5])
            optimizer_step(state, params, np.zeros(4))
            np.testing.assert_array_equal(params, [1.0, -1.0, 2.0, 0.5])

    def test_sgd_hand_arithmetic(self):
        state = OptimizerState.for_model("sgd", 0.1, 1)
        params = np.array([1.0])
        optimizer_step(state, params, np.array([2.0]))
        assert params[0] == pytest.approx(0.8, abs=1e-15)

    def test_adam_first_step_magnitude_near_lr(self):
        for g in (1e-5, 1e-2, 1.0, 50.0, -7.0):
            state = OptimizerState.for_model("adam", 1e-3, 1)
            params = np.array([0.3])
            optimizer_step(state, params, np.array([float(g)]))
            assert abs(params[0] - 0.3) == pytest.approx(1e-3, rel=0.01)

    def test_step_is_bit_deterministic(self):
        rng = np.random.default_rng(10)
        grads = rng.normal(size=30)
        results = []
        for _ in range(2):
            state = OptimizerState.for_model("adam", 1e-3, 30)
            params = np.linspace(-1, 1, 30)
            for _ in range(5):
                optimizer_step(state, params, grads)
            results.append(params.copy())
        np.testing.assert_array_equal(results[0], results[1])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ContractError):
            optimizer_step(OptimizerState.for_model("sgd", 0.1, 2),
                           np.zeros(2), np.zeros(3))


class TestGradientCheck:
    def closure(self, model, spec, **parts):
        return lambda: combined_loss(model, spec, **parts)

    def test_ce_only_two_layer(self):
        model = small_model(seed=11, hidden=(6, 5))
        rng = np.random.default_rng(12)
        x = rng.normal(size=(8, 4))
        y = rng.integers(0, 3, size=8)
        err = gradient_check(model, self.closure(model, LossSpec(lam=0.0),
                                                 local_batch=x, labels=y))
        assert err <= 1e-4

    def test_kl_only_fixed_teacher(self):
        model = small_model(seed=13, hidden=(6,))
        rng = np.random.default_rng(14)
        x = rng.normal(size=(8, 4))
        teacher = rng.dirichlet(np.ones(3), size=8)
        spec = LossSpec(lam=1.0, temperature=2.0)
        err = gradient_check(model, self.closure(model, spec,
                                                 ref_batch=x, teacher_probs=teacher))
        assert err <= 1e-4

    def test_prox_only_quadratic(self):
        model = small_model(seed=15)
        anchor = model.get_params() + 0.1
        mu = 0.01

        def closure():
            diff = model.params - anchor
            return 0.5 * mu * float(diff @ diff), mu * diff

        assert gradient_check(model, closure) <= 1e-6

    def test_batchnorm_model(self):
        model = small_model(seed=16, hidden=(6,), batchnorm=True)
        rng = np.random.default_rng(17)
        x = rng.normal(size=(8, 4))
        y = rng.integers(0, 3, size=8)
        err = gradient_check(model, self.closure(model, LossSpec(lam=0.0),
                                                 local_batch=x, labels=y))
        assert err <= 1e-4

    def test_nonfinite_loss_rejected(self):
        model = small_model()
        with pytest.raises(ContractError):
            gradient_check(model, lambda: (float("nan"), np.zeros(model.param_count)))


class TestBatchNorm:
    def test_eval_is_pure(self):
        model = small_model(seed=20, batchnorm=True)
        x = np.random.default_rng(21).normal(size=(5, 4))
        buffers_before = model.get_buffers()
        out1 = model.forward(x, "eval")
        out2 = model.forward(x, "eval")
        np.testing.assert_array_equal(out1, out2)
        for a, b in zip(buffers_before, model.get_buffers()):
            np.testing.assert_array_equal(a, b)

    def test_train_updates_running_stats_by_momentum_rule(self):
        layer = BatchNorm1d(3, momentum=0.1)
        params = np.zeros(6)
        grads = np.zeros(6)
        layer.bind(params, grads, 0)
        layer.init(None)
        x = np.array([[1.0, 2.0, 3.0], [3.0, 6.0, 9.0], [5.0, 4.0, 0.0]])
        layer.forward(x, train=True)
        mean = x.mean(axis=0)
        var_unbiased = x.var(axis=0) * 3 / 2
        np.testing.assert_allclose(layer.running_mean, 0.1 * mean, rtol=1e-12)
        np.testing.assert_allclose(layer.running_var, 0.9 + 0.1 * var_unbiased, rtol=1e-12)

    def test_singleton_train_batch_is_contract_violation(self):
        model = small_model(seed=22, batchnorm=True)
        with pytest.raises(BatchNormBatchError):
            model.forward(np.zeros((1, 4)), "train")

    def test_eval_singleton_is_fine(self):
        model = small_model(seed=23, batchnorm=True)
        assert model.forward(np.zeros((1, 4)), "eval").shape == (1, 3)


class TestModelPlumbing:
    def test_param_views_alias_flat_vector(self):
        model = small_model(seed=24)
        model.params[...] = 0.0
        first_dense = model.layers[0]
        assert float(first_dense.w.sum()) == 0.0
        model.params[0] = 5.0
        assert first_dense.w[0, 0] == 5.0

    def test_clone_matches_original(self):
        model = small_model(seed=25, batchnorm=True)
        x = np.random.default_rng(26).normal(size=(6, 4))
        model.forward(x, "train")  # move the running stats off their init
        twin = model.clone()
        np.testing.assert_array_equal(model.forward(x, "eval"), twin.forward(x, "eval"))

    def test_param_count_formula(self):
        model = MlpModel(10, (7,), 4)
        assert model.param_count == 10 * 7 + 7 + 7 * 4 + 4
