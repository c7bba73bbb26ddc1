import numpy as np
import pytest

from nptn.errors import ContractError
from nptn.gradcheck import CorruptedBackward, check_layer, finite_diff_grad, run_suite, standard_cases
from nptn.layers import Conv2d, Linear, MaxPool2d, Nptn, NptnLayerSpec, softmax_xent
from nptn.tensor import make_rng

CASES = standard_cases()
IDS = [c[0] for c in CASES]


class TestFiniteDiff:
    def test_quadratic(self):
        x = np.array([3.0])
        assert abs(finite_diff_grad(lambda v: v[0] ** 2, x)[0] - 6.0) < 1e-9

    def test_linear(self):
        x = make_rng(0).standard_normal((3, 4))
        np.testing.assert_allclose(finite_diff_grad(np.sum, x), np.ones((3, 4)), rtol=1e-9)

    def test_restores_input(self):
        x = make_rng(1).standard_normal(5)
        before = x.copy()
        finite_diff_grad(lambda v: np.sum(v ** 3), x)
        np.testing.assert_array_equal(x, before)

    def test_non_finite(self):
        with pytest.raises(ContractError), np.errstate(divide="ignore", invalid="ignore"):
            finite_diff_grad(lambda v: np.log(v[0]), np.array([0.0]))

    def test_one_layer_net_input_gradient(self):
        rng = make_rng(2)
        lin = Linear(6, 4)
        lin.params = {k: rng.standard_normal(v.shape) for k, v in lin.params.items()}
        x = rng.standard_normal((5, 6))
        labels = np.array([0, 1, 2, 3, 0])
        _, d_logits = softmax_xent(lin.forward(x), labels)
        analytic = lin.backward(d_logits)
        numeric = finite_diff_grad(lambda v: softmax_xent(lin.forward(v), labels)[0], x)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-8)


@pytest.mark.parametrize("name,factory,shape", CASES, ids=IDS)
def test_layer_passes(name, factory, shape):
    report = check_layer(factory(), shape, trials=20, rng=make_rng(100))
    assert report.passed, report.max_rel_error


@pytest.mark.parametrize("name,factory,shape", CASES, ids=IDS)
def test_corrupted_backward_fails(name, factory, shape):
    report = check_layer(CorruptedBackward(factory(), 1.01), shape, trials=3, rng=make_rng(101))
    assert not report.passed


def test_resampling_is_counted():
    # near-ties are rare at the default margin; demand a large one to force redraws
    layer = Nptn(NptnLayerSpec(1, 1, 2, 1))
    report = check_layer(layer, (1, 1, 2, 2), trials=5, rng=make_rng(3), min_margin=0.5)
    assert report.passed
    assert report.resampled > 0


def test_unachievable_margin_raises():
    with pytest.raises(ContractError):
        check_layer(MaxPool2d(), (1, 1, 2, 2), trials=1, min_margin=1e9, max_resample=5)


def test_suite_and_mutated_suite():
    clean = run_suite(trials=2, seed=4)
    assert [r.layer for r in clean] == IDS and all(r.passed for r in clean)
    assert not any(r.passed for r in run_suite(trials=2, seed=4, mutation_factor=1.01))


def test_first_layer_skips_input_gradient():
    layer = Conv2d(1, 2, 3, pad=1, rng=make_rng(0))
    layer.input_grad = False
    y = layer.forward(make_rng(1).standard_normal((2, 1, 4, 4)).astype(np.float32))
    assert layer.backward(np.ones_like(y)) is None
    assert layer.grads["w"].shape == (2, 1, 3, 3)
