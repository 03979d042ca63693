import math

import numpy as np
import pytest
import torch

from advtune.models import (
    ARCHITECTURES,
    Classifier,
    ModelSpec,
    NonFiniteGradientError,
    build_model,
    cross_entropy,
    finite_diff_check,
    kl_consistency,
    per_sample_cross_entropy,
)


def test_cross_entropy_uniform_logits():
    for k in (2, 10, 37):
        assert float(cross_entropy(torch.zeros(k), 0)) == pytest.approx(math.log(k), rel=1e-6)


def test_cross_entropy_reference_value():
    logits = torch.tensor([2.0, -1.0, 0.5], dtype=torch.float64)
    expected = -2.0 + math.log(math.exp(2.0) + math.exp(-1.0) + math.exp(0.5))
    assert float(cross_entropy(logits, 0)) == pytest.approx(expected, rel=1e-12)


def test_cross_entropy_batch_and_reductions():
    logits = torch.randn(5, 4, generator=torch.Generator().manual_seed(0))
    y = torch.tensor([0, 1, 2, 3, 0])
    per = per_sample_cross_entropy(logits, y)
    assert per.shape == (5,)
    assert float(cross_entropy(logits, y)) == pytest.approx(float(per.mean()))
    assert float(cross_entropy(logits, y, reduction="sum")) == pytest.approx(float(per.sum()))


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError, match="label out of range"):
        cross_entropy(torch.zeros(3), 3)
    with pytest.raises(ValueError, match="label out of range"):
        cross_entropy(torch.zeros(2, 3), torch.tensor([0, -1]))


def test_kl_consistency():
    a = torch.tensor([[1.0, 2.0, 0.0]], dtype=torch.float64)
    b = torch.tensor([[0.0, 0.0, 0.0]], dtype=torch.float64)
    assert float(kl_consistency(a, a)) == 0.0
    p = torch.softmax(a, 1)
    expected = float((p * (p.log() - math.log(1 / 3))).sum())
    assert float(kl_consistency(a, b)) == pytest.approx(expected, rel=1e-12)
    assert float(kl_consistency(a, b)) > 0


def test_model_spec_roundtrip():
    spec = ModelSpec.for_dataset("resnet18", "cifar10")
    assert ModelSpec.from_dict(spec.to_dict()) == spec
    assert spec.input_shape == (3, 32, 32)


def test_unknown_architecture():
    with pytest.raises(ValueError, match="unsupported architecture"):
        build_model(ModelSpec("vgg", (1, 28, 28)))


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_zoo_output_shape(arch):
    for dataset, shape in (("mnist", (1, 28, 28)), ("cifar10", (3, 32, 32))):
        model = build_model(ModelSpec.for_dataset(arch, dataset), seed=0)
        with model.evaluating():
            assert model.predict(torch.rand(2, *shape)).shape == (2, 10)


def test_build_is_seeded_and_isolated():
    spec = ModelSpec.for_dataset("small_cnn", "mnist")
    torch.manual_seed(123)
    expected = torch.rand(1)
    torch.manual_seed(123)
    a = build_model(spec, seed=4)
    assert torch.equal(torch.rand(1), expected)  # global stream untouched
    b = build_model(spec, seed=4)
    assert torch.equal(a.flat_parameters(), b.flat_parameters())
    assert not torch.equal(a.flat_parameters(), build_model(spec, seed=5).flat_parameters())


def test_predict_single_and_batch():
    model = build_model(ModelSpec.for_dataset("small_cnn", "mnist"), seed=0).eval()
    x = torch.rand(3, 1, 28, 28)
    torch.testing.assert_close(model.predict(x[1]), model.predict(x)[1], rtol=1e-5, atol=1e-6)


def test_linear_input_grad_closed_form():
    """For f(x) = W x + b the CE gradient is W^T (softmax(f(x)) - e_y)."""
    model = build_model(ModelSpec("linear", (1, 4, 5), 6), seed=2, dtype=torch.float64)
    W = model.net[1].weight.detach().numpy()
    b = model.net[1].bias.detach().numpy()
    x = np.random.default_rng(0).random((3, 1, 4, 5))
    y = np.array([0, 5, 2])
    g = model.input_grad(torch.from_numpy(x), torch.from_numpy(y)).numpy()
    for i in range(3):
        z = W @ x[i].reshape(-1) + b
        p = np.exp(z - z.max())
        p /= p.sum()
        p[y[i]] -= 1
        np.testing.assert_allclose(g[i].reshape(-1), W.T @ p, rtol=1e-10, atol=1e-14)


def test_input_grad_is_per_sample_in_eval_mode():
    model = build_model(ModelSpec.for_dataset("resnet18", "cifar10"), seed=0)
    x = torch.rand(4, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    y = torch.tensor([1, 2, 3, 4])
    with model.evaluating():
        full = model.input_grad(x, y)
        single = model.input_grad(x[2:3], y[2:3])
    torch.testing.assert_close(full[2:3], single, rtol=1e-4, atol=1e-7)


def test_input_grad_non_finite():
    model = build_model(ModelSpec("linear", (1, 2, 2), 3), seed=0)
    with torch.no_grad():
        model.net[1].weight.fill_(float("nan"))
    with pytest.raises(NonFiniteGradientError):
        model.input_grad(torch.rand(1, 1, 2, 2), torch.tensor([0]))


def test_evaluating_restores_mode():
    model = build_model(ModelSpec.for_dataset("resnet18", "cifar10"), seed=0).train()
    with model.evaluating():
        assert model.mode == "eval"
    assert model.mode == "train"


def test_param_grad_matches_autograd():
    model = build_model(ModelSpec("linear", (1, 2, 3), 4), seed=0, dtype=torch.float64)
    x, y = torch.rand(5, 1, 2, 3, dtype=torch.float64), torch.tensor([0, 1, 2, 3, 0])
    grads = model.param_grad(x, y)
    loss = cross_entropy(model(x), y)
    loss.backward()
    for g, p in zip(grads, model.parameters()):
        torch.testing.assert_close(g, p.grad)


def test_clone_is_independent():
    model = build_model(ModelSpec.for_dataset("small_cnn", "mnist"), seed=0)
    twin = model.clone()
    with torch.no_grad():
        next(twin.parameters()).add_(1.0)
    assert not torch.equal(model.flat_parameters(), twin.flat_parameters())


def test_finite_diff_detects_wrong_gradient():
    model = build_model(ModelSpec("linear", (1, 6, 6), 5), seed=0, dtype=torch.float64)
    x = torch.rand(1, 1, 6, 6, dtype=torch.float64)
    assert finite_diff_check(model, x, 2) < 1e-6
    wrong = model.input_grad

    model.input_grad = lambda *a, **k: 1.5 * wrong(*a, **k)
    assert finite_diff_check(model, x, 2) > 0.1


def test_finite_diff_double_precision_is_tight():
    model = build_model(ModelSpec.for_dataset("small_cnn", "mnist"), seed=0, dtype=torch.float64)
    x = torch.rand(1, 1, 28, 28, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    assert finite_diff_check(model, x, 7, h=1e-6) < 1e-5


def test_finite_diff_rejects_bad_args():
    model = build_model(ModelSpec("linear", (1, 2, 2), 3), seed=0)
    with pytest.raises(ValueError):
        finite_diff_check(model, torch.rand(1, 1, 2, 2), 0, h=0)
    with pytest.raises(ValueError):
        finite_diff_check(model, torch.rand(2, 1, 2, 2), [0, 1])


def test_classifier_without_spec():
    net = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(4, 2))
    clf = Classifier(net)
    assert clf.predict(torch.rand(3, 1, 2, 2)).shape == (3, 2)


def test_finite_diff_detects_misplaced_components():
    # same norm as the true gradient, wrong coordinates
    model = build_model(ModelSpec.for_dataset("small_cnn", "mnist"), seed=0, dtype=torch.float64)
    x = torch.rand(1, 1, 28, 28, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    true_grad = model.input_grad
    model.input_grad = lambda *a, **k: true_grad(*a, **k).flip(-1)
    assert finite_diff_check(model, x, 7) > 0.1
