import math

import numpy as np
import pytest
import torch

from advtune.attacks import (
    AdversarialBatch,
    AttackBudget,
    apply_dra_mask,
    attack_success,
    ball_bounds,
    calibrate_attack_strength,
    dra,
    dra_mask,
    dra_trajectory,
    fgsm,
    load_attack_archive,
    match_strengths,
    pgd,
    project_linf,
    retained_count,
    run_attack,
    save_attack_archive,
    significance_mask,
)
from advtune.data import LabeledDataset, make_toy_blobs
from advtune.models import ModelSpec, build_model, per_sample_cross_entropy


def linear_model(shape=(1, 4, 4), k=3, seed=0, dtype=torch.float64):
    return build_model(ModelSpec("linear", shape, k), seed=seed, dtype=dtype)


def random_case(i: int):
    """Deterministic (model, x, y) drawn from a small zoo, inputs in [0, 1]."""
    rng = np.random.default_rng(i)
    arch = ["linear", "small_cnn"][i % 2]
    model = build_model(ModelSpec.for_dataset(arch, "mnist"), seed=int(rng.integers(1000)))
    n = int(rng.integers(1, 4))
    x = torch.from_numpy(rng.random((n, 1, 28, 28)).astype(np.float32))
    x[x < 0.3] = 0.0  # saturated pixels, as in digit images
    y = torch.from_numpy(rng.integers(0, 10, n))
    return model, x, y, rng


# --------------------------------------------------------------------------- budgets


def test_budget_validation():
    with pytest.raises(ValueError):
        AttackBudget(-0.1)
    with pytest.raises(ValueError):
        AttackBudget(0.1, "l2")
    with pytest.raises(ValueError):
        AttackBudget(0.1, iterations=0)
    with pytest.raises(ValueError):
        AttackBudget(0.1, "l1_total", 4, significant_fraction=1.5)
    with pytest.raises(ValueError, match="fixed"):
        AttackBudget(1.0, "l1_total", 4, step_size=0.5)


def test_dra_step_is_eps_over_t():
    assert AttackBudget.dra(2.0, 1 / 3, 5).step_size == pytest.approx(0.4)
    assert AttackBudget.pgd(0.3).step_size == pytest.approx(0.015)
    assert AttackBudget.pgd(0.3).iterations == 20


# --------------------------------------------------------------------------- FGSM / PGD


def test_ball_bounds_exact():
    for dtype in (torch.float32, torch.float64):
        x = torch.rand(100_000, dtype=dtype, generator=torch.Generator().manual_seed(0))
        for eps in (0.3, 8 / 255, 1e-7):
            lo, hi = ball_bounds(x, eps)
            assert ((hi.double() - x.double()) <= eps).all()
            assert ((x.double() - lo.double()) <= eps).all()
            assert (lo <= x).all() and (x <= hi).all()


def test_fgsm_closed_form_linear():
    model = linear_model()
    x = torch.rand(5, 1, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    y = torch.tensor([0, 1, 2, 0, 1])
    W = model.net[1].weight.detach()
    p = torch.softmax(model.predict(x), 1)
    p[torch.arange(5), y] -= 1
    grad = (p @ W).reshape(x.shape)
    expected = torch.clamp(x + 0.1 * torch.sign(grad), 0, 1)
    torch.testing.assert_close(fgsm(model, x, y, 0.1).x_adv, expected, rtol=0, atol=1e-15)


@pytest.mark.parametrize("arch", ["linear", "small_cnn", "resnet18"])
def test_fgsm_equals_single_step_pgd(arch):
    model = build_model(ModelSpec.for_dataset(arch, "mnist"), seed=3)
    x = torch.rand(4, 1, 28, 28, generator=torch.Generator().manual_seed(0))
    y = torch.tensor([0, 3, 5, 9])
    a = fgsm(model, x, y, 0.2).x_adv
    b = pgd(model, x, y, AttackBudget(0.2, "l_inf", 1, 0.2, False)).x_adv
    assert torch.equal(a, b)


def test_pgd_invariants_on_every_iterate():
    for i in range(30):
        model, x, y, rng = random_case(i)
        eps = float(rng.choice([0.0, 0.05, 0.1, 0.3, 1.0]))
        T = int(rng.integers(1, 6))
        budget = AttackBudget(eps, "l_inf", T, float(rng.uniform(0, 2)) * eps, bool(rng.integers(2)))

        def check(t, x_t):
            d = (x_t.double() - x.double()).abs().flatten(1).amax(1)
            assert (d <= eps).all(), (i, t)
            assert x_t.min() >= 0 and x_t.max() <= 1

        out = pgd(model, x, y, budget, torch.Generator().manual_seed(i), callback=check)
        assert (out.linf_norms <= eps).all()


def test_pgd_random_start_reproducible():
    model = linear_model((1, 28, 28), 10, dtype=torch.float32)
    x = torch.rand(3, 1, 28, 28)
    y = torch.tensor([1, 2, 3])
    b = AttackBudget.pgd(0.1, iterations=3)
    r1 = pgd(model, x, y, b, torch.Generator().manual_seed(7)).x_adv
    r2 = pgd(model, x, y, b, torch.Generator().manual_seed(7)).x_adv
    r3 = pgd(model, x, y, b, torch.Generator().manual_seed(8)).x_adv
    assert torch.equal(r1, r2) and not torch.equal(r1, r3)


def test_pgd_raises_loss():
    model = build_model(ModelSpec.for_dataset("small_cnn", "mnist"), seed=0).eval()
    x = torch.rand(16, 1, 28, 28, generator=torch.Generator().manual_seed(0))
    y = model.predict(x).argmax(1)
    x_adv = pgd(model, x, y, AttackBudget.pgd(0.1, 10, 0.02, False)).x_adv
    clean = per_sample_cross_entropy(model.predict(x), y)
    adv = per_sample_cross_entropy(model.predict(x_adv), y)
    assert (adv >= clean - 1e-6).all() and adv.mean() > clean.mean()


def test_pgd_zero_epsilon_is_identity():
    model, x, y, _ = random_case(1)
    assert torch.equal(pgd(model, x, y, AttackBudget(0.0, "l_inf", 3, 0.0, True)).x_adv, x)


def test_pgd_rejects_l1_budget():
    model, x, y, _ = random_case(0)
    with pytest.raises(ValueError):
        pgd(model, x, y, AttackBudget.dra(1.0, 1.0, 2))


def test_project_linf_clips_to_unit_box():
    x = torch.tensor([0.0, 0.5, 1.0])
    out = project_linf(torch.tensor([-1.0, 2.0, 2.0]), x, 0.3)
    assert out.tolist() == [0.0, pytest.approx(0.8), 1.0]


# --------------------------------------------------------------------------- DRA


@pytest.mark.parametrize(
    "p,n,k",
    [(0.0, 784, 0), (1.0, 784, 784), (2 / 3, 784, 523), (1 / 3, 3072, 1024), (1 / 6, 3072, 512),
     (0.5, 3072, 1536), (1e-9, 10, 1)],
)
def test_retained_count(p, n, k):
    assert retained_count(p, n) == k


def test_significance_mask_keeps_ties():
    score = torch.tensor([[3.0, 1.0, 3.0, 3.0, 0.5]])
    assert significance_mask(score, 0.2).tolist() == [[True, False, True, True, False]]
    assert significance_mask(score, 0.0).sum() == 0
    assert significance_mask(score, 1.0).all()


def test_dra_step_has_l1_norm_alpha():
    # interior point, tiny budget: clipping never activates, so the total moved is eps
    model = linear_model((1, 6, 6), 4)
    x = torch.full((2, 1, 6, 6), 0.5, dtype=torch.float64)
    y = torch.tensor([0, 3])
    traj = dra_trajectory(model, x, y, 0.05, 5)
    l1 = (traj.x_end - x).flatten(1).abs().sum(1)
    torch.testing.assert_close(l1, torch.full((2,), 0.05, dtype=torch.float64), rtol=1e-12, atol=0)
    assert traj.skipped_steps.tolist() == [0, 0]


def test_dra_direction_is_normalized_gradient():
    model = linear_model((1, 3, 3), 3)
    x = torch.full((1, 1, 3, 3), 0.5, dtype=torch.float64)
    y = torch.tensor([1])
    g = model.input_grad(x, y)
    traj = dra_trajectory(model, x, y, 0.01, 1)
    torch.testing.assert_close(traj.x_end - x, 0.01 * g / g.abs().sum(), rtol=1e-10, atol=1e-16)


def test_dra_invariants():
    for i in range(30):
        model, x, y, rng = random_case(i)
        eps = float(rng.choice([0.1, 1.0, 10.0, 80.0]))
        T = int(rng.integers(1, 6))
        traj = dra_trajectory(model, x, y, eps, T)
        previous = None
        for p in (0.0, 1 / 6, 1 / 3, 0.5, 2 / 3, 1.0):
            mask = dra_mask(traj, p)
            out = apply_dra_mask(traj, p)
            assert (out.l1_norms <= eps).all()
            assert out.x_adv.min() >= 0 and out.x_adv.max() <= 1
            changed = out.x_adv != x
            assert not (changed & ~mask).any()  # support inside the mask
            assert (mask.flatten(1).sum(1) >= retained_count(p, mask[0].numel())).all()
            if previous is not None:
                assert not (previous & ~mask).any()  # nested in p
            previous = mask


def test_dra_p_one_is_unmasked_endpoint():
    for i in range(5):
        model, x, y, _ = random_case(i)
        traj = dra_trajectory(model, x, y, 5.0, 4)
        assert torch.equal(dra(model, x, y, 5.0, 1.0, 4).x_adv, traj.x_end)


def test_dra_p_zero_is_clean():
    model, x, y, _ = random_case(2)
    assert torch.equal(dra(model, x, y, 5.0, 0.0, 3).x_adv, x)


def test_dra_zero_gradient_skips():
    model = linear_model((1, 2, 2), 2)
    with torch.no_grad():
        model.net[1].weight.zero_()
    x = torch.rand(3, 1, 2, 2, dtype=torch.float64)
    traj = dra_trajectory(model, x, torch.tensor([0, 1, 0]), 1.0, 4)
    assert traj.skipped_steps.tolist() == [4, 4, 4]
    assert torch.equal(traj.x_end, x)


def test_dra_literal_mask_rule_compares_pixels():
    model, x, y, _ = random_case(3)
    traj = dra_trajectory(model, x, y, 10.0, 3)
    literal = dra_mask(traj, 0.5, "literal")
    k = retained_count(0.5, x[0].numel())
    threshold = traj.final_grad.abs().flatten(1).topk(k, dim=1).values[:, -1]
    expected = traj.x_end >= threshold.reshape(-1, 1, 1, 1)
    assert torch.equal(literal, expected)
    with pytest.raises(ValueError):
        dra_mask(traj, 0.5, "other")


def test_run_attack_dispatch():
    model, x, y, _ = random_case(0)
    assert torch.equal(run_attack(model, x, y, AttackBudget.dra(3.0, 0.5, 2)).x_adv, dra(model, x, y, 3.0, 0.5, 2).x_adv)
    b = AttackBudget(0.1, "l_inf", 2, 0.05, False)
    assert torch.equal(run_attack(model, x, y, b).x_adv, pgd(model, x, y, b).x_adv)


# --------------------------------------------------------------------------- measurement


def test_attack_success_counts():
    ds = make_toy_blobs([[0.1, 0.1], [0.9, 0.9]], 0.02, 20, seed=0)
    model = build_model(ModelSpec("linear", (1, 1, 2), 2), seed=0, dtype=torch.float64)
    with torch.no_grad():
        model.net[1].weight.copy_(torch.tensor([[-1.0, -1.0], [1.0, 1.0]]))
        model.net[1].bias.copy_(torch.tensor([1.0, -1.0]))
    res = attack_success(model, ds, lambda x, y: x)
    assert res == {"natural_accuracy": 1.0, "robust_accuracy": 1.0, "success_rate_on_correct": 0.0, "n": 40}
    flip = attack_success(model, ds, lambda x, y: 1 - x)
    assert flip["robust_accuracy"] == 0.0 and flip["success_rate_on_correct"] == 1.0


def test_attack_success_empty_and_nan():
    model = linear_model((1, 1, 2), 2)
    empty = LabeledDataset(np.zeros((0, 1, 1, 2)), np.zeros(0), class_count=2)
    with pytest.raises(ValueError, match="empty"):
        attack_success(model, empty, lambda x, y: x)
    ds = LabeledDataset(np.full((2, 1, 1, 2), 0.5), [0, 0], class_count=2)
    with torch.no_grad():
        model.net[1].bias.copy_(torch.tensor([0.0, 5.0]))
    assert math.isnan(attack_success(model, ds, lambda x, y: x)["success_rate_on_correct"])


# --------------------------------------------------------------------------- calibration


def test_match_strengths_examples():
    ref = [(0.1, 0.9), (0.2, 0.5), (0.3, 0.1)]
    cand = [(1.0, 0.95), (2.0, 0.6), (4.0, 0.45), (8.0, 0.2)]
    m = match_strengths(ref, cand)
    assert [x.status for x in m] == ["matched", "matched", "no match"]
    assert m[0].candidate_epsilon == 1.0
    assert m[1].candidate_epsilon == 4.0  # |0.45 - 0.5| < |0.6 - 0.5|
    assert m[1].interpolated_epsilon == pytest.approx(2.0 + (0.5 - 0.6) * 2.0 / (0.45 - 0.6))
    assert match_strengths(ref, cand, tolerance=0.15)[2].status == "matched"


def test_match_strengths_tie_break():
    m = match_strengths([(3.0, 0.5)], [(1.0, 0.6), (5.0, 0.4)])
    assert m[0].candidate_epsilon == 1.0  # equal accuracy gap, equal distance: smaller eps
    m = match_strengths([(4.5, 0.5)], [(1.0, 0.6), (5.0, 0.4)])
    assert m[0].candidate_epsilon == 5.0


def test_calibrate_attack_strength_runs():
    ds = make_toy_blobs([[0.3, 0.3], [0.7, 0.7]], 0.05, 25, seed=2)
    model = build_model(ModelSpec("linear", (1, 1, 2), 2), seed=0, dtype=torch.float64)
    with torch.no_grad():
        model.net[1].weight.copy_(torch.tensor([[-1.0, -1.0], [1.0, 1.0]]))
        model.net[1].bias.copy_(torch.tensor([1.0, -1.0]))

    def make_pgd(eps):
        return lambda x, y: pgd(model, x, y, AttackBudget(eps, "l_inf", 10, eps / 4, False))

    def make_dra(eps):
        return lambda x, y: dra(model, x, y, eps, 1.0, 5)

    cal = calibrate_attack_strength(model, ds, (make_pgd, [0.0, 0.1, 0.2, 0.3]), (make_dra, [0.0, 0.2, 0.4, 0.8]))
    accs = [a for _, a in cal.candidate_curve]
    assert accs == sorted(accs, reverse=True)
    assert len(cal.matches) == 4
    with pytest.raises(ValueError, match="sorted"):
        calibrate_attack_strength(model, ds, (make_pgd, [0.2, 0.1]), (make_dra, [0.1]))


# --------------------------------------------------------------------------- archive


def test_attack_archive_roundtrip(tmp_path):
    model, x, y, _ = random_case(1)
    batch = dra(model, x, y, 4.0, 0.5, 3)
    save_attack_archive(tmp_path / "a.npz", batch)
    back = load_attack_archive(tmp_path / "a.npz")
    assert torch.equal(back.x_adv, batch.x_adv) and torch.equal(back.labels, batch.labels)
    assert back.budget == batch.budget
    assert torch.equal(back.l1_norms, batch.l1_norms)


def test_attack_archive_detects_tampering(tmp_path):
    model, x, y, _ = random_case(0)
    batch = fgsm(model, x, y, 0.1)
    save_attack_archive(tmp_path / "a.npz", batch)
    with np.load(tmp_path / "a.npz") as f:
        parts = dict(f)
    parts["x_adv"] = parts["x_adv"] * 0.5
    np.savez(tmp_path / "b.npz", **parts)
    with pytest.raises(ValueError, match="disagree"):
        load_attack_archive(tmp_path / "b.npz")


def test_adversarial_batch_norms():
    x = torch.zeros(1, 1, 1, 3)
    b = AdversarialBatch(torch.tensor([[[[0.1, -0.2, 0.0]]]]), x, torch.tensor([0]), AttackBudget(0.2))
    assert b.linf_norms.item() == pytest.approx(0.2)
    assert b.l1_norms.item() == pytest.approx(0.3)
