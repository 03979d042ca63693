"""White-box attacks: FGSM, L-inf PGD and the dynamically regulated adversary (DRA).

All attacks take a :class:`~advtune.models.Classifier` (anything exposing
``input_grad`` and ``predict`` works) and tensors ``x`` in [0, 1] with shape
(N, C, H, W). Gradients are always queried in eval mode.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import LabeledDataset, iterate_batches

NORMS = ("l_inf", "l1_total")
MASK_RULES = ("gradient", "literal")


@dataclass(frozen=True)
class AttackBudget:
    """Perturbation constraint set.

    For ``l1_total`` budgets (DRA) the step size is forced to epsilon / T.
    ``significant_fraction`` is ignored by l_inf attacks.
    """

    epsilon: float
    norm: str = "l_inf"
    iterations: int = 1
    step_size: float | None = None
    random_start: bool = False
    significant_fraction: float = 1.0

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be a positive integer")
        if not 0.0 <= self.significant_fraction <= 1.0:
            raise ValueError("significant_fraction must lie in [0, 1]")
        if self.norm == "l1_total":
            alpha = self.epsilon / self.iterations
            if self.step_size is not None and not math.isclose(self.step_size, alpha):
                raise ValueError("DRA step size is fixed to epsilon / iterations")
            object.__setattr__(self, "step_size", alpha)
        elif self.step_size is None:
            object.__setattr__(self, "step_size", self.epsilon / self.iterations)
        if self.step_size < 0:
            raise ValueError("step_size must be non-negative")

    @classmethod
    def pgd(cls, epsilon, iterations=20, step_size=None, random_start=True) -> "AttackBudget":
        step = epsilon / 20 if step_size is None else step_size
        return cls(epsilon, "l_inf", iterations, step, random_start)

    @classmethod
    def dra(cls, epsilon, p, iterations) -> "AttackBudget":
        return cls(epsilon, "l1_total", iterations, None, False, p)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdversarialBatch:
    x_adv: torch.Tensor
    x_clean: torch.Tensor
    labels: torch.Tensor
    budget: AttackBudget
    linf_norms: torch.Tensor = field(init=False)
    l1_norms: torch.Tensor = field(init=False)
    skipped_steps: torch.Tensor | None = None

    def __post_init__(self):
        delta = (self.x_adv.double() - self.x_clean.double()).flatten(1)
        self.linf_norms = delta.abs().amax(dim=1) if delta.shape[1] else delta.sum(1)
        self.l1_norms = delta.abs().sum(dim=1)


class ZeroGradientWarning(UserWarning):
    pass


def _view(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return v.reshape(-1, *([1] * (like.ndim - 1)))


# --------------------------------------------------------------------------- FGSM / PGD


def _eval_mode(model):
    return model.evaluating() if hasattr(model, "evaluating") else contextlib.nullcontext()


def _prep(model, x, y):
    x = model.as_input(x) if hasattr(model, "as_input") else torch.as_tensor(x)
    return x.detach(), torch.as_tensor(y)


def fgsm(model, x, y, epsilon: float, loss_fn=None) -> AdversarialBatch:
    """x_adv = clip_[0,1](x + eps * sign(grad_x L)), kept exactly inside the eps-ball."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    x, y = _prep(model, x, y)
    with _eval_mode(model):
        g = model.input_grad(x, y, loss_fn)
    x_adv = project_linf(x + epsilon * torch.sign(g), x, epsilon)
    return AdversarialBatch(x_adv, x, y, AttackBudget(epsilon, "l_inf", 1, epsilon, False))


def ball_bounds(x: torch.Tensor, epsilon: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Lower and upper corners of the eps-ball around x, exact in the dtype of x.

    x +/- eps is formed in double precision and rounded to the dtype of x,
    which can land just outside the ball; such bounds are moved one ulp back
    towards x.
    """
    xd = x.double()
    lo, hi = (xd - epsilon).to(x.dtype), (xd + epsilon).to(x.dtype)
    hi = torch.where(hi.double() - xd > epsilon, torch.nextafter(hi, torch.full_like(hi, -math.inf)), hi)
    lo = torch.where(xd - lo.double() > epsilon, torch.nextafter(lo, torch.full_like(lo, math.inf)), lo)
    return lo, hi


def project_linf(x_adv: torch.Tensor, x: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Projection onto the eps-ball around x intersected with [0, 1]."""
    lo, hi = ball_bounds(x, epsilon)
    return torch.clamp(torch.min(torch.max(x_adv, lo), hi), 0.0, 1.0)


def pgd(
    model,
    x,
    y,
    budget: AttackBudget,
    generator: torch.Generator | None = None,
    loss_fn=None,
    callback: Callable[[int, torch.Tensor], None] | None = None,
) -> AdversarialBatch:
    """Iterated sign-gradient ascent projected onto the l_inf ball.

    ``callback(t, x_t)`` is invoked on every iterate, including the start.
    """
    if budget.norm != "l_inf":
        raise ValueError("pgd requires an l_inf budget")
    x, y = _prep(model, x, y)
    eps, alpha = budget.epsilon, budget.step_size
    x_t = x.clone()
    if budget.random_start:
        noise = torch.rand(x.shape, generator=generator, dtype=x.dtype) * (2 * eps) - eps
        x_t = project_linf(x + noise, x, eps)
    if callback:
        callback(0, x_t)
    with _eval_mode(model):
        for t in range(budget.iterations):
            g = model.input_grad(x_t, y, loss_fn)
            x_t = project_linf(x_t + alpha * torch.sign(g), x, eps)
            if callback:
                callback(t + 1, x_t)
    return AdversarialBatch(x_t.detach(), x, y, budget)


# --------------------------------------------------------------------------- DRA


@dataclass
class DRATrajectory:
    """Unmasked DRA endpoint plus the gradient used for ranking."""

    x_clean: torch.Tensor
    x_end: torch.Tensor
    final_grad: torch.Tensor
    labels: torch.Tensor
    epsilon: float
    iterations: int
    skipped_steps: torch.Tensor


def dra_trajectory(model, x, y, epsilon: float, T: int, loss_fn=None) -> DRATrajectory:
    """Run the L1-normalized ascent of DRA without masking.

    Each step moves by alpha * g / ||g||_1 (alpha = epsilon / T) per image and
    is clipped to [0, 1]. Images whose gradient vanishes skip the step; the
    count is kept in ``skipped_steps``. Accumulated rounding that would push
    the L1 norm past eps is shrunk away, and the ranking gradient is taken at
    the final iterate.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if T < 1:
        raise ValueError("T must be a positive integer")
    x, y = _prep(model, x, y)
    alpha = epsilon / T
    x_t = x.clone()
    skipped = torch.zeros(len(x), dtype=torch.long)
    with _eval_mode(model):
        for _ in range(T):
            g = model.input_grad(x_t, y, loss_fn)
            l1 = g.flatten(1).abs().sum(dim=1)
            live = l1 > 0
            skipped += (~live).long()
            step = alpha * g / _view(torch.where(live, l1, torch.ones_like(l1)), g)
            step = torch.where(_view(live, g), step, torch.zeros_like(step))
            x_t = torch.clamp(x_t + step, 0.0, 1.0)
        x_t = _l1_guard(x_t, x, epsilon)
        final_grad = model.input_grad(x_t, y, loss_fn)
    return DRATrajectory(x, x_t.detach(), final_grad, y, epsilon, T, skipped)


def _l1_guard(x_t: torch.Tensor, x: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Shrink perturbations whose float64 L1 norm exceeds eps through rounding."""
    margin = 8 * torch.finfo(x.dtype).eps
    for _ in range(8):
        l1 = (x_t.double() - x.double()).flatten(1).abs().sum(dim=1)
        over = l1 > epsilon
        if not over.any():
            return x_t
        scale = torch.where(over, epsilon / l1 * (1 - margin), torch.ones_like(l1))
        margin = min(32 * margin, 0.5)
        shrunk = x.double() + (x_t.double() - x.double()) * _view(scale, x)
        x_t = torch.where(_view(over, x), shrunk.to(x.dtype).clamp(0.0, 1.0), x_t)
    raise ArithmeticError("could not bring the DRA perturbation inside its L1 budget")


def retained_count(p: float, n: int) -> int:
    """ceil(p * n), guarded against float noise such as (1/3) * 3072."""
    return min(n, math.ceil(round(p * n, 9)))


def significance_mask(score: torch.Tensor, p: float) -> torch.Tensor:
    """Per image, keep coordinates whose score is at least the ceil(p*N)-th largest.

    Ties at the threshold are all kept. ``p = 0`` keeps nothing.
    """
    flat = score.flatten(1)
    n = flat.shape[1]
    k = retained_count(p, n)
    if k == 0:
        return torch.zeros_like(score, dtype=torch.bool)
    threshold = torch.topk(flat, k, dim=1).values[:, -1:]
    return (flat >= threshold).reshape(score.shape)


def dra_mask(traj: DRATrajectory, p: float, mask_rule: str = "gradient") -> torch.Tensor:
    """Mask of coordinates that keep their adversarial value.

    ``mask_rule="gradient"`` compares |grad| against the threshold; ``"literal"``
    compares the adversarial pixel value itself against that same gradient
    threshold, as the algorithm listing reads verbatim.
    """
    if mask_rule not in MASK_RULES:
        raise ValueError(f"unknown mask rule {mask_rule!r}")
    score = traj.final_grad.abs()
    if mask_rule == "gradient":
        return significance_mask(score, p)
    flat = score.flatten(1)
    k = retained_count(p, flat.shape[1])
    if k == 0:
        return torch.zeros_like(score, dtype=torch.bool)
    threshold = torch.topk(flat, k, dim=1).values[:, -1]
    return traj.x_end >= _view(threshold, traj.x_end)


def apply_dra_mask(traj: DRATrajectory, p: float, mask_rule: str = "gradient") -> AdversarialBatch:
    x_adv = torch.where(dra_mask(traj, p, mask_rule), traj.x_end, traj.x_clean)
    budget = AttackBudget.dra(traj.epsilon, p, traj.iterations)
    return AdversarialBatch(x_adv, traj.x_clean, traj.labels, budget, traj.skipped_steps)


def dra(model, x, y, epsilon: float, p: float, T: int, loss_fn=None, mask_rule: str = "gradient"):
    """Dynamically regulated adversary.

    L1-normalized gradient ascent with total L1 budget ``epsilon`` spread over
    ``T`` steps, after which every coordinate outside the top ``p`` fraction
    by final gradient magnitude is restored to its clean value.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    return apply_dra_mask(dra_trajectory(model, x, y, epsilon, T, loss_fn), p, mask_rule)


def run_attack(model, x, y, budget: AttackBudget, generator=None, loss_fn=None) -> AdversarialBatch:
    """Dispatch on the budget's norm: l_inf -> PGD, l1_total -> DRA."""
    if budget.norm == "l1_total":
        return dra(model, x, y, budget.epsilon, budget.significant_fraction, budget.iterations, loss_fn)
    return pgd(model, x, y, budget, generator, loss_fn)


# --------------------------------------------------------------------------- measurement


def predict_labels(model, images, batch_size: int = 500) -> np.ndarray:
    images = torch.as_tensor(images)
    out = []
    with _eval_mode(model):
        for start in range(0, len(images), batch_size):
            out.append(model.predict(images[start : start + batch_size]).argmax(dim=1))
    return torch.cat(out).numpy() if out else np.zeros(0, dtype=np.int64)


def attack_success(model, dataset: LabeledDataset, attack, batch_size: int = 256) -> dict:
    """Robust accuracy over all samples and success rate over initially correct ones.

    ``attack(x, y)`` returns adversarial images (a tensor or an
    :class:`AdversarialBatch`).
    """
    if len(dataset) == 0:
        raise ValueError("cannot measure attack success on an empty dataset")
    clean_ok, adv_ok = [], []
    for batch in iterate_batches(dataset, batch_size):
        x = torch.from_numpy(batch.images)
        y = torch.from_numpy(batch.labels)
        x = x.to(model.dtype) if hasattr(model, "dtype") else x
        x_adv = attack(x, y)
        if isinstance(x_adv, AdversarialBatch):
            x_adv = x_adv.x_adv
        with _eval_mode(model):
            clean_ok.append(model.predict(x).argmax(1) == y)
            adv_ok.append(model.predict(x_adv).argmax(1) == y)
    clean_ok, adv_ok = torch.cat(clean_ok), torch.cat(adv_ok)
    n_correct = int(clean_ok.sum())
    flipped = int((clean_ok & ~adv_ok).sum())
    return {
        "natural_accuracy": float(clean_ok.double().mean()),
        "robust_accuracy": float(adv_ok.double().mean()),
        "success_rate_on_correct": flipped / n_correct if n_correct else float("nan"),
        "n": len(clean_ok),
    }


# --------------------------------------------------------------------------- calibration


@dataclass
class StrengthMatch:
    reference_epsilon: float
    reference_accuracy: float
    candidate_epsilon: float | None
    candidate_accuracy: float | None
    interpolated_epsilon: float | None
    status: str  # "matched" or "no match"


@dataclass
class Calibration:
    reference_curve: list[tuple[float, float]]
    candidate_curve: list[tuple[float, float]]
    matches: list[StrengthMatch]


def _interpolate_crossing(curve, target):
    for (e0, a0), (e1, a1) in zip(curve, curve[1:]):
        lo, hi = min(a0, a1), max(a0, a1)
        if lo <= target <= hi:
            if a0 == a1:
                return e0
            return e0 + (target - a0) * (e1 - e0) / (a1 - a0)
    return None


def match_strengths(reference_curve, candidate_curve, tolerance: float = 0.0) -> list[StrengthMatch]:
    """For each reference budget pick the candidate budget with the nearest robust accuracy.

    Curves are sequences of (epsilon, robust_accuracy) sorted by epsilon. A
    reference accuracy farther than ``tolerance`` outside the candidate's
    accuracy range is reported as "no match". Accuracy ties are broken by
    epsilon closeness, then by the smaller epsilon.
    """
    cand = list(candidate_curve)
    accs = [a for _, a in cand]
    lo, hi = min(accs), max(accs)
    out = []
    for e_ref, a_ref in reference_curve:
        if a_ref < lo - tolerance or a_ref > hi + tolerance:
            out.append(StrengthMatch(e_ref, a_ref, None, None, None, "no match"))
            continue
        e_c, a_c = min(cand, key=lambda ea: (abs(ea[1] - a_ref), abs(ea[0] - e_ref), ea[0]))
        out.append(
            StrengthMatch(e_ref, a_ref, e_c, a_c, _interpolate_crossing(cand, a_ref), "matched")
        )
    return out


def calibrate_attack_strength(
    model,
    dataset: LabeledDataset,
    reference: tuple[Callable[[float], Callable], Sequence[float]],
    candidate: tuple[Callable[[float], Callable], Sequence[float]],
    tolerance: float = 0.0,
) -> Calibration:
    """Pair budgets of two attacks that reach comparable robust accuracy.

    ``reference`` and ``candidate`` are ``(make_attack, grid)`` where
    ``make_attack(eps)`` returns an ``attack(x, y)`` closure.
    """
    curves = []
    for make_attack, grid in (reference, candidate):
        grid = list(grid)
        if grid != sorted(grid):
            raise ValueError("budget grids must be sorted ascending")
        curves.append(
            [(eps, attack_success(model, dataset, make_attack(eps))["robust_accuracy"]) for eps in grid]
        )
    return Calibration(curves[0], curves[1], match_strengths(curves[0], curves[1], tolerance))


# --------------------------------------------------------------------------- archive


def save_attack_archive(path, batch: AdversarialBatch) -> None:
    """Write clean/adversarial images, labels, norms and the budget to one .npz file."""
    np.savez_compressed(
        path,
        x_clean=batch.x_clean.cpu().numpy(),
        x_adv=batch.x_adv.cpu().numpy(),
        labels=batch.labels.cpu().numpy(),
        linf_norms=batch.linf_norms.numpy(),
        l1_norms=batch.l1_norms.numpy(),
        budget=np.array(json.dumps(batch.budget.to_dict(), sort_keys=True)),
    )


def load_attack_archive(path) -> AdversarialBatch:
    with np.load(Path(path)) as f:
        budget = AttackBudget(**json.loads(str(f["budget"])))
        batch = AdversarialBatch(
            torch.from_numpy(f["x_adv"]), torch.from_numpy(f["x_clean"]),
            torch.from_numpy(f["labels"]), budget,
        )
        for name in ("linf_norms", "l1_norms"):
            if not np.allclose(f[name], getattr(batch, name).numpy(), rtol=0, atol=1e-12):
                raise ValueError(f"archive {name} disagree with the stored images")
    return batch
