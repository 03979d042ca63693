"""Vanilla training, baseline adversarial trainers and two-phase robust fine-tuning.

Every trainer shares one loop (:func:`fit`); the methods differ only in the
per-batch loss. Randomness is split into independent per-epoch streams for
data order/augmentation and for attack random starts, so methods whose extra
terms vanish (beta = 0, eps = 0, ...) follow exactly the same trajectory as
vanilla training.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .attacks import AttackBudget, attack_success, dra, pgd
from .checkpoint import Checkpoint, save_checkpoint
from .data import AugmentPolicy, LabeledDataset, iterate_batches
from .metrics import MetricsLog
from .models import Classifier, cross_entropy, kl_consistency

log = logging.getLogger(__name__)

ATTACK_KINDS = ("pgd", "dra", "fgsm", "none")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good: Checkpoint | None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class AttackSpec:
    """How a trainer crafts adversarial examples for a batch."""

    kind: str = "pgd"
    epsilon: float = 0.0
    iterations: int = 10
    step_size: float | None = None
    random_start: bool = True
    p: float = 1.0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")

    def budget(self, epsilon: float | None = None) -> AttackBudget:
        eps = self.epsilon if epsilon is None else epsilon
        if self.kind == "dra":
            return AttackBudget.dra(eps, self.p, self.iterations)
        if self.kind == "fgsm":
            return AttackBudget(eps, "l_inf", 1, eps, False)
        step = self.step_size if self.step_size is not None else 2.5 * eps / self.iterations
        return AttackBudget(eps, "l_inf", self.iterations, step, self.random_start)


@dataclass(frozen=True)
class TrainPlan:
    epochs: int = 1
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    batch_size: int = 128
    lr_milestones: tuple[float, ...] = (0.5, 0.75)
    lr_gamma: float = 0.1
    phase: str = "standard"
    replay: tuple[float, float] = (1.0, 1.0)
    replay_mode: str = "combined"
    attack: AttackSpec = field(default_factory=lambda: AttackSpec("none"))
    augment: AugmentPolicy = field(default_factory=AugmentPolicy.disabled)
    seed: int = 0
    robust_eval_every: int = 5
    max_steps: int | None = None

    def __post_init__(self):
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.phase not in ("standard", "robust"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if len(self.replay) != 2 or min(self.replay) < 0:
            raise ValueError("replay must be (clean_weight, adv_weight) with both >= 0")
        if self.replay_mode not in ("combined", "alternating"):
            raise ValueError(f"unknown replay mode {self.replay_mode!r}")

    def lr_at(self, epoch: int) -> float:
        drops = sum(epoch >= round(m * self.epochs) for m in self.lr_milestones)
        return self.lr * self.lr_gamma**drops


@dataclass(frozen=True)
class EpsilonSchedule:
    """Linear decay from ``start`` to ``end`` over ``decay_epochs``, then a clean-only tail.

    eps(e) = start + (end - start) * e / decay_epochs for e < decay_epochs,
    and 0 (attack disabled) afterwards.
    """

    start: float
    end: float
    decay_epochs: int
    tail_epochs: int = 0

    def __post_init__(self):
        if self.decay_epochs < 0 or self.tail_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.end > self.start:
            raise ValueError("schedule must be non-increasing (end <= start)")
        if min(self.start, self.end) < 0:
            raise ValueError("epsilon must be non-negative")

    @classmethod
    def constant(cls, epsilon: float, epochs: int) -> "EpsilonSchedule":
        return cls(epsilon, epsilon, epochs, 0)

    @property
    def total_epochs(self) -> int:
        return self.decay_epochs + self.tail_epochs

    def __call__(self, epoch: int) -> float:
        if epoch >= self.decay_epochs:
            return 0.0
        return self.start + (self.end - self.start) * epoch / self.decay_epochs

    def attack_enabled(self, epoch: int) -> bool:
        return epoch < self.decay_epochs


@dataclass
class DualState:
    lam: float
    margin: float

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("KKT multiplier must be non-negative")


@dataclass
class EpochStats:
    epoch: int
    lr: float
    epsilon: float
    train_loss: float
    steps: int
    clean_accuracy: float | None = None
    robust_accuracy: float | None = None
    params_without_grad: list[str] = field(default_factory=list)
    skipped_attack_steps: int = 0


@dataclass
class BatchContext:
    epoch: int
    step: int
    epsilon: float
    generator: torch.Generator


BatchLoss = Callable[[Classifier, torch.Tensor, torch.Tensor, BatchContext], torch.Tensor]


# --------------------------------------------------------------------------- helpers


def epoch_streams(seed: int, epoch: int) -> tuple[np.random.Generator, torch.Generator]:
    """Independent data and attack random streams for one epoch."""
    data_rng = np.random.default_rng([seed, epoch, 0])
    attack_seed = int(np.random.SeedSequence([seed, epoch, 1]).generate_state(1)[0])
    return data_rng, torch.Generator().manual_seed(attack_seed)


def make_optimizer(model: Classifier, plan: TrainPlan) -> torch.optim.SGD:
    return torch.optim.SGD(
        model.parameters(), lr=plan.lr, momentum=plan.momentum, weight_decay=plan.weight_decay
    )


def craft(model: Classifier, x, y, spec: AttackSpec, epsilon: float, generator, loss_fn=None):
    """Adversarial version of a training batch (eval-mode gradients)."""
    budget = spec.budget(epsilon)
    if spec.kind == "dra":
        return dra(model, x, y, budget.epsilon, budget.significant_fraction, budget.iterations, loss_fn).x_adv
    return pgd(model, x, y, budget, generator, loss_fn).x_adv


def estimate_margin(model: Classifier, dataset: LabeledDataset, batch_size: int = 500) -> float:
    """Mean clean cross-entropy of ``model`` over one pass of ``dataset``."""
    total, n = 0.0, 0
    with model.evaluating():
        for batch in iterate_batches(dataset, batch_size):
            logits = model.predict(torch.from_numpy(batch.images))
            total += float(cross_entropy(logits, torch.from_numpy(batch.labels), reduction="sum"))
            n += len(batch)
    return total / n


def clean_accuracy(model: Classifier, dataset: LabeledDataset, batch_size: int = 500) -> float:
    correct = 0
    with model.evaluating():
        for batch in iterate_batches(dataset, batch_size):
            pred = model.predict(torch.from_numpy(batch.images)).argmax(1).numpy()
            correct += int((pred == batch.labels).sum())
    return correct / len(dataset)


def _snapshot(model: Classifier) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


# --------------------------------------------------------------------------- the loop


def fit(
    model: Classifier,
    data: LabeledDataset,
    plan: TrainPlan,
    batch_loss: BatchLoss,
    *,
    phase: str,
    epsilon_at: Callable[[int], float] | None = None,
    resume: Checkpoint | None = None,
    eval_data: LabeledDataset | None = None,
    eval_budget: AttackBudget | None = None,
    metrics: MetricsLog | None = None,
    checkpoint_dir=None,
    fingerprint: str = "",
    extra: dict | None = None,
    on_step: Callable[[int, Classifier], None] | None = None,
    on_epoch_end: Callable[[EpochStats, dict], None] | None = None,
    stop_after: int | None = None,
) -> tuple[Checkpoint, list[EpochStats]]:
    """Shared SGD loop.

    ``resume`` restores optimizer state and continues after ``resume.epoch``
    completed epochs. Checkpoints (``last.ckpt`` and ``best.ckpt`` by robust
    accuracy) go to ``checkpoint_dir`` when given. ``stop_after`` ends the
    call once that many epochs are complete, as an interruption would.
    """
    epsilon_at = epsilon_at or (lambda e: 0.0)
    extra = dict(extra or {})
    opt = make_optimizer(model, plan)
    start_epoch = 0
    best_robust = -1.0
    if resume is not None:
        model.load_state_dict(resume.parameters)
        if resume.optimizer_state is not None:
            opt.load_state_dict(resume.optimizer_state)
        start_epoch = resume.epoch
        best_robust = resume.extra.get("best_robust_accuracy", -1.0)
        extra.update({k: v for k, v in resume.extra.items() if k not in extra})
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    named = [(n, p) for n, p in model.net.named_parameters() if p.requires_grad]
    last_good = Checkpoint(_snapshot(model), phase, start_epoch, opt.state_dict(), fingerprint, dict(extra))
    history: list[EpochStats] = []
    step = 0
    for epoch in range(start_epoch, plan.epochs):
        lr = plan.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        eps = epsilon_at(epoch)
        data_rng, attack_gen = epoch_streams(plan.seed, epoch)
        saw_grad = {n: False for n, _ in named}
        losses = []
        model.train()
        for batch in iterate_batches(data, plan.batch_size, data_rng, shuffle=True, policy=plan.augment):
            if plan.max_steps is not None and step >= plan.max_steps:
                break
            x = torch.from_numpy(batch.images).to(model.dtype)
            y = torch.from_numpy(batch.labels)
            loss = batch_loss(model, x, y, BatchContext(epoch, step, eps, attack_gen))
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}", last_good)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            for n, p in named:
                if not saw_grad[n] and p.grad is not None and float(p.grad.norm()) > 0:
                    saw_grad[n] = True
            opt.step()
            losses.append(float(loss.detach()))
            step += 1
            if on_step:
                on_step(step, model)
        stats = EpochStats(
            epoch=epoch,
            lr=lr,
            epsilon=eps,
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            steps=len(losses),
            params_without_grad=[n for n, seen in saw_grad.items() if not seen],
        )
        if metrics:
            metrics.emit(epoch, "train", "clean", None, stats.train_loss, eps, phase)
        if eval_data is not None and len(eval_data):
            stats.clean_accuracy = clean_accuracy(model, eval_data)
            if metrics:
                metrics.emit(epoch, "test", "clean", stats.clean_accuracy, None, 0.0, phase)
            last_epoch = epoch == plan.epochs - 1
            if eval_budget is not None and ((epoch + 1) % plan.robust_eval_every == 0 or last_epoch):
                gen = torch.Generator().manual_seed(plan.seed)
                res = attack_success(
                    model, eval_data, lambda xb, yb: pgd(model, xb, yb, eval_budget, gen).x_adv
                )
                stats.robust_accuracy = res["robust_accuracy"]
                if metrics:
                    metrics.emit(epoch, "test", f"pgd-linf-T{eval_budget.iterations}",
                                 stats.robust_accuracy, None, eval_budget.epsilon, phase)
        model.train()
        history.append(stats)
        extra["epochs_completed"] = epoch + 1
        if on_epoch_end:
            on_epoch_end(stats, extra)
        is_best = stats.robust_accuracy is not None and stats.robust_accuracy > best_robust
        if is_best:
            best_robust = stats.robust_accuracy
        extra["best_robust_accuracy"] = best_robust
        last_good = Checkpoint(_snapshot(model), phase, epoch + 1, opt.state_dict(), fingerprint, dict(extra))
        if ckpt_dir:
            save_checkpoint(ckpt_dir / "last.ckpt", last_good)
            if is_best:
                save_checkpoint(ckpt_dir / "best.ckpt", last_good)
        log.info("epoch %d lr %.4g eps %.4g loss %.4f acc %s rob %s", epoch, lr, eps,
                 stats.train_loss, stats.clean_accuracy, stats.robust_accuracy)
        if plan.max_steps is not None and step >= plan.max_steps:
            break
        if stop_after is not None and epoch + 1 >= stop_after:
            break
    return last_good, history


# --------------------------------------------------------------------------- per-batch losses


def standard_loss(model, x, y, ctx):
    return cross_entropy(model(x), y)


def madry_loss(spec: AttackSpec) -> BatchLoss:
    def loss(model, x, y, ctx):
        x_adv = craft(model, x, y, spec, spec.epsilon, ctx.generator)
        return cross_entropy(model(x_adv), y)

    return loss


def mixed_loss(spec: AttackSpec) -> BatchLoss:
    def loss(model, x, y, ctx):
        x_adv = craft(model, x, y, spec, spec.epsilon, ctx.generator)
        return cross_entropy(model(x), y) + cross_entropy(model(x_adv), y)

    return loss


def rst_loss(spec: AttackSpec, beta: float) -> BatchLoss:
    if beta < 0:
        raise ValueError("beta must be non-negative")

    def loss(model, x, y, ctx):
        x_adv = craft(model, x, y, spec, spec.epsilon, ctx.generator)
        return cross_entropy(model(x), y) + beta * cross_entropy(model(x_adv), y)

    return loss


def trades_adversary(model, x, spec: AttackSpec, generator) -> torch.Tensor:
    """Maximize the consistency term around x.

    l_inf: 10 sign steps of eps/4 from x + 0.001 * N(0, 1). DRA kinds use
    cross-entropy instead, because the consistency gradient vanishes at x.
    """
    with model.evaluating():
        target = torch.softmax(model.predict(x), dim=1)
    if spec.kind == "dra":
        return dra(model, x, target.argmax(1), spec.epsilon, spec.p, spec.iterations).x_adv

    def consistency(logits, probs):
        return (probs * (torch.log(probs.clamp_min(1e-12)) - torch.log_softmax(logits, 1))).sum(1)

    eps = spec.epsilon
    start = x + 0.001 * torch.randn(x.shape, generator=generator, dtype=x.dtype)
    start = torch.clamp(torch.min(torch.max(start, x - eps), x + eps), 0.0, 1.0)
    budget = AttackBudget(eps, "l_inf", spec.iterations, eps / 4, False)
    return pgd(model, start, target, budget, None, consistency).x_adv.clamp(
        min=(x - eps).clamp(0, 1), max=(x + eps).clamp(0, 1)
    )


def trades_loss(spec: AttackSpec, lambda_inv: float) -> BatchLoss:
    if lambda_inv < 0:
        raise ValueError("1/lambda must be non-negative")

    def loss(model, x, y, ctx):
        x_adv = trades_adversary(model, x, spec, ctx.generator)
        logits = model(x)
        return cross_entropy(logits, y) + lambda_inv * kl_consistency(logits, model(x_adv))

    return loss


def kkt_dual_step(model, x, y, x_adv, dual: DualState, eta: float = 0.1):
    """One primal-dual step on max_delta L(x+delta) + lam * (L(x) - margin).

    Returns the loss to back-propagate (using the current multiplier) and the
    updated state with lam <- max(0, lam + eta * (L(x) - margin)).
    """
    clean = cross_entropy(model(x), y)
    adv = cross_entropy(model(x_adv), y)
    gap = float(clean.detach()) - dual.margin
    loss = adv + dual.lam * (clean - dual.margin)
    return loss, DualState(max(0.0, dual.lam + eta * gap), dual.margin)


# --------------------------------------------------------------------------- trainers


def _common(kwargs, plan, phase):
    kwargs.setdefault("phase", phase)
    return kwargs


def train_standard(model, data, plan: TrainPlan, margin_data: LabeledDataset | None = None, **kwargs):
    """Clean training. Returns the checkpoint and the clean-loss margin.

    The margin is the mean clean loss on ``margin_data`` (the training data
    when omitted).
    """
    if plan.phase != "standard":
        raise ValueError("train_standard requires plan.phase == 'standard'")
    ckpt, history = fit(model, data, plan, standard_loss, **_common(kwargs, plan, "standard"))
    margin = estimate_margin(model, margin_data if margin_data is not None else data)
    ckpt.extra["margin"] = margin
    ckpt.extra.setdefault("method", "standard")
    if kwargs.get("checkpoint_dir"):
        save_checkpoint(Path(kwargs["checkpoint_dir"]) / "last.ckpt", ckpt)
    return ckpt, margin, history


def _adversarial(model, data, plan, batch_loss, method, **kwargs):
    if plan.attack.kind == "none":
        raise ValueError(f"{method} training needs an attack configured in the plan")
    kwargs.setdefault("epsilon_at", lambda e: plan.attack.epsilon)
    ckpt, history = fit(model, data, plan, batch_loss, **_common(kwargs, plan, "standard"))
    ckpt.extra.setdefault("method", method)
    return ckpt, history


def train_madry(model, data, plan, **kwargs):
    return _adversarial(model, data, plan, madry_loss(plan.attack), "madry", **kwargs)


def train_mixed(model, data, plan, **kwargs):
    return _adversarial(model, data, plan, mixed_loss(plan.attack), "mixed", **kwargs)


def train_rst(model, data, plan, beta: float, **kwargs):
    return _adversarial(model, data, plan, rst_loss(plan.attack, beta), "rst", **kwargs)


def train_trades(model, data, plan, lambda_inv: float, **kwargs):
    return _adversarial(model, data, plan, trades_loss(plan.attack, lambda_inv), "trades", **kwargs)


def finetune_loss(spec: AttackSpec, schedule: EpsilonSchedule, replay, mode: str) -> BatchLoss:
    w_clean, w_adv = replay

    def loss(model, x, y, ctx):
        if not schedule.attack_enabled(ctx.epoch) or ctx.epsilon == 0:
            return w_clean * cross_entropy(model(x), y)
        if mode == "alternating" and ctx.step % 2 == 0:
            return w_clean * cross_entropy(model(x), y)
        x_adv = craft(model, x, y, spec, ctx.epsilon, ctx.generator)
        if mode == "alternating":
            return w_adv * cross_entropy(model(x_adv), y)
        return w_clean * cross_entropy(model(x), y) + w_adv * cross_entropy(model(x_adv), y)

    return loss


def finetune_robust(
    model: Classifier,
    theta_std: Checkpoint,
    data: LabeledDataset,
    schedule: EpsilonSchedule,
    plan: TrainPlan,
    solver: str = "replay",
    eta_lambda: float = 0.1,
    **kwargs,
):
    """Adversarial fine-tuning that starts from the standard-phase checkpoint.

    All parameters are trainable. Per batch the clean and adversarial losses
    of the same batch are combined at the plan's replay ratio; during the
    schedule's clean tail only the clean term is used. ``solver="kkt"``
    replaces the fixed ratio with the primal-dual multiplier update.
    """
    if theta_std is None:
        raise ValueError("robust fine-tuning needs a standard-phase checkpoint")
    if theta_std.phase != "standard":
        raise ValueError(f"starting checkpoint is tagged {theta_std.phase!r}; need 'standard'")
    if plan.attack.kind == "none":
        raise ValueError("robust fine-tuning needs an attack configured in the plan")
    plan = replace(plan, phase="robust", epochs=schedule.total_epochs)
    resume = kwargs.pop("resume", None)
    if resume is None:
        model.load_state_dict(theta_std.parameters)
    for p in model.parameters():
        p.requires_grad_(True)
    extra = {
        "method": "finetune_robust",
        "solver": solver,
        "schedule": asdict(schedule),
        "attack": asdict(plan.attack),
        "replay": list(plan.replay),
        "margin": theta_std.extra.get("margin"),
        **kwargs.pop("extra", {}),
    }
    if solver == "kkt":
        margin = theta_std.extra.get("margin")
        if margin is None:
            raise ValueError("kkt solver needs the standard-phase margin")
        start_lam = resume.extra.get("lambda", 0.0) if resume else 0.0
        state = {"dual": DualState(start_lam, margin)}
        spec = plan.attack

        def batch_loss(model, x, y, ctx):
            if not schedule.attack_enabled(ctx.epoch) or ctx.epsilon == 0:
                return cross_entropy(model(x), y)
            x_adv = craft(model, x, y, spec, ctx.epsilon, ctx.generator)
            loss, state["dual"] = kkt_dual_step(model, x, y, x_adv, state["dual"], eta_lambda)
            return loss

        def record_lambda(stats, ex):
            ex["lambda"] = state["dual"].lam

        kwargs.setdefault("on_epoch_end", record_lambda)
    elif solver == "replay":
        batch_loss = finetune_loss(plan.attack, schedule, plan.replay, plan.replay_mode)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    kwargs.setdefault("phase", "robust")
    ckpt, history = fit(model, data, plan, batch_loss, epsilon_at=schedule, resume=resume, extra=extra, **kwargs)
    return ckpt, history
