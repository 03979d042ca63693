"""Classifier wrapper, losses, model zoo and gradient verification."""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LossFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]

ARCHITECTURES = ("small_cnn", "resnet18", "resnet34", "resnet50", "resnet101", "linear")

DATASET_STATS = {
    "mnist": ((0.1307,), (0.3081,)),
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
}


class NonFiniteGradientError(ArithmeticError):
    pass


# --------------------------------------------------------------------------- losses


def _check_labels(logits: torch.Tensor, labels: torch.Tensor) -> None:
    k = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise ValueError(f"label out of range for {k} classes")


def cross_entropy(logits, label, reduction: str = "mean") -> torch.Tensor:
    """Softmax cross-entropy. Accepts a single logit vector or a batch."""
    logits = torch.as_tensor(logits)
    label = torch.as_tensor(label, dtype=torch.long)
    if logits.ndim == 1:
        logits, label = logits[None], label.reshape(1)
    _check_labels(logits, label)
    return F.cross_entropy(logits, label, reduction=reduction)


def per_sample_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return cross_entropy(logits, labels, reduction="none")


def kl_consistency(logits_clean, logits_adv, reduction: str = "mean") -> torch.Tensor:
    """KL(softmax(clean) || softmax(adv)), the smoothness term used by TRADES."""
    logits_clean = torch.as_tensor(logits_clean)
    logits_adv = torch.as_tensor(logits_adv)
    if logits_clean.ndim == 1:
        logits_clean, logits_adv = logits_clean[None], logits_adv[None]
    log_p = F.log_softmax(logits_clean, dim=-1)
    log_q = F.log_softmax(logits_adv, dim=-1)
    per_sample = (log_p.exp() * (log_p - log_q)).sum(dim=-1).clamp_min(0.0)
    if reduction == "none":
        return per_sample
    if reduction == "sum":
        return per_sample.sum()
    return per_sample.mean()


# --------------------------------------------------------------------------- model zoo


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    input_shape: tuple[int, int, int]
    class_count: int = 10
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None

    @classmethod
    def for_dataset(cls, architecture: str, dataset: str, class_count: int = 10) -> "ModelSpec":
        shape = {"mnist": (1, 28, 28), "cifar10": (3, 32, 32)}[dataset]
        mean, std = DATASET_STATS[dataset]
        return cls(architecture, shape, class_count, mean, std)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        tup = lambda v: tuple(v) if v is not None else None  # noqa: E731
        return cls(d["architecture"], tuple(d["input_shape"]), d["class_count"],
                   tup(d.get("mean")), tup(d.get("std")))


class Normalize(nn.Module):
    """Fixed per-channel standardization so attacks see raw [0, 1] pixels."""

    def __init__(self, mean: Sequence[float], std: Sequence[float]):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


class SmallCNN(nn.Module):
    def __init__(self, input_shape, class_count=10):
        super().__init__()
        c, h, w = input_shape
        self.features = nn.Sequential(
            nn.Conv2d(c, 32, 3),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3),
            nn.ReLU(),
            nn.MaxPool2d(2),
        )
        side_h, side_w = ((h - 2) // 2 - 2) // 2, ((w - 2) // 2 - 2) // 2
        self.classifier = nn.Sequential(
            nn.Flatten(),
            nn.Linear(64 * side_h * side_w, 128),
            nn.ReLU(),
            nn.Linear(128, class_count),
        )

    def forward(self, x):
        return self.classifier(self.features(x))


def _resnet(name: str, input_shape, class_count: int) -> nn.Module:
    import torchvision

    net = getattr(torchvision.models, name)(weights=None, num_classes=class_count)
    # 32x32 stem: 3x3 stride-1 first conv, no initial max-pool
    net.conv1 = nn.Conv2d(input_shape[0], 64, kernel_size=3, stride=1, padding=1, bias=False)
    net.maxpool = nn.Identity()
    return net


def _build_net(spec: ModelSpec) -> nn.Module:
    arch = spec.architecture
    if arch == "small_cnn":
        return SmallCNN(spec.input_shape, spec.class_count)
    if arch.startswith("resnet"):
        return _resnet(arch, spec.input_shape, spec.class_count)
    if arch == "linear":
        return nn.Sequential(nn.Flatten(), nn.Linear(int(np.prod(spec.input_shape)), spec.class_count))
    raise ValueError(f"unsupported architecture {arch!r}; choose from {ARCHITECTURES}")


def build_model(spec: ModelSpec, seed: int = 0, dtype: torch.dtype = torch.float32) -> "Classifier":
    if spec.architecture not in ARCHITECTURES:
        raise ValueError(f"unsupported architecture {spec.architecture!r}; choose from {ARCHITECTURES}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = _build_net(spec)
    if spec.mean is not None:
        net = nn.Sequential(Normalize(spec.mean, spec.std), net)
    return Classifier(net.to(dtype), spec)


# --------------------------------------------------------------------------- gradient oracle


class Classifier:
    """Gradient oracle around a torch module.

    ``predict`` returns logits, ``input_grad`` returns the gradient of the
    summed per-sample loss with respect to the input (so each sample's gradient
    is independent of the batch it sits in when the module is in eval mode).
    """

    def __init__(self, net: nn.Module, spec: ModelSpec | None = None):
        self.net = net
        self.spec = spec

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    @property
    def mode(self) -> str:
        return "train" if self.net.training else "eval"

    def train(self) -> "Classifier":
        self.net.train()
        return self

    def eval(self) -> "Classifier":
        self.net.eval()
        return self

    @contextlib.contextmanager
    def evaluating(self):
        was_training = self.net.training
        self.net.eval()
        try:
            yield self
        finally:
            self.net.train(was_training)

    def as_input(self, x) -> torch.Tensor:
        return torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x).to(self.dtype)

    def __call__(self, x) -> torch.Tensor:
        return self.net(x)

    def predict(self, x) -> torch.Tensor:
        x = self.as_input(x)
        single = x.ndim == 3
        with torch.no_grad():
            logits = self.net(x[None] if single else x)
        return logits[0] if single else logits

    def loss(self, x, y) -> float:
        return float(cross_entropy(self.predict(x), torch.as_tensor(y)))

    def input_grad(self, x, y, loss_fn: LossFn | None = None) -> torch.Tensor:
        """Gradient of sum_i loss_fn(f(x_i), y_i) with respect to x."""
        loss_fn = loss_fn or per_sample_cross_entropy
        x = self.as_input(x).detach().clone().requires_grad_(True)
        y = torch.as_tensor(y) if not torch.is_tensor(y) else y
        with torch.enable_grad():
            total = loss_fn(self.net(x), y).sum()
            (grad,) = torch.autograd.grad(total, x)
        if not torch.isfinite(grad).all():
            raise NonFiniteGradientError("non-finite input gradient")
        return grad.detach()

    def param_grad(self, x, y, loss_fn: LossFn | None = None) -> list[torch.Tensor]:
        """Gradient of the mean loss with respect to every parameter."""
        loss_fn = loss_fn or per_sample_cross_entropy
        params = [p for p in self.net.parameters() if p.requires_grad]
        with torch.enable_grad():
            total = loss_fn(self.net(self.as_input(x)), torch.as_tensor(y)).mean()
            grads = torch.autograd.grad(total, params, allow_unused=True)
        return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    def parameters(self) -> Iterator[nn.Parameter]:
        return self.net.parameters()

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def flat_parameters(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.net.parameters()).detach().clone()

    def state_dict(self) -> dict:
        return self.net.state_dict()

    def load_state_dict(self, state: dict) -> None:
        self.net.load_state_dict(state)

    def clone(self) -> "Classifier":
        import copy

        return Classifier(copy.deepcopy(self.net), self.spec)


# --------------------------------------------------------------------------- verification


def finite_diff_check(
    model: Classifier,
    x,
    y,
    h: float = 1e-3,
    samples: int = 16,
    seed: int = 0,
    return_details: bool = False,
):
    """Max relative error between ``input_grad`` and central differences.

    Probes along ``samples`` unit-L2 directions v = normalize(g/|g| + z/|z|),
    z ~ N(0, I), so every directional derivative is bounded away from zero
    while the random part still exercises gradient components orthogonal to g.
    Per direction the error is |g.(x+ - x-) - (L(x+) - L(x-))| / |g.(x+ - x-)|,
    using the probe points as actually represented in the model dtype and the
    loss evaluated in double precision from the logits.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if samples < 1:
        raise ValueError("samples must be positive")
    x = model.as_input(x)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ValueError("finite_diff_check takes a single input")
    y = torch.as_tensor(y).reshape(1)
    gen = torch.Generator().manual_seed(seed)
    with model.evaluating():
        g = model.input_grad(x, y)[0].double()
        z = torch.randn((samples, *g.shape), generator=gen, dtype=torch.float64)
        z = z / z.flatten(1).norm(dim=1).reshape(-1, *[1] * g.ndim)
        g_norm = float(g.norm())
        v = z + (g / g_norm if g_norm > 0 else 0.0)
        v = v / v.flatten(1).norm(dim=1).reshape(-1, *[1] * g.ndim)
        base = x.double()
        x_plus = (base + h * v).to(model.dtype)
        x_minus = (base - h * v).to(model.dtype)
        with torch.no_grad():
            l_plus = per_sample_cross_entropy(model(x_plus).double(), y.expand(samples))
            l_minus = per_sample_cross_entropy(model(x_minus).double(), y.expand(samples))
    numeric = l_plus - l_minus
    if not torch.isfinite(numeric).all():
        raise NonFiniteGradientError("non-finite numerical difference")
    analytic = ((x_plus.double() - x_minus.double()) * g).flatten(1).sum(dim=1)
    if g_norm == 0:
        err = numeric.abs() / (2 * h)
    else:
        err = (analytic - numeric).abs() / analytic.abs()
    worst = float(err.max())
    if return_details:
        return worst, {"analytic": analytic, "numeric": numeric, "errors": err, "directions": v}
    return worst
