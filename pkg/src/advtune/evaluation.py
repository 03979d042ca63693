"""Robustness sweeps, corruption accuracy, the p-ablation and the r-separation probe."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .attacks import AttackBudget, apply_dra_mask, dra_trajectory, pgd, retained_count
from .data import LabeledDataset, iterate_batches
from .training import clean_accuracy

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- robustness sweep


@dataclass
class ReportCell:
    attack: str
    epsilon: float
    robust_accuracy: float
    success_rate_on_correct: float
    settings: dict
    wall_clock: float


@dataclass
class RobustnessReport:
    model_fingerprint: str
    dataset: str
    natural_accuracy: float
    cells: list[ReportCell] = field(default_factory=list)
    label: str = "model"

    def to_records(self) -> list[dict]:
        return [
            {
                "label": self.label,
                "model_fingerprint": self.model_fingerprint,
                "dataset": self.dataset,
                "natural_accuracy": self.natural_accuracy,
                **asdict(cell),
            }
            for cell in self.cells
        ]

    def write_jsonl(self, path) -> None:
        with Path(path).open("a") as f:
            for rec in self.to_records():
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    def robust(self, epsilon: float) -> float:
        for cell in self.cells:
            if np.isclose(cell.epsilon, epsilon):
                return cell.robust_accuracy
        raise KeyError(epsilon)


def _pgd_sweep_batch(model, x, y, eps, iterations, step_fraction, random_start, gen):
    if eps == 0:
        return x
    budget = AttackBudget(eps, "l_inf", iterations, eps * step_fraction, random_start)
    return pgd(model, x, y, budget, gen).x_adv


def evaluate_robustness(
    model,
    dataset: LabeledDataset,
    eps_list: Sequence[float],
    iterations: int = 20,
    step_fraction: float = 1 / 20,
    random_start: bool = True,
    seed: int = 0,
    fingerprint: str = "",
    label: str = "model",
    batch_size: int = 256,
) -> RobustnessReport:
    """PGD robust accuracy for each epsilon over the full split.

    Defaults follow the evaluation protocol: 20 iterations, step eps/20, one
    random start. The eps = 0 cell is the clean accuracy itself.
    """
    eps_list = list(eps_list)
    if not eps_list:
        raise ValueError("eps_list must not be empty")
    if eps_list != sorted(eps_list):
        raise ValueError("eps_list must be sorted ascending")
    natural = clean_accuracy(model, dataset)
    report = RobustnessReport(fingerprint, dataset.name, natural, label=label)
    for eps in eps_list:
        t0 = time.perf_counter()
        gen = torch.Generator().manual_seed(seed)
        clean_ok, adv_ok = [], []
        with model.evaluating():
            for batch in iterate_batches(dataset, batch_size):
                x = torch.from_numpy(batch.images).to(model.dtype)
                y = torch.from_numpy(batch.labels)
                x_adv = _pgd_sweep_batch(model, x, y, eps, iterations, step_fraction, random_start, gen)
                clean_ok.append(model.predict(x).argmax(1) == y)
                adv_ok.append(model.predict(x_adv).argmax(1) == y)
        clean_ok, adv_ok = torch.cat(clean_ok), torch.cat(adv_ok)
        n_correct = int(clean_ok.sum())
        report.cells.append(
            ReportCell(
                attack="pgd-linf",
                epsilon=float(eps),
                robust_accuracy=float(adv_ok.double().mean()),
                success_rate_on_correct=int((clean_ok & ~adv_ok).sum()) / n_correct if n_correct else float("nan"),
                settings={"iterations": iterations, "step_fraction": step_fraction,
                          "random_start": random_start, "restarts": 1, "seed": seed},
                wall_clock=round(time.perf_counter() - t0, 3),
            )
        )
    return report


# --------------------------------------------------------------------------- corruptions


@dataclass
class CorruptionTable:
    accuracy: dict[str, dict[int, float]]

    @property
    def mean(self) -> dict[str, float]:
        return {name: float(np.mean(list(sev.values()))) for name, sev in self.accuracy.items()}

    def to_records(self) -> list[dict]:
        return [
            {"corruption": name, "severity": s, "accuracy": acc}
            for name, sev in self.accuracy.items()
            for s, acc in sorted(sev.items())
        ] + [{"corruption": name, "severity": "mean", "accuracy": m} for name, m in self.mean.items()]


def corruption_eval(model, sets: Iterable) -> CorruptionTable:
    """Accuracy per (corruption, severity) plus the unweighted mean over severities.

    ``sets`` holds objects with ``corruption_name``, ``severity`` and ``dataset``
    attributes, such as :class:`~advtune.data.CorruptionSet`.
    """
    spec = getattr(model, "spec", None)
    table: dict[str, dict[int, float]] = {}
    for cs in sets:
        ds = cs.dataset
        if spec is not None:
            if tuple(ds.sample_shape) != tuple(spec.input_shape):
                raise ValueError(f"{cs.corruption_name}: image shape {ds.sample_shape} != model input {spec.input_shape}")
            if ds.class_count != spec.class_count:
                raise ValueError(f"{cs.corruption_name}: class count {ds.class_count} != model {spec.class_count}")
        table.setdefault(cs.corruption_name, {})[int(cs.severity)] = clean_accuracy(model, ds)
    noise = table.get("gaussian_noise", {})
    accs = [noise[s] for s in sorted(noise)]
    if any(b > a for a, b in zip(accs, accs[1:])):
        log.warning("gaussian_noise accuracy is not non-increasing in severity: %s", accs)
    return CorruptionTable(table)


# --------------------------------------------------------------------------- r-separation


@dataclass
class SeparationEstimate:
    distance: float  # 2r, the smallest inter-class distance
    metric: str
    pair: tuple[int, int]
    pair_labels: tuple[int, int]
    samples: int
    degenerate: bool = False

    @property
    def r(self) -> float:
        return self.distance / 2


def _exact_l2_min(diff: np.ndarray, cols: np.ndarray) -> tuple[float, int]:
    """Smallest l2 row norm, correctly rounded; ties go to the earliest column.

    Vectorized sums screen the rows; the near-minimal ones are re-summed with
    ``math.fsum`` so the result does not depend on summation order.
    """
    sq = diff * diff
    approx = sq.sum(axis=1)
    lo = approx.min()
    cand = np.flatnonzero(approx <= lo * (1 + 1e-9) + 1e-300)
    exact = [math.sqrt(math.fsum(sq[k])) for k in cand]
    k = int(np.argmin(exact))
    return exact[k], int(cols[cand[k]])


def r_separation(
    dataset: LabeledDataset,
    metric: str = "l_inf",
    subsample: int | None = 2000,
    seed: int = 0,
) -> SeparationEstimate:
    """Exact minimum distance over all differently-labelled pairs of a subsample.

    ``subsample=None`` uses the whole dataset (quadratic cost). Returned pair
    indices refer to the original dataset.
    """
    if metric not in ("l_inf", "l2"):
        raise ValueError(f"unknown metric {metric!r}")
    n = len(dataset)
    if subsample is None or subsample >= n:
        index = np.arange(n)
    else:
        if subsample < 2:
            raise ValueError("subsample must be at least 2")
        index = np.sort(np.random.default_rng(seed).choice(n, subsample, replace=False))
    if index.size < 2:
        raise ValueError("need at least two samples")
    X = dataset.images[index].reshape(index.size, -1).astype(np.float64)
    y = dataset.labels[index]
    if np.unique(y).size < 2:
        raise ValueError("r-separation needs at least two classes in the subsample")
    best, pair = np.inf, (-1, -1)
    for i in range(index.size - 1):
        other = np.flatnonzero(y[i + 1 :] != y[i]) + i + 1
        if not other.size:
            continue
        diff = X[other] - X[i]
        if metric == "l_inf":
            d = np.abs(diff).max(axis=1)
            j = int(np.argmin(d))
            dist, jj = float(d[j]), int(other[j])
        else:
            dist, jj = _exact_l2_min(diff, other)
        if dist < best:
            best, pair = dist, (i, jj)
    i, j = pair
    return SeparationEstimate(
        distance=best,
        metric=metric,
        pair=(int(index[i]), int(index[j])),
        pair_labels=(int(y[i]), int(y[j])),
        samples=int(index.size),
        degenerate=best == 0.0,
    )


# --------------------------------------------------------------------------- p ablation


@dataclass
class AblationCurve:
    epsilon: float
    iterations: int
    p_values: list[float]
    error_rate: list[float]
    success_rate_on_correct: list[float]
    clean_error_rate: float
    retained_pixels: list[int]

    def to_records(self) -> list[dict]:
        return [
            {"p": p, "retained_pixels": k, "error_rate": e, "success_rate_on_correct": s,
             "epsilon": self.epsilon, "iterations": self.iterations}
            for p, k, e, s in zip(self.p_values, self.retained_pixels, self.error_rate,
                                  self.success_rate_on_correct)
        ]


def ablation_p_sweep(
    model,
    dataset: LabeledDataset,
    epsilon: float,
    T: int,
    p_list: Sequence[float],
    batch_size: int = 256,
) -> AblationCurve:
    """DRA success versus the significant fraction p.

    One unmasked trajectory per image is computed and each p's mask applied
    afterwards. ``error_rate`` is the fraction of all evaluated images that are
    misclassified after the attack (at p = 0 it equals the clean error rate);
    ``success_rate_on_correct`` counts flips among initially correct images.
    """
    p_list = [float(p) for p in p_list]
    if any(not 0.0 <= p <= 1.0 for p in p_list):
        raise ValueError("p values must lie in [0, 1]")
    wrong = np.zeros(len(p_list))
    flipped = np.zeros(len(p_list))
    clean_correct = 0
    n = 0
    with model.evaluating():
        for batch in iterate_batches(dataset, batch_size):
            x = torch.from_numpy(batch.images).to(model.dtype)
            y = torch.from_numpy(batch.labels)
            ok = model.predict(x).argmax(1) == y
            clean_correct += int(ok.sum())
            n += len(y)
            traj = dra_trajectory(model, x, y, epsilon, T)
            for i, p in enumerate(p_list):
                adv_ok = model.predict(apply_dra_mask(traj, p).x_adv).argmax(1) == y
                wrong[i] += int((~adv_ok).sum())
                flipped[i] += int((ok & ~adv_ok).sum())
    n_pix = int(np.prod(dataset.sample_shape))
    return AblationCurve(
        epsilon=epsilon,
        iterations=T,
        p_values=p_list,
        error_rate=(wrong / n).tolist(),
        success_rate_on_correct=(flipped / clean_correct if clean_correct else flipped * np.nan).tolist(),
        clean_error_rate=1 - clean_correct / n,
        retained_pixels=[retained_count(p, n_pix) for p in p_list],
    )
