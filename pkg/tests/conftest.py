"""Shared fixtures.

The handwritten-digit fixtures use the 5000 MNIST digits bundled with
mlxtend, written out as IDX files so that they exercise the real loader.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch

from advtune.data import MNIST_FILES, LabeledDataset, load_mnist, write_idx
from advtune.models import ModelSpec, build_model

DIGITS_TRAIN = 4000


def bundled_digits() -> tuple[np.ndarray, np.ndarray]:
    """The 5000 bundled digits as uint8 (N, 28, 28) plus labels, in a fixed shuffled order."""
    mlxtend_data = pytest.importorskip("mlxtend.data")
    X, y = mlxtend_data.mnist_data()
    order = np.random.default_rng(0).permutation(len(y))
    return X[order].astype(np.uint8).reshape(-1, 28, 28), y[order].astype(np.uint8)


@pytest.fixture(scope="session")
def digits_dir(tmp_path_factory):
    """Directory holding train (4000) / t10k (1000) IDX files of bundled digits."""
    images, labels = bundled_digits()
    root = tmp_path_factory.mktemp("digits")
    for split, sl in (("train", slice(0, DIGITS_TRAIN)), ("test", slice(DIGITS_TRAIN, None))):
        img_name, lbl_name = MNIST_FILES[split]
        write_idx(images[sl], labels[sl], root / img_name, root / lbl_name)
    return root


@pytest.fixture(scope="session")
def digits(digits_dir) -> tuple[LabeledDataset, LabeledDataset]:
    return load_mnist(digits_dir, "train"), load_mnist(digits_dir, "test")


@pytest.fixture(scope="session")
def vanilla_digits_model(digits):
    """small_cnn trained on clean bundled digits (about half a minute on one CPU)."""
    from advtune.training import TrainPlan, train_standard

    train, test = digits
    model = build_model(ModelSpec.for_dataset("small_cnn", "mnist"), seed=0)
    ckpt, _, history = train_standard(model, train, TrainPlan(epochs=15, lr=0.05), eval_data=test)
    return model, ckpt, history


@pytest.fixture
def small_images():
    gen = torch.Generator().manual_seed(0)
    return torch.rand(8, 1, 28, 28, generator=gen), torch.randint(0, 10, (8,), generator=gen)


def mnist_model(arch: str = "small_cnn", seed: int = 0, dtype=torch.float32):
    return build_model(ModelSpec.for_dataset(arch, "mnist"), seed=seed, dtype=dtype)


# --------------------------------------------------------------------------- acceptance ledger

CRITERIA = {
    "1": "MNIST end-to-end: vanilla >= 99.0%, fine-tuned within 0.3 points, PGD-0.3 robust >= 90%",
    "2": "MNIST vanilla vulnerability: PGD-0.3 robust accuracy <= 40%",
    "3": "CIFAR-10 extended: natural within 1.0 point, PGD-2/255 robust +10 points",
    "4": "property suite",
    "5": "oracle equivalences on small instances",
    "6": "ablation shape: success(1/3) >= 0.95 x success(1)",
    "7": "corruption ordering: fine-tuned gaussian_noise accuracy > vanilla",
}
ACCEPTANCE: list[tuple[str, str, str, str]] = []


class criterion:
    """Record the outcome of one part of an acceptance criterion.

    ``with criterion("4", "FGSM == PGD"):`` records PASS, FAIL or NOT RUN
    (for pytest.skip) and re-raises, so the test itself still fails or skips.
    """

    def __init__(self, cid: str, part: str):
        self.cid, self.part = cid, part

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if kind is None:
            ACCEPTANCE.append((self.cid, self.part, "PASS", ""))
        elif issubclass(kind, pytest.skip.Exception):
            ACCEPTANCE.append((self.cid, self.part, "NOT RUN", str(exc.msg if hasattr(exc, "msg") else exc)))
        else:
            ACCEPTANCE.append((self.cid, self.part, "FAIL", f"{kind.__name__}: {exc}".splitlines()[0][:160]))
        return False


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid, title in CRITERIA.items():
        parts = [r for r in ACCEPTANCE if r[0] == cid]
        states = {r[2] for r in parts}
        status = "FAIL" if "FAIL" in states else "PASS" if "PASS" in states else "NOT RUN"
        tr.write_line(f"{status:7s} criterion {cid}: {title}")
        for _, part, state, note in parts:
            tr.write_line(f"          - {part}: {state}" + (f" ({note})" if note else ""))
