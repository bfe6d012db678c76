import numpy as np
import pytest
import torch

from patchssl.dataset import Geometry, LabeledSubset, PatchDataset, SplitManifest
from patchssl.training import TrainConfig

torch.set_num_threads(1)


def toy_dataset(n_images=12, grid=2, size=8, seed=0, separable=True):
    """Patch set where diseased patches carry a bright blob in the centre.

    Images alternate healthy/diseased; a diseased image has one diseased patch.
    """
    rng = np.random.default_rng(seed)
    n = n_images * grid * grid
    pixels = (rng.random((n, size, size, 3)) * 0.2 - 0.6).astype(np.float32)
    labels = np.zeros(n, np.int64)
    image_index = np.repeat(np.arange(n_images), grid * grid)
    rows = np.tile(np.repeat(np.arange(grid), grid), n_images)
    cols = np.tile(np.tile(np.arange(grid), grid), n_images)
    for k in range(1, n_images, 2):
        j = k * grid * grid + int(rng.integers(grid * grid))
        labels[j] = 1
        if separable:
            c = size // 2
            pixels[j, c - 2:c + 2, c - 2:c + 2, :] = 0.9
    ids = [f"t{k:03d}" for k in range(n_images)]
    n_tr = n_images // 2
    n_va = (n_images - n_tr) // 2
    split = SplitManifest(ids[:n_tr], ids[n_tr:n_tr + n_va], ids[n_tr + n_va:], seed)
    canvas = grid * 16
    return PatchDataset(Geometry(canvas, grid, 16, size), ids, pixels, labels,
                        (labels * 5).astype(np.int64), image_index, rows, cols, split)


def tiny_config(**overrides):
    base = dict(epochs=4, lr_decay_start_epoch=2, batch_size=8, input_size=8, d_widths=(4, 8),
                g_channels=(8, 4), latent_dim=6, checkpoint_every=2, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def toy():
    return toy_dataset()


@pytest.fixture
def toy_subset(toy):
    train = toy.split.train_ids
    return LabeledSubset(train[:2], train[2:], 0)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, with any recorded measurements."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when not in ("call", "setup"):
                continue
            if outcome == "passed" and rep.when != "call":
                continue
            name = nodeid.split("::")[-1][len("test_criterion_"):]
            number, _, title = name.partition("_")
            detail = "; ".join(f"{k}={v}" for k, v in rep.user_properties)
            lines.append((int(number), f"criterion {int(number):2d} {title:<28} "
                                       f"{'PASS' if outcome == 'passed' else 'FAIL'}"
                                       + (f"  [{detail}]" if detail else "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
