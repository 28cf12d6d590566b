from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn
from PIL import Image

from path24.model import register_backbone

# Solid colours that a linear head separates trivially.
COLORS = [(200, 30, 30), (30, 200, 30), (30, 30, 200), (200, 200, 30)]


@register_backbone("tiny", 8)
def _tiny():
    """Small random conv stack standing in for a pretrained network."""
    return nn.Sequential(
        nn.Conv2d(3, 8, 3, stride=2, padding=1),
        nn.BatchNorm2d(8),
        nn.ReLU(),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
    )


def save_image(path: Path, color, size=32):
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.empty((size, size, 3), dtype=np.uint8)
    arr[...] = color
    Image.fromarray(arr).save(path)
    return path


def make_tree(root: Path, train_counts, test_counts, size=32, noise=False):
    """Write a dataset tree: ``s<k>/`` training dirs plus ``test/s<k>_<i>.png``.

    Each class is a solid colour so trained models can separate them.
    """
    rng = np.random.default_rng(0)
    for k, n in enumerate(train_counts):
        for i in range(n):
            color = COLORS[k % len(COLORS)]
            if noise:
                color = tuple(int(np.clip(c + rng.integers(-10, 11), 0, 255)) for c in color)
            save_image(root / f"s{k}" / f"p{i:04d}.png", color, size)
    for k, n in enumerate(test_counts):
        for i in range(n):
            save_image(root / "test" / f"s{k}_{i}.png", COLORS[k % len(COLORS)], size)
    return root


@pytest.fixture
def tree_factory(tmp_path):
    def factory(train_counts, test_counts, name="data", **kw):
        return make_tree(tmp_path / name, train_counts, test_counts, **kw)
    return factory


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(name, ok, detail):
        lines.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
