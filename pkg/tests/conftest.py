from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

from emrmerge import Checkpoint, write_checkpoint

sys.path.insert(0, str(Path(__file__).parent))


def random_checkpoint(rng: np.random.Generator, shapes: dict[str, tuple], dtype=np.float32) -> Checkpoint:
    return Checkpoint({name: rng.standard_normal(shape).astype(dtype) for name, shape in shapes.items()})


def finetune(rng: np.random.Generator, base: Checkpoint, scale: float = 0.01) -> Checkpoint:
    return Checkpoint(
        {
            name: (arr.astype(np.float64) + scale * rng.standard_normal(arr.shape)).astype(arr.dtype)
            for name, arr in base.items()
        }
    )


def synthetic_family(seed: int, n_models: int, shapes: dict[str, tuple], scale: float = 0.01):
    rng = np.random.default_rng(seed)
    base = random_checkpoint(rng, shapes)
    return base, [finetune(rng, base, scale) for _ in range(n_models)]


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def family_files(tmp_path):
    """Base + 3 finetuned F32 checkpoints written to disk."""
    shapes = {"layer.0.weight": (6, 5), "layer.0.bias": (6,), "head.weight": (3, 6)}
    base, models = synthetic_family(7, 3, shapes)
    base_path = tmp_path / "base.safetensors"
    write_checkpoint(base, base_path)
    paths = []
    for i, m in enumerate(models):
        p = tmp_path / f"m{i + 1}.safetensors"
        write_checkpoint(m, p)
        paths.append(p)
    return base_path, paths, base, models


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
