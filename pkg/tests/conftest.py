import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from malt.model import MALTDenoiser, ModelConfig  # noqa: E402
from malt.numerics import SeededRng  # noqa: E402

TINY = ModelConfig(depth=3, width=16, heads=2, p_l=1, p_s=2, l=2, h=4, w=4, c=3, num_classes=3, lora_rank=2,
                   mlp_ratio=2)


def perturb_zero_init(model, seed: int = 0, scale: float = 0.05):
    """Give zero-initialised gates/projections small random values so every path carries gradient."""
    rng = SeededRng(seed, 99)
    for i, (name, p) in enumerate(model.named_parameters()):
        if not np.any(p.data):
            p.data = rng.spawn(i).normal(p.shape) * scale
    return model


@pytest.fixture
def tiny_model():
    return perturb_zero_init(MALTDenoiser(TINY, SeededRng(0)))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        ok, detail = results[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {k}: {detail}")
