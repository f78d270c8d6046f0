import numpy as np
import pytest

from mnemo.config import ModelConfig
from mnemo.model import MPlusModel
from mnemo.rng import Rng


def numeric_grad(f, arrays: list[np.ndarray], eps: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of scalar f() w.r.t. arrays (mutated in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f()
            flat[i] = orig - eps
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)


@pytest.fixture()
def tiny_config() -> ModelConfig:
    return ModelConfig(
        L=2, d=16, n_heads=2, vocab=32, W_gen=16, N=12, K=3, K0=4, M=48, lora_rank=2
    )


@pytest.fixture()
def tiny_model(tiny_config) -> MPlusModel:
    return MPlusModel(tiny_config, Rng(11))
