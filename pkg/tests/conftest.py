import numpy as np
import pytest
import torch

from reposer.datagen import generate_dataset, write_manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def central_diff(f, x: torch.Tensor, index, eps: float = 1e-6) -> float:
    """Central finite difference of scalar ``f`` w.r.t. one entry of ``x``."""
    with torch.no_grad():
        orig = x[index].item()
        x[index] = orig + eps
        hi = float(f(x))
        x[index] = orig - eps
        lo = float(f(x))
        x[index] = orig
    return (hi - lo) / (2 * eps)


def assert_grad_matches_fd(f, x: torch.Tensor, n: int = 20, seed: int = 0, rtol: float = 1e-3, eps: float = 1e-6):
    x = x.detach().clone().double().requires_grad_(True)
    out = f(x)
    (grad,) = torch.autograd.grad(out, x)
    g = np.random.default_rng(seed)
    flat = [tuple(int(i) for i in np.unravel_index(j, x.shape)) for j in g.choice(x.numel(), size=min(n, x.numel()), replace=False)]
    for idx in flat:
        fd = central_diff(f, x.detach().clone(), idx, eps)
        an = grad[idx].item()
        scale = max(abs(fd), abs(an), 1e-6)
        assert abs(fd - an) / scale <= rtol, f"grad mismatch at {idx}: analytic {an}, fd {fd}"


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """2 classes x 3 models, 20 pairs at 32x32; small enough for fast training tests."""
    root = tmp_path_factory.mktemp("tiny")
    samples = generate_dataset(["vase", "shoe"], 20, res=32, seed=3, models_per_class=3)
    write_manifest(samples, root)
    return root
