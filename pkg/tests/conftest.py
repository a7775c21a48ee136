import numpy as np
import pytest
import torch

from reldistill.data import make_synthetic, split_categories
from reldistill.encoders import build_encoder, build_heads


@pytest.fixture(scope="session")
def desk_dataset():
    """8 categories, 30 images each, 16x16 grayscale, split 3 train / 5 test."""
    dataset = make_synthetic(8, 30, 16, noise_sigma=0.05, seed=11)
    return split_categories(dataset, 3, 0, 5, seed=2)


@pytest.fixture()
def tiny_encoder():
    return build_encoder("tiny", (16, 16, 1), seed=3)


@pytest.fixture()
def tiny_heads(tiny_encoder):
    return build_heads(tiny_encoder.embed_dim, 3, seed=4)


def fd_grad(loss_fn, param: torch.Tensor, flat_index: int, eps: float = 1e-3) -> float:
    """Centered finite difference of loss_fn with respect to one coordinate."""
    flat = param.data.view(-1)
    original = flat[flat_index].item()
    with torch.no_grad():
        flat[flat_index] = original + eps
        plus = float(loss_fn())
        flat[flat_index] = original - eps
        minus = float(loss_fn())
        flat[flat_index] = original
    return (plus - minus) / (2 * eps)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(numeric), floor)


def check_gradients(loss_fn, params, n_coords: int, tol: float, seed: int, eps: float = 1e-3):
    """Compare autograd against centered differences on random coordinates.

    Centered differences are only a valid oracle where the loss is smooth
    across the eps window; coordinates whose FD estimate is unstable under
    a 4x smaller step sit on a ReLU/max-pool kink and are resampled. Returns
    the number of coordinates checked (== n_coords unless the cap trips).
    """
    params = [p for p in params if p.requires_grad and p.numel()]
    for p in params:
        p.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    checked = 0
    for _ in range(n_coords * 20):
        if checked == n_coords:
            break
        p = params[int(rng.integers(len(params)))]
        idx = int(rng.integers(p.numel()))
        numeric = fd_grad(loss_fn, p, idx, eps)
        refined = fd_grad(loss_fn, p, idx, eps / 4)
        if relative_error(refined, numeric, floor=1e-8) > 1e-5:
            continue  # non-smooth window, FD is not a trustworthy oracle here
        analytic = p.grad.view(-1)[idx].item() if p.grad is not None else 0.0
        assert relative_error(analytic, numeric) < tol, (
            f"gradient mismatch at coord {idx}: analytic {analytic}, fd {numeric}"
        )
        checked += 1
    return checked


def random_embeddings(rng: np.random.Generator, n: int, d: int) -> torch.Tensor:
    """Float64 embeddings bounded away from the zero vector."""
    emb = rng.normal(size=(n, d))
    emb += np.sign(emb.sum(axis=1, keepdims=True)) * 0.5
    return torch.from_numpy(emb)
