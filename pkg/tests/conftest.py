import numpy as np
import pytest
import torch

from ccreid.config import RunConfig
from ccreid.data import generate_synthetic_dataset


def small_run_config() -> RunConfig:
    """Desk-scale config small enough for per-test training runs."""
    cfg = RunConfig()
    cfg.backbone.out_channels = 16
    cfg.cdn.j_out = 8
    cfg.trainer.p = 2
    cfg.trainer.k = 2
    cfg.trainer.epochs = 2
    cfg.trainer.lr_decay_epochs = []
    return cfg


@pytest.fixture
def run_config():
    return small_run_config()


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """Tiny synthetic dataset shared across tests (4 ids x 2 clothes x 4)."""
    root = tmp_path_factory.mktemp("synth")
    generate_synthetic_dataset(root, num_ids=4, clothes_per_id=2,
                               images_per_combo=4, image_size=(64, 64),
                               rng_seed=11)
    return root


@pytest.fixture(scope="session")
def synth_manifest(synth_dir):
    from ccreid.data import load_manifest
    return load_manifest(synth_dir / "manifest.json")


def central_diff_at(f, x: torch.Tensor, coords, h: float = 1e-6) -> torch.Tensor:
    """Central finite differences of scalar f at the given flat coordinates."""
    x = x.detach().clone()
    flat = x.view(-1)
    out = torch.zeros(len(coords), dtype=torch.float64)
    with torch.no_grad():
        for n, i in enumerate(coords):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(f(x))
            flat[i] = orig - h
            down = float(f(x))
            flat[i] = orig
            out[n] = (up - down) / (2.0 * h)
    return out


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    a = a.detach().double().reshape(-1)
    b = b.detach().double().reshape(-1)
    denom = torch.maximum(a.abs(), b.abs()).clamp(min=1e-12)
    return float(((a - b).abs() / denom).max())


def autograd_of(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    out = f(x)
    out.backward()
    return x.grad.detach().clone()


def check_grad(f, x: torch.Tensor, h: float = 1e-6, tol: float = 1e-5,
               n_samples: int | None = None, seed: int = 0) -> float:
    """Assert autograd of scalar f matches central differences at x.

    With n_samples set, only a random coordinate subset is finite-differenced
    (the analytic gradient is always the full one).
    """
    analytic = autograd_of(f, x).view(-1)
    total = analytic.numel()
    if n_samples is None or n_samples >= total:
        coords = list(range(total))
    else:
        rng = np.random.default_rng(seed)
        coords = sorted(rng.choice(total, size=n_samples, replace=False).tolist())
    numeric = central_diff_at(f, x, coords, h)
    picked = analytic[coords]
    scale = max(float(picked.abs().max()), float(numeric.abs().max()), 1e-8)
    err = float((picked - numeric).abs().max()) / scale
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return err


np.seterr(all="raise", under="ignore")
