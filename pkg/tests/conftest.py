import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


def finite_difference_gradient(fn, x: torch.Tensor, step: float = 1e-5) -> torch.Tensor:
    """Central finite differences of a scalar function w.r.t. a float64 tensor."""
    assert x.dtype == torch.float64
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = float(fn())
        flat[i] = orig - step
        lo = float(fn())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_gradient_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / denom
