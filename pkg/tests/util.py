"""Shared test oracles: central finite differences against autograd."""

import numpy as np
import torch


def finite_difference_gradient(f, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of scalar f w.r.t. tensor x (float64)."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(f())
        flat[i] = orig - eps
        lo = float(f())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = max(float(numeric.abs().max()), float(analytic.abs().max()), 1e-8)
    return float((analytic - numeric).abs().max()) / scale


def check_gradients(loss_fn, tensors, eps: float = 1e-5, rtol: float = 1e-3):
    """Assert autograd gradients match central differences for each tensor.

    ``loss_fn`` is a zero-argument callable returning a scalar tensor that
    depends on the given (leaf, requires_grad) float64 tensors.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=False)
    errors = {}
    for t, g in zip(tensors, grads):
        with torch.no_grad():
            num = finite_difference_gradient(loss_fn, t, eps)
        errors[id(t)] = relative_error(g, num)
    worst = max(errors.values())
    assert worst <= rtol, f"gradient mismatch: worst relative error {worst:.3e} > {rtol}"
    return worst


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation via QR of a Gaussian matrix (det +1)."""
    a = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(a)
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
