"""Finite-difference comparison harness for analytic (autograd) gradients."""

from __future__ import annotations

import numpy as np
import torch

__all__ = ["relative_gradient_error", "check_gradients"]


def relative_gradient_error(loss_fn, module: torch.nn.Module, eps: float = 1e-4,
                            max_entries_per_param: int = 8, seed: int = 0) -> float:
    """Worst relative error between autograd and central differences.

    The check runs in float64: the comparison is between the analytic
    gradient and an independent numerical estimate, so shipping precision
    (float32) is irrelevant to its validity. A random subset of entries
    per parameter keeps micro-config checks fast.
    """
    module = module.double()
    for p in module.parameters():
        p.grad = None
    loss = loss_fn(module)
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for param in module.parameters():
            if param.grad is None:
                continue
            flat = param.reshape(-1)
            grad = param.grad.reshape(-1)
            n = flat.numel()
            picks = rng.choice(n, size=min(max_entries_per_param, n), replace=False)
            for i in picks:
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = float(loss_fn(module))
                flat[i] = orig - eps
                f_minus = float(loss_fn(module))
                flat[i] = orig
                fd = (f_plus - f_minus) / (2 * eps)
                denom = max(abs(fd), abs(grad[i].item())) + 1e-6
                worst = max(worst, abs(fd - grad[i].item()) / denom)
    return worst


def check_gradients(loss_fn, module, tol: float = 1e-3, **kwargs) -> float:
    err = relative_gradient_error(loss_fn, module, **kwargs)
    if err > tol:
        raise AssertionError(f"gradient check failed: rel error {err:.2e} > {tol}")
    return err
