"""Finite-difference gradient probes and small shared builders."""
import numpy as np
import torch


def fd_grad(f, x: torch.Tensor, idx, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. flat entries ``idx`` of ``x`` (modified in place, restored)."""
    flat = x.data.view(-1)
    out = []
    for i in idx:
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(f())
        flat[i] = orig - eps
        lo = float(f())
        flat[i] = orig
        out.append((hi - lo) / (2 * eps))
    return np.array(out)


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def grad_check(f, tensors, n_probe: int | None = None, seed: int = 0, eps: float = 1e-6) -> float:
    """Norm-wise relative error between autograd and central differences.

    ``f`` returns a scalar tensor built from ``tensors`` (float64, requires_grad).
    """
    for t in tensors:
        t.grad = None
    f().backward()
    rng = np.random.default_rng(seed)
    auto, num = [], []
    for t in tensors:
        n = t.numel()
        idx = np.arange(n) if n_probe is None or n <= n_probe else rng.choice(n, n_probe, replace=False)
        auto.append(t.grad.view(-1)[idx].numpy())
        with torch.no_grad():
            num.append(fd_grad(f, t, idx, eps))
    return rel_error(np.concatenate(auto), np.concatenate(num))
