"""Shared builders for the test modules."""

import numpy as np

from eghn import autodiff as ad
from eghn.system import SystemGraph, build_global_adjacency

# one "[criterion N] PASS/FAIL ..." line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: list[str] = []


def random_system(rng, N=5, c=4, e=2, m=2, batch=None, local_density=0.5, threshold=np.inf):
    """Random symmetric local bonds, thresholded global graph, random edge attributes."""
    lead = () if batch is None else (batch,)
    Z = rng.normal(size=lead + (N, 3, m))
    h = rng.normal(size=lead + (N, c))
    upper = np.triu(rng.random(lead + (N, N)) < local_density, k=1).astype(float)
    A_local = upper + np.swapaxes(upper, -1, -2)
    A_global = build_global_adjacency(Z[..., 0], threshold)
    E = rng.normal(size=lead + (N, N, e)) if e else None
    roles = ("position", "velocity", "other")[:m]
    return SystemGraph(Z, h, A_local, A_global, E, roles)


def rel_residual(a, b):
    a = a.data if isinstance(a, ad.Tensor) else np.asarray(a)
    b = b.data if isinstance(b, ad.Tensor) else np.asarray(b)
    return np.abs(a - b).max() / max(np.abs(b).max(), 1.0)


def path_graph(N):
    A = np.zeros((N, N))
    for i in range(N - 1):
        A[i, i + 1] = A[i + 1, i] = 1.0
    return A


def sampled_grad_error(loss_fn, params, rng, per_tensor=25, step=1e-5):
    """Worst relative error between ``p.grad`` and central differences on sampled entries.

    ``loss_fn`` must already have been differentiated so every ``p.grad`` is set.
    The 1e-3 floor keeps round-off in near-zero gradients from reading as error.
    """
    worst = 0.0
    with ad.no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            ana = np.zeros_like(flat) if p.grad is None else p.grad.reshape(-1)
            picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
            num = np.empty(len(picks))
            for k, idx in enumerate(picks):
                orig = flat[idx]
                flat[idx] = orig + step
                fp = loss_fn().item()
                flat[idx] = orig - step
                fm = loss_fn().item()
                flat[idx] = orig
                num[k] = (fp - fm) / (2 * step)
            denom = max(np.abs(num).max(), np.abs(ana[picks]).max(), 1e-3)
            worst = max(worst, np.abs(num - ana[picks]).max() / denom)
    return worst
