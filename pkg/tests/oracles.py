"""Independent reference computations used by the tests.

Nothing here imports the package: each oracle re-derives its quantity from
first principles so it cannot share a bug with the code under test.
"""

import math

import numpy as np
import torch


def central_difference(f, x: torch.Tensor, step: float = 1e-5) -> torch.Tensor:
    """Elementwise central finite-difference gradient of scalar ``f`` at ``x`` (float64)."""
    x = x.detach().clone().double()
    grad = torch.zeros_like(x)
    with torch.no_grad():
        _fill_differences(f, x, grad, step)
    return grad


def _fill_differences(f, x, grad, step):
    flat = x.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        g[i] = (fp - fm) / (2 * step)


def analytic_gradient(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().double().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    return g.detach()


def max_relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-5) -> float:
    """Elementwise ``|a-b| / max(|a|, |b|, floor * max|b|)``, maximised.

    Entries far below the gradient's own scale are limited by finite-difference
    roundoff (about eps*|f|/step), so they are compared against a floor that is
    a fixed fraction of the largest entry rather than against themselves.
    """
    a, b = a.double(), b.double()
    scale = max(float(b.abs().max()), 1e-300)
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, floor * scale))
    return float(((a - b).abs() / denom).max())


def scalar_softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def scalar_cross_entropy(p, logits_q):
    q = scalar_softmax(logits_q)
    return -sum(pi * math.log(qi) for pi, qi in zip(p, q))


def homogeneous_view_matrix(angle, scale, offset):
    """3x3 homogeneous matrix of ``p -> R(scale * p - offset)`` built by composing elementary matrices."""
    S = np.diag([scale, scale, 1.0])
    T = np.array([[1.0, 0.0, -offset[0]], [0.0, 1.0, -offset[1]], [0.0, 0.0, 1.0]])
    c, s = math.cos(angle), math.sin(angle)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return R @ T @ S


def random_rotation(rng) -> np.ndarray:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def brute_force_nearest(a, b):
    """Distance from each row of ``a`` to its nearest row of ``b`` by a double loop."""
    out = []
    for p in a:
        best = math.inf
        for q in b:
            best = min(best, math.sqrt(sum((pi - qi) ** 2 for pi, qi in zip(p, q))))
        out.append(best)
    return np.array(out)
