"""Self-verification routines behind ``fedbayes gradcheck`` and ``fedbayes klcheck``.

Both build their own random cases from a seed and compare the library's
analytic answer with an independent numerical one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import bnn
from .bnn import Prior
from .numkernel import SeedPath, derive_rng, finite_diff_grad, softplus, softplus_inv

TINY_SHAPES = ([2, 3, 2], [3, 4, 2], [2, 4, 3, 2], [4, 3, 3], [3, 5, 2])
REL_FLOOR = 1e-6


@dataclass
class CheckResult:
    cases: int
    max_error: float
    worst_case: int

    def ok(self, tol: float) -> bool:
        return self.max_error <= tol


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, floor)`` elementwise."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def random_tiny_case(seed: int, i: int):
    """A small bayesian net (<= 50 parameters), a batch, frozen noise and a prior."""
    rng = derive_rng(SeedPath(seed, (i,)))
    sizes = TINY_SHAPES[int(rng.integers(0, len(TINY_SHAPES)))]
    net = bnn.init_net(sizes, rng, 0.1)
    net.mu[:] = rng.uniform(net.n_params, -1.0, 1.0)
    net.rho[:] = softplus_inv(rng.uniform(net.n_params, 0.05, 0.6))
    X = rng.uniform((6, sizes[0]), -1.0, 1.0)
    y = rng.integers(0, sizes[-1], 6)
    noise = [bnn.draw_noise(net, rng) for _ in range(2)]
    prior = Prior(float(rng.uniform(None, -0.5, 0.5)), float(rng.uniform(None, 0.5, 2.0)))
    kl_scale = float(rng.uniform(None, 0.0, 0.5))
    return net, X, y, noise, prior, kl_scale


def gradient_check(seed: int, n_nets: int = 10, h: float = 1e-5) -> CheckResult:
    """Max relative error of the analytic (mu, rho) gradient against central differences."""
    worst, worst_i = 0.0, -1
    for i in range(n_nets):
        net, X, y, noise, prior, kl_scale = random_tiny_case(seed, i)
        _, g = bnn.loss_and_grad(net, X, y, prior, kl_scale, noise)

        def f(theta: np.ndarray) -> float:
            probe = net.with_flat(theta)
            return bnn.loss_and_grad(probe, X, y, prior, kl_scale, noise, want_grad=False)[0].loss

        fd = finite_diff_grad(f, net.flat(), h)
        err = float(np.max(relative_error(g.flat(), fd)))
        if err > worst:
            worst, worst_i = err, i
    return CheckResult(n_nets, worst, worst_i)


def kl_quadrature(mu_q: float, sigma_q: float, mu_p: float, sigma_p: float, n: int = 4001) -> float:
    """Composite Simpson integral of q ln(q/p) over mu_q +- 12 sigma_q."""
    if n % 2 == 0:
        n += 1
    x = np.linspace(mu_q - 12 * sigma_q, mu_q + 12 * sigma_q, n)
    logq = -0.5 * ((x - mu_q) / sigma_q) ** 2 - math.log(sigma_q * math.sqrt(2 * math.pi))
    logp = -0.5 * ((x - mu_p) / sigma_p) ** 2 - math.log(sigma_p * math.sqrt(2 * math.pi))
    f = np.exp(logq) * (logq - logp)
    w = np.ones(n)
    w[1:-1:2], w[2:-1:2] = 4.0, 2.0
    return float((x[1] - x[0]) / 3.0 * np.dot(w, f))


def kl_check(seed: int, n_cases: int = 20) -> CheckResult:
    """Max absolute gap between closed-form KL and per-parameter quadrature."""
    worst, worst_i = 0.0, -1
    for i in range(n_cases):
        rng = derive_rng(SeedPath(seed, (0x4B, i)))
        k = int(rng.integers(1, 6))
        net = bnn.init_net([k, 1], rng)
        net.mu[:] = rng.uniform(net.n_params, -2.0, 2.0)
        net.rho[:] = softplus_inv(rng.uniform(net.n_params, 0.2, 3.0))
        prior = Prior(float(rng.uniform(None, -1.0, 1.0)), float(rng.uniform(None, 0.5, 2.0)))
        sig = softplus(net.rho)
        numeric = sum(kl_quadrature(m, s, prior.mu0, prior.sigma0) for m, s in zip(net.mu, sig))
        err = abs(bnn.kl_diag_gauss(net, prior) - numeric)
        if err > worst:
            worst, worst_i = err, i
    return CheckResult(n_cases, worst, worst_i)
