"""Random-case comparisons of the analytic machinery against the independent oracles.

Each ``*_cases`` function returns one relative error per random case. The
relative error of an analytic gradient ``a`` against a finite-difference
estimate ``n`` is ``||a - n|| / max(||a||, ||n||, 1e-8)``.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from cirm import autodiff as ad
from cirm.admm import AdmmState, gadmm_step, quadratic_block_solver
from cirm.autodiff import Tensor, grad
from cirm.methods.common import irm_scale_penalty
from cirm.methods.linear import vcl_gaussian_chain
from cirm.nets import forward, init_mlp
from cirm.oracles import (DiscreteDistribution, Gaussian, brute_force_projection, conjugate_posterior,
                          finite_diff_grad, info_projection, kl_discrete)
from cirm.params import grad_penalty_grad
from cirm.variational import GaussianVariable, kl_gaussian_diag, kl_gradients, kl_tensor, reparam

H = 1e-6


def rel_error(a, n) -> float:
    a, n = np.ravel(a), np.ravel(n)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-8))


def _check(fn: Callable[..., Tensor], arrays: list[np.ndarray]) -> float:
    """Largest relative error over the inputs of ``fn`` (autodiff vs central differences)."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    gs = grad(fn(*leaves), leaves)
    worst = 0.0
    for i, g in enumerate(gs):
        def f(x, i=i):
            args = [Tensor(a) for a in arrays]
            args[i] = Tensor(x)
            return fn(*args).item()
        worst = max(worst, rel_error(g.data, finite_diff_grad(f, arrays[i], H)))
    return worst


# -- primitives ---------------------------------------------------------------------

def _primitive_table(rng):
    def r(*shape, lo=-1.5, hi=1.5):
        return rng.uniform(lo, hi, shape)

    fixed: dict[tuple, np.ndarray] = {}

    def w(shape):
        # fixed random projection that makes each output scalar
        if shape not in fixed:
            fixed[shape] = rng.standard_normal(shape)
        return fixed[shape]

    n, m, k = rng.integers(1, 5, size=3)
    labels = rng.integers(0, k + 1, size=n)
    y01 = rng.integers(0, 2, size=(n, 1)).astype(float)
    target = r(n, m)
    return [
        ("add", lambda a, b: ad.tsum(ad.add(a, b) * w((n, m))), [r(n, m), r(m)]),
        ("sub", lambda a, b: ad.tsum(ad.sub(a, b) * w((n, m))), [r(n, m), r(n, m)]),
        ("mul", lambda a, b: ad.tsum(ad.mul(a, b) * w((n, m))), [r(n, m), r(1, m)]),
        ("div", lambda a, b: ad.tsum(ad.div(a, b) * w((n, m))), [r(n, m), r(n, m, lo=0.5, hi=2.0)]),
        ("neg", lambda a: ad.tsum(ad.neg(a) * w((n,))), [r(n)]),
        ("power", lambda a: ad.tsum(ad.power(a, 3.0) * w((n, m))), [r(n, m)]),
        ("matmul", lambda a, b: ad.tsum(ad.matmul(a, b) * w((n, k))), [r(n, m), r(m, k)]),
        ("transpose", lambda a: ad.tsum(ad.transpose(a) * w((m, n))), [r(n, m)]),
        ("reshape", lambda a: ad.tsum(ad.reshape(a, (n * m,)) * w((n * m,))), [r(n, m)]),
        ("sum_axis", lambda a: ad.tsum(ad.tsum(a, axis=0) * w((m,))), [r(n, m)]),
        ("mean", lambda a: ad.tsum(ad.mean(a, axis=1, keepdims=True) * w((n, 1))), [r(n, m)]),
        ("concat", lambda a, b: ad.tsum(ad.concat([a, b], axis=1) * w((n, 2 * m))), [r(n, m), r(n, m)]),
        ("slice", lambda a: ad.tsum(ad.take_slice(a, 1, 0, 1) * w((n, 1))), [r(n, m)]),
        ("exp", lambda a: ad.tsum(ad.exp(a) * w((n, m))), [r(n, m)]),
        ("log", lambda a: ad.tsum(ad.log(a) * w((n, m))), [r(n, m, lo=0.3, hi=3.0)]),
        ("sigmoid", lambda a: ad.tsum(ad.sigmoid(a) * w((n, m))), [r(n, m)]),
        ("softplus", lambda a: ad.tsum(ad.softplus(a) * w((n, m))), [r(n, m)]),
        # keep ELU arguments away from the kink at 0
        ("elu", lambda a: ad.tsum(ad.elu(a) * w((n, m))),
         [np.where(rng.random((n, m)) < 0.5, -1, 1) * r(n, m, lo=0.05, hi=1.5)]),
        ("log_softmax", lambda a: ad.tsum(ad.log_softmax(a) * w((n, k + 1))), [r(n, k + 1)]),
        ("softmax_ce", lambda a: ad.softmax_cross_entropy(a, labels), [r(n, k + 1)]),
        ("bce", lambda a: ad.bce_with_logits(a, y01), [r(n, 1)]),
        ("mse", lambda a: ad.mse(a, target), [r(n, m)]),
        ("sq_norm", lambda a: ad.sq_norm(a), [r(n, m)]),
    ]


def primitive_cases(n_cases: int = 115, seed: int = 0) -> list[tuple[str, float]]:
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n_cases:
        for name, fn, arrays in _primitive_table(rng):
            out.append((name, _check(fn, arrays)))
    return out[:n_cases]


# -- KL ----------------------------------------------------------------------------

def kl_cases(n_cases: int = 100, seed: int = 1) -> list[float]:
    """Autodiff and closed-form KL gradients, both against finite differences."""
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_cases):
        d = int(rng.integers(1, 6))
        mu, rho = rng.normal(0, 1, d), rng.normal(-1, 1, d)
        pm, ps = rng.normal(0, 1, d), rng.uniform(0.3, 2.0, d)
        e_auto = _check(lambda a, b: kl_tensor(a, b, pm, ps), [mu, rho])
        p = GaussianVariable.from_sigma(pm, ps)
        g_mu, g_rho = kl_gradients(GaussianVariable(mu, rho), p)
        f_mu = finite_diff_grad(lambda x: kl_gaussian_diag(GaussianVariable(x, rho), p), mu, H)
        f_rho = finite_diff_grad(lambda x: kl_gaussian_diag(GaussianVariable(mu, x), p), rho, H)
        errs.append(max(e_auto, rel_error(g_mu, f_mu), rel_error(g_rho, f_rho)))
    return errs


# -- reparametrization path ---------------------------------------------------------

def reparam_cases(n_cases: int = 100, seed: int = 2) -> list[float]:
    """Gradient of a network risk through ``mu + softplus(rho) * eps`` with eps held fixed."""
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_cases):
        d_in, hdim, n = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 6))
        base = init_mlp(d_in, (hdim,), 1, rng)
        names = base.names()
        x = rng.normal(size=(n, d_in))
        y = rng.integers(0, 2, size=(n, 1)).astype(float)
        eps = {k: rng.standard_normal(base[k].shape) for k in names}
        mus = [base[k] for k in names]
        rhos = [rng.normal(-2, 0.5, base[k].shape) for k in names]

        def fn(*args):
            k = len(names)
            p = {nm: reparam(args[i], args[k + i], eps[nm]) for i, nm in enumerate(names)}
            return ad.bce_with_logits(forward(p, x), y)

        errs.append(_check(fn, mus + rhos))
    return errs


# -- IRMv1 penalty gradient -------------------------------------------------------------

def irm_penalty_cases(n_cases: int = 100, seed: int = 3) -> list[float]:
    """Gradient of the squared scale-gradient penalty through the nested backward pass."""
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_cases):
        d_in, hdim, n = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 6))
        ps = init_mlp(d_in, (hdim,), 1, rng)
        names = ps.names()
        x = rng.normal(size=(n, d_in))
        y = rng.integers(0, 2, size=(n, 1)).astype(float)

        def fn(*args):
            p = dict(zip(names, args))
            return irm_scale_penalty(forward(p, x), y, "classification")[1]

        errs.append(_check(fn, [ps[k] for k in names]))
    return errs


def penalty_grad_cases(n_cases: int = 20, seed: int = 4) -> list[float]:
    """``grad_penalty_grad`` (nested) against finite differences of the penalty value."""
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_cases):
        ps = init_mlp(2, (3,), 1, rng)
        x = rng.normal(size=(5, 2))
        y = rng.integers(0, 2, size=(5, 1)).astype(float)
        builder = lambda leaves: ad.bce_with_logits(forward(leaves, x), y)
        res = grad_penalty_grad(builder, ps)
        for k in ps.names():
            def f(v, k=k):
                q = ps.copy()
                q[k] = v
                return grad_penalty_grad(builder, q).value
            errs.append(rel_error(res.grads[k], finite_diff_grad(f, ps[k], H)))
    return errs


# -- other oracles ------------------------------------------------------------------

def conjugate_chain_error(n_envs: int, seed: int = 0, dim: int = 3) -> float:
    """Largest |difference| between sequential VCL and the batch posterior (means and covariances)."""
    rng = np.random.default_rng([seed, n_envs])
    envs = []
    for _ in range(n_envs):
        n = int(rng.integers(3, 20))
        X = rng.normal(size=(n, dim))
        envs.append((X, X @ rng.normal(size=dim) + 0.5 * rng.normal(size=n)))
    m0, S0 = np.zeros(dim), np.eye(dim)
    m, S = vcl_gaussian_chain(m0, S0, envs, 0.25)[-1]
    batch = conjugate_posterior(Gaussian(m0, S0), np.vstack([e[0] for e in envs]),
                                np.concatenate([e[1] for e in envs]), 0.25)
    return float(max(np.max(np.abs(m - batch.mean)), np.max(np.abs(S - batch.cov))))


def projection_case(rng) -> tuple[float, bool]:
    """(closed form vs brute-force KL gap, sequential support shrinkage holds) for one random case."""
    k = int(rng.integers(2, 5))
    q = DiscreteDistribution(rng.dirichlet(np.ones(k)))
    s1 = set(rng.choice(k, size=int(rng.integers(1, k + 1)), replace=False).tolist())
    s2 = set(rng.choice(k, size=int(rng.integers(1, k + 1)), replace=False).tolist())
    if not s2 & s1:
        s2 |= {min(s1)}
    p1 = info_projection(q, s1)
    _, kl_bf = brute_force_projection(q, s1)
    gap = kl_bf - kl_discrete(p1, q)
    p2 = info_projection(p1, s2)
    shrink = p2.support <= (s1 & s2 & q.support)
    return gap, shrink


def admm_toy(targets=(1.0, 3.0), max_iter: int = 200, tol: float = 1e-3) -> tuple[int, float]:
    """(iterations used, final |consensus - mean|) on ``f_e(x) = (x - a_e)^2``."""
    a = [np.array([t]) for t in targets]
    st = AdmmState.init(np.zeros(1), len(a))
    upd = quadratic_block_solver(a)
    exact = float(np.mean(targets))
    for i in range(1, max_iter + 1):
        gadmm_step(st, upd)
        if abs(st.consensus[0] - exact) < tol and max(abs(b[0] - exact) for b in st.blocks) < tol:
            return i, abs(float(st.consensus[0]) - exact)
    return max_iter, abs(float(st.consensus[0]) - exact)


def run_checks(scale: float = 0.2):
    """Quick versions of every oracle comparison: yields (name, ok, detail)."""
    t0 = time.perf_counter()
    n = max(10, int(100 * scale))
    for name, errs in (("primitive gradients", [e for _, e in primitive_cases(max(23, n))]),
                       ("kl gradients", kl_cases(n)),
                       ("reparametrization gradients", reparam_cases(n)),
                       ("irmv1 penalty gradients", irm_penalty_cases(n))):
        worst = max(errs)
        yield name, worst < 1e-3, f"{len(errs)} cases, worst relative error {worst:.2e}"
    worst = max(conjugate_chain_error(t, s) for t in range(2, 11) for s in range(2))
    yield "conjugate recursion", worst < 1e-6, f"chains of 2-10, worst deviation {worst:.2e}"
    rng = np.random.default_rng(0)
    cases = [projection_case(rng) for _ in range(n)]
    ok = all(-1e-12 <= g < 1e-2 and s for g, s in cases)
    yield "information projection", ok, f"{len(cases)} cases, worst KL gap {max(g for g, _ in cases):.2e}"
    iters, err = admm_toy()
    yield "admm consensus", err < 1e-3, f"{iters} iterations, error {err:.2e}"
    yield "runtime", True, f"{time.perf_counter() - t0:.1f}s"
