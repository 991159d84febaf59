"""Independent numerical references used to check the implementation.

Nothing here touches the autodiff engine: gradients come from finite differences,
projections from brute-force grids, posteriors from closed forms.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + h
        fp = float(f(x))
        flat[j] = old - h
        fm = float(f(x))
        flat[j] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {j}")
        gflat[j] = (fp - fm) / (2 * h)
    return g


class DisjointSupport(ValueError):
    pass


@dataclass
class DiscreteDistribution:
    """Probabilities over outcomes ``0..n-1``; the support is where p > 0."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if np.any(self.probs < 0):
            raise ValueError("probabilities must be non-negative")
        if abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {self.probs.sum()}, not 1")

    @property
    def support(self) -> frozenset[int]:
        return frozenset(int(i) for i in np.flatnonzero(self.probs > 0))

    @classmethod
    def uniform(cls, support: Iterable[int], n: int) -> DiscreteDistribution:
        support = sorted(support)
        p = np.zeros(n)
        p[support] = 1.0 / len(support)
        return cls(p)


def kl_discrete(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """KL(p || q) with 0 log 0 = 0; infinite when p puts mass outside supp(q)."""
    pp, qq = p.probs, q.probs
    mask = pp > 0
    if np.any(qq[mask] == 0):
        return float("inf")
    return float(np.sum(pp[mask] * np.log(pp[mask] / qq[mask])))


def info_projection(q: DiscreteDistribution, support: Iterable[int]) -> DiscreteDistribution:
    """argmin KL(p || q) over distributions supported on ``support``.

    The minimizer is ``q`` restricted to ``support`` and renormalized.
    """
    s = set(int(i) for i in support)
    keep = sorted(s & q.support)
    if not keep:
        raise DisjointSupport("support constraint does not meet the support of q")
    p = np.zeros_like(q.probs)
    p[keep] = q.probs[keep]
    return DiscreteDistribution(p / p.sum())


def sequential_projection(q: DiscreteDistribution, supports: Sequence[Iterable[int]]) -> list[DiscreteDistribution]:
    """Project ``q`` through each support constraint in turn; returns every iterate."""
    out, cur = [], q
    for s in supports:
        cur = info_projection(cur, s)
        out.append(cur)
    return out


def grid_resolution(n_outcomes: int) -> float:
    return 0.01 if n_outcomes <= 4 else 0.05


def simplex_grid(k: int, step: float) -> np.ndarray:
    """All points of the ``k``-simplex with coordinates on multiples of ``step``, one per row."""
    m = int(round(1.0 / step))
    if k == 1:
        return np.ones((1, 1))
    cuts = np.array(list(itertools.combinations(range(m + k - 1), k - 1)), dtype=np.int64)
    edges = np.concatenate([np.full((len(cuts), 1), -1), cuts, np.full((len(cuts), 1), m + k - 1)], axis=1)
    return (np.diff(edges, axis=1) - 1) / m


def brute_force_projection(q: DiscreteDistribution, support: Iterable[int],
                           step: float | None = None) -> tuple[DiscreteDistribution, float]:
    """Grid search for the projection over all distributions supported on ``support``."""
    s = sorted(set(int(i) for i in support) & set(range(len(q.probs))))
    if not set(s) & q.support:
        raise DisjointSupport("support constraint does not meet the support of q")
    step = grid_resolution(len(q.probs)) if step is None else step
    pts = simplex_grid(len(s), step)
    qs = q.probs[s]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pts > 0, pts * np.log(pts / qs), 0.0)
    kl = terms.sum(axis=1)
    best = int(np.argmin(kl))
    p = np.zeros_like(q.probs)
    p[s] = pts[best]
    return DiscreteDistribution(p), float(kl[best])


@dataclass
class Gaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))


def conjugate_posterior(prior: Gaussian, X=None, y=None, noise_var: float = 1.0) -> Gaussian:
    """Posterior of ``theta`` for ``y = X theta + N(0, noise_var)`` under a Gaussian prior."""
    if X is None or len(X) == 0:
        return Gaussian(prior.mean.copy(), prior.cov.copy())
    if noise_var <= 0:
        raise ValueError("noise variance must be positive")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    prec0 = np.linalg.inv(prior.cov)
    prec = prec0 + X.T @ X / noise_var
    if np.linalg.cond(prec) > 1e14:
        raise np.linalg.LinAlgError("posterior precision is singular")
    cov = np.linalg.inv(prec)
    mean = cov @ (prec0 @ prior.mean + X.T @ y / noise_var)
    return Gaussian(mean, cov)


def ols_solve(X, Y, ridge: float = 1e-8) -> np.ndarray:
    """Normal-equations least squares, with a tiny ridge if ``X^T X`` is singular."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    A = X.T @ X
    if np.linalg.matrix_rank(A) < A.shape[0]:
        warnings.warn(f"singular normal equations; adding ridge {ridge}", RuntimeWarning)
        A = A + ridge * np.eye(A.shape[0])
    return np.linalg.solve(A, X.T @ Y)
