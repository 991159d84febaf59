"""Closed-form tools for linear models: stationarity residuals, conjugate VCL, SEM errors."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def linear_stationarity_check(phi: np.ndarray, w: np.ndarray, X: np.ndarray, Y: np.ndarray) -> float:
    """``||Phi E[x x^T] Phi^T w - Phi E[x y^T]||`` with empirical moments.

    ``phi`` maps inputs to features as ``x @ phi`` (so ``Phi = phi.T``).
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64).reshape(len(X), -1)
    w = np.asarray(w, dtype=np.float64).reshape(phi.shape[1], -1)
    sxx = X.T @ X / len(X)
    sxy = X.T @ Y / len(X)
    return float(np.linalg.norm(phi.T @ sxx @ phi @ w - phi.T @ sxy))


def sem_errors(W: np.ndarray, dim: int) -> tuple[float, float]:
    """(causal, noncausal) squared error of a ``2*dim x dim`` regression matrix.

    The invariant regressor is the identity on the first block and zero on the
    second; each error is the squared Frobenius distance divided by ``dim``.
    """
    W = np.asarray(W, dtype=np.float64)
    causal = float(np.sum((W[:dim] - np.eye(dim)) ** 2) / dim)
    noncausal = float(np.sum(W[dim:] ** 2) / dim)
    return causal, noncausal


def vcl_gaussian_objective(mean, cov, prior_mean, prior_cov, X, y, noise_var: float) -> float:
    """``E_q[-log p(y | X, theta)] + KL(q || prior)`` for Gaussian ``q`` (constants dropped)."""
    mean, prior_mean = np.asarray(mean, float), np.asarray(prior_mean, float)
    X, y = np.atleast_2d(X), np.asarray(y, float).reshape(-1)
    resid = y - X @ mean
    nll = (resid @ resid + np.trace(X.T @ X @ cov)) / (2 * noise_var)
    p_inv = np.linalg.inv(prior_cov)
    d = mean - prior_mean
    k = len(mean)
    kl = 0.5 * (np.trace(p_inv @ cov) + d @ p_inv @ d - k
                + np.linalg.slogdet(prior_cov)[1] - np.linalg.slogdet(cov)[1])
    return float(nll + kl)


def vcl_gaussian_step(prior_mean, prior_cov, X, y, noise_var: float) -> tuple[np.ndarray, np.ndarray]:
    """Minimizer of :func:`vcl_gaussian_objective` over full-covariance Gaussians.

    Setting the objective's derivatives to zero gives the precision and the
    precision-weighted mean in natural-parameter form.
    """
    X, y = np.atleast_2d(np.asarray(X, float)), np.asarray(y, float).reshape(-1)
    lam0 = np.linalg.inv(prior_cov)
    lam = lam0 + X.T @ X / noise_var
    eta = lam0 @ np.asarray(prior_mean, float) + X.T @ y / noise_var
    cov = np.linalg.inv(lam)
    return cov @ eta, cov


def vcl_gaussian_chain(prior_mean, prior_cov, envs: Sequence[tuple[np.ndarray, np.ndarray]],
                       noise_var: float) -> list[tuple[np.ndarray, np.ndarray]]:
    """Run the VCL recursion through ``envs``; each posterior is the next prior."""
    out = []
    m, S = np.asarray(prior_mean, float), np.asarray(prior_cov, float)
    for X, y in envs:
        m, S = vcl_gaussian_step(m, S, X, y, noise_var)
        out.append((m.copy(), S.copy()))
    return out
