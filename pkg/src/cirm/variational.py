"""Mean-field diagonal Gaussians over network parameters.

Each parameter ``p`` of a deterministic ``ParamSet`` becomes a pair ``p.mu`` and
``p.rho`` with ``sigma = softplus(rho)``. Sampling uses the reparametrization
``w = mu + eps * sigma`` so gradients reach both halves.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from cirm.autodiff import Tensor, log, mean, softplus, tsum
from cirm.params import ParamSet


def softplus_np(x):
    return np.logaddexp(0.0, x)


def inv_softplus(s):
    s = np.asarray(s, dtype=np.float64)
    return s + np.log(-np.expm1(-s))


@dataclass
class GaussianVariable:
    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if self.mu.shape != self.rho.shape:
            raise ValueError(f"mu shape {self.mu.shape} != rho shape {self.rho.shape}")

    @property
    def sigma(self) -> np.ndarray:
        return softplus_np(self.rho)

    @classmethod
    def from_sigma(cls, mu, sigma) -> GaussianVariable:
        return cls(mu, inv_softplus(sigma))


def reparam(mu: Tensor, rho: Tensor, eps: np.ndarray) -> Tensor:
    """Differentiable draw ``mu + eps * softplus(rho)``."""
    if eps.shape != mu.shape:
        raise ValueError(f"epsilon shape {eps.shape} != mu shape {mu.shape}")
    return mu + softplus(rho) * eps


def sample_reparam(gv: GaussianVariable, epsilon) -> np.ndarray:
    eps = np.asarray(epsilon, dtype=np.float64)
    if eps.shape != gv.mu.shape:
        raise ValueError(f"epsilon shape {eps.shape} != mu shape {gv.mu.shape}")
    return gv.mu + eps * gv.sigma


def kl_gaussian_diag(q: GaussianVariable, p: GaussianVariable) -> float:
    """KL(q || p) for diagonal Gaussians, summed over all coordinates."""
    if q.mu.shape != p.mu.shape:
        raise ValueError(f"shape mismatch {q.mu.shape} vs {p.mu.shape}")
    sq, sp = q.sigma, p.sigma
    if np.any(sq <= 0) or np.any(sp <= 0):
        raise ValueError("standard deviations must be positive")
    return float(np.sum(np.log(sp / sq) + (sq**2 + (q.mu - p.mu) ** 2) / (2 * sp**2) - 0.5))


def kl_gradients(q: GaussianVariable, p: GaussianVariable) -> tuple[np.ndarray, np.ndarray]:
    """Analytic (dKL/dmu_q, dKL/drho_q) of :func:`kl_gaussian_diag`."""
    if q.mu.shape != p.mu.shape:
        raise ValueError(f"shape mismatch {q.mu.shape} vs {p.mu.shape}")
    sq, sp = q.sigma, p.sigma
    d_mu = (q.mu - p.mu) / sp**2
    d_sigma = -1.0 / sq + sq / sp**2
    dsigma_drho = 0.5 * (1.0 + np.tanh(0.5 * q.rho))
    return d_mu, d_sigma * dsigma_drho


def kl_tensor(mu: Tensor, rho: Tensor, prior_mu: np.ndarray, prior_sigma: np.ndarray,
              sigma: Tensor | None = None) -> Tensor:
    """Differentiable KL(N(mu, softplus(rho)^2) || N(prior_mu, prior_sigma^2)).

    ``sigma`` may pass an already computed ``softplus(rho)`` node.
    """
    sq = softplus(rho) if sigma is None else sigma
    var_p = prior_sigma**2
    return tsum(np.log(prior_sigma) - log(sq) + (sq * sq + (mu - prior_mu) * (mu - prior_mu)) / (2 * var_p) - 0.5)


class VariationalModel:
    """Mean-field posterior over a deterministic parameter layout.

    ``params`` is a ParamSet holding ``<name>.mu`` / ``<name>.rho`` entries; its omega
    partition holds the classifier's mu/rho pairs.
    """

    def __init__(self, params: ParamSet, base_names: tuple[str, ...], base_omega: tuple[str, ...]):
        self.params = params
        self.base_names = base_names
        self.base_omega = base_omega

    @classmethod
    def from_deterministic(cls, det: ParamSet, sigma0: float = 1e-2) -> VariationalModel:
        arrays, omega = {}, []
        rho0 = float(inv_softplus(sigma0))
        for k, v in det.arrays.items():
            arrays[f"{k}.mu"] = v.copy()
            arrays[f"{k}.rho"] = np.full_like(v, rho0)
            if k in det.omega:
                omega += [f"{k}.mu", f"{k}.rho"]
        return cls(ParamSet(arrays, omega), det.names(), det.omega)

    @property
    def base_theta(self) -> tuple[str, ...]:
        return tuple(k for k in self.base_names if k not in self.base_omega)

    def variable(self, name: str) -> GaussianVariable:
        return GaussianVariable(self.params[f"{name}.mu"], self.params[f"{name}.rho"])

    def copy(self) -> VariationalModel:
        return VariationalModel(self.params.copy(), self.base_names, self.base_omega)

    def mean_params(self) -> ParamSet:
        return ParamSet({k: self.params[f"{k}.mu"].copy() for k in self.base_names}, self.base_omega)

    def prior(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """This posterior frozen as a prior: name -> (mu, sigma) copies."""
        return {k: (self.params[f"{k}.mu"].copy(), softplus_np(self.params[f"{k}.rho"]).copy())
                for k in self.base_names}

    def sample(self, leaves: Mapping[str, Tensor], rng: np.random.Generator,
               names: tuple[str, ...] | None = None) -> dict[str, Tensor]:
        """One reparametrized draw of every base parameter from ``leaves`` (mu/rho tensors)."""
        out = {}
        for k in (self.base_names if names is None else names):
            mu, rho = leaves[f"{k}.mu"], leaves[f"{k}.rho"]
            out[k] = reparam(mu, rho, rng.standard_normal(mu.shape))
        return out

    def kl(self, leaves: Mapping[str, Tensor], prior: Mapping[str, tuple[np.ndarray, np.ndarray]],
           names: tuple[str, ...], sigmas: Mapping[str, Tensor] | None = None) -> Tensor:
        total = Tensor(0.0)
        for k in names:
            pm, ps = prior[k]
            sig = None if sigmas is None else sigmas.get(k)
            total = total + kl_tensor(leaves[f"{k}.mu"], leaves[f"{k}.rho"], pm, ps, sig)
        return total


def standard_prior(model: VariationalModel, sigma: float = 1.0) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    return {k: (np.zeros_like(model.params[f"{k}.mu"]), np.full_like(model.params[f"{k}.mu"], sigma))
            for k in model.base_names}


def mc_expected_risk(model: VariationalModel, leaves: Mapping[str, Tensor],
                     risk: Callable[[Mapping[str, Tensor]], Tensor], n_samples: int,
                     rng: np.random.Generator) -> Tensor:
    """Average of ``risk`` over ``n_samples`` fresh reparametrized parameter draws."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    total = Tensor(0.0)
    for _ in range(n_samples):
        total = total + risk(model.sample(leaves, rng))
    return total * (1.0 / n_samples)
