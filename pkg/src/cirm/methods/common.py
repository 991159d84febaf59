"""Pieces shared by every trainer: minibatching, risks, schedules and the predictor."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from cirm.autodiff import Tensor, bce_with_logits, grad, mse, no_grad, sq_norm
from cirm.envs import EnvironmentData
from cirm.nets import Arch, accuracy, head
from cirm.params import ParamSet
from cirm.variational import VariationalModel


def env_arrays(env: EnvironmentData) -> tuple[np.ndarray, np.ndarray]:
    """Training arrays of ``env``; refuses test or already-consumed environments."""
    x, y = env.training_arrays()
    if len(x) == 0:
        raise ValueError("environment has no samples")
    return x, y


def as_targets(y: np.ndarray, task: str) -> np.ndarray:
    if task == "classification":
        return np.asarray(y, dtype=np.float64).reshape(-1, 1)
    y = np.asarray(y, dtype=np.float64)
    return y.reshape(len(y), -1)


def risk(logits: Tensor, targets: np.ndarray, task: str) -> Tensor:
    if task == "classification":
        return bce_with_logits(logits, targets)
    return mse(logits, targets)


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of shuffled index batches; the last batch may be short."""
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def penalty_weight(lam: float, epoch: int, anneal_epoch: int) -> float:
    """IRMv1 weight: at most 1 before ``anneal_epoch``, the full ``lam`` from then on."""
    return min(lam, 1.0) if epoch < anneal_epoch else lam


def irm_scale_penalty(logits: Tensor, targets: np.ndarray, task: str) -> tuple[Tensor, Tensor]:
    """(risk, ||d/dw risk(w * logits)|_{w=1}||^2) with the gradient kept differentiable."""
    w = Tensor(np.ones(1), requires_grad=True)
    r = risk(logits * w, targets, task)
    (g,) = grad(r, [w], create_graph=True)
    return r, sq_norm(g)


def weight_decay_term(leaves, names, wd: float) -> Tensor | None:
    if wd <= 0:
        return None
    total = Tensor(0.0)
    for k in names:
        total = total + sq_norm(leaves[k])
    return total * (0.5 * wd)


@dataclass
class TrainedPredictor:
    """A trained ``w o phi``.

    ``params`` always holds deterministic weights (the posterior mean for variational
    models). ``extra_heads`` lists further classifier weight pairs averaged into the
    prediction (IRMG ensembles); ``variational`` keeps the full posterior for
    MC-averaged prediction.
    """

    method: str
    params: ParamSet
    task: str = "classification"
    extra_heads: list[dict[str, np.ndarray]] = field(default_factory=list)
    head_weights: list[float] | None = None
    variational: VariationalModel | None = None
    log: list[dict] = field(default_factory=list)
    arch: Arch = field(default_factory=Arch)

    def logits(self, x: np.ndarray, mc_samples: int = 0, seed: int = 0) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        with no_grad():
            if mc_samples > 0:
                if self.variational is None:
                    raise ValueError("MC prediction needs a variational posterior")
                rng = np.random.default_rng(seed)
                vm = self.variational
                out = 0.0
                for _ in range(mc_samples):
                    draw = {k: Tensor(vm.params[f"{k}.mu"] + vm.variable(k).sigma
                                      * rng.standard_normal(vm.params[f"{k}.mu"].shape))
                            for k in vm.base_names}
                    out = out + self.arch.forward(draw, x).data
                return out / mc_samples
            p = {k: Tensor(v) for k, v in self.params.arrays.items()}
            if not self.extra_heads:
                return self.arch.forward(p, x).data
            h = self.arch.features(p, x)
            heads = [{"head.W": self.params["head.W"], "head.b": self.params["head.b"]}, *self.extra_heads]
            wts = self.head_weights or [1.0 / len(heads)] * len(heads)
            out = 0.0
            for wt, hd in zip(wts, heads):
                out = out + wt * head({k: Tensor(v) for k, v in hd.items()}, h).data
            return out

    def accuracy(self, x: np.ndarray, y: np.ndarray, mc_samples: int = 0) -> float:
        return accuracy(self.logits(x, mc_samples), np.asarray(y))

    def mse(self, x: np.ndarray, y: np.ndarray) -> float:
        pred = self.logits(x)
        return float(np.mean((pred - as_targets(y, "regression")) ** 2))

    def linear_coefficients(self) -> np.ndarray:
        """End-to-end regression matrix ``phi @ w`` of a linear model."""
        if self.arch.kind != "linear":
            raise ValueError("coefficients exist only for the linear model")
        return self.params["phi"] @ self.params["w"]

    def evaluate(self, env: EnvironmentData, mc_samples: int = 0) -> float:
        """Accuracy (classification) or MSE (regression); reads test data without training on it."""
        if self.task == "classification":
            return self.accuracy(env.features, env.labels, mc_samples)
        return self.mse(env.features, env.labels)


def check_envs(envs: Sequence[EnvironmentData]) -> None:
    if len(envs) < 1:
        raise ValueError("need at least one environment")
