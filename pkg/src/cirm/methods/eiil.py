"""Environment inference: split pooled data into two groups that maximize the IRMv1 penalty.

Soft membership ``q_i = sigmoid(a_i)`` puts sample ``i`` in group 1 with weight
``q_i`` and in group 2 with weight ``1 - q_i``. Each group's risk is the weighted
loss averaged over all ``N`` samples; its gradient along the classifier scale ``w``
(at ``w = 1``) is squared and summed over groups, and the logits ``a`` are trained
by gradient ascent on that sum with the reference predictor fixed. Since the two
group gradients add up to a constant, the ascent pushes samples with positive and
negative scale gradients apart.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from cirm.autodiff import Tensor, grad, sigmoid, tsum
from cirm.params import Adam, ParamSet


@dataclass
class EnvSplit:
    assignment: np.ndarray  # 0/1 group per sample (soft weights hardened at 0.5)
    weights: np.ndarray  # soft membership of group 1
    penalty: float
    status: str  # "ok" or "degenerate"

    def groups(self) -> tuple[np.ndarray, np.ndarray]:
        return np.flatnonzero(self.assignment == 1), np.flatnonzero(self.assignment == 0)


def scale_gradients(logits: np.ndarray, labels: np.ndarray, task: str = "classification") -> np.ndarray:
    """Per-sample ``d/dw loss(w * f_i, y_i)`` at ``w = 1``."""
    f = np.asarray(logits, dtype=np.float64).reshape(len(labels), -1)
    y = np.asarray(labels, dtype=np.float64).reshape(len(labels), -1)
    if task == "classification":
        p = 0.5 * (1.0 + np.tanh(0.5 * f))
        return ((p - y) * f).sum(axis=1)
    return (2.0 * (f - y) * f).mean(axis=1)


def split_penalty(a: Tensor, d: np.ndarray) -> Tensor:
    """Sum over both groups of the squared weighted scale gradient (averaged over all samples)."""
    q = sigmoid(a)
    r = 1.0 - q
    n = 1.0 / len(d)
    g1 = tsum(q * d) * n
    g2 = tsum(r * d) * n
    return g1 * g1 + g2 * g2


def eiil_infer(logits: np.ndarray, labels: np.ndarray, n_iters: int = 10_000, lr: float = 1e-2,
               task: str = "classification", seed: int = 0, jitter: float = 1e-3) -> EnvSplit:
    """Infer a two-environment split from a fixed reference predictor's ``logits``.

    Membership logits start at zero (every weight 0.5). Since that start is a
    stationary point of the penalty, ``jitter`` scales a small random offset from
    ``seed`` that breaks the symmetry.
    """
    d = scale_gradients(logits, labels, task)
    rng = np.random.default_rng(seed)
    ps = ParamSet({"a": jitter * rng.standard_normal(len(d))})
    opt = Adam(lr)
    value = 0.0
    for _ in range(n_iters):
        leaves = ps.leaves()
        pen = split_penalty(leaves["a"], d)
        value = pen.item()
        (g,) = grad(-pen, [leaves["a"]])
        opt.step(ps, {"a": g.data})
    weights = 1.0 / (1.0 + np.exp(-ps["a"]))
    assignment = (weights > 0.5).astype(np.int64)
    status = "ok"
    if assignment.min() == assignment.max():
        status = "degenerate"
        warnings.warn("environment inference put every sample in one group", RuntimeWarning)
    return EnvSplit(assignment, weights, value, status)
