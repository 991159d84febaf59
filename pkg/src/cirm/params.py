"""Named parameter collections, optimizer steps and the gradient-penalty gradient."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from cirm.autodiff import NonFiniteError, Tensor, grad, sq_norm


class ParamSet:
    """Named arrays split into feature-extractor (theta) and classifier (omega) parts.

    ``omega`` lists the classifier names; every other entry belongs to theta, so
    the two partitions are disjoint and exhaustive by construction.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray], omega: Iterable[str] = ()):
        self.arrays: dict[str, np.ndarray] = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
        self.omega = tuple(omega)
        unknown = set(self.omega) - set(self.arrays)
        if unknown:
            raise KeyError(f"omega names not in parameter set: {sorted(unknown)}")

    @property
    def theta(self) -> tuple[str, ...]:
        return tuple(k for k in self.arrays if k not in self.omega)

    def names(self) -> tuple[str, ...]:
        return tuple(self.arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.arrays[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __iter__(self):
        return iter(self.arrays)

    def copy(self) -> ParamSet:
        return ParamSet({k: v.copy() for k, v in self.arrays.items()}, self.omega)

    def leaves(self, names: Iterable[str] | None = None) -> dict[str, Tensor]:
        """Fresh differentiable leaves for ``names`` (default all); the rest are constants."""
        wanted = set(self.arrays if names is None else names)
        return {k: Tensor(v, requires_grad=k in wanted, name=k) for k, v in self.arrays.items()}

    def flat(self, names: Iterable[str] | None = None) -> np.ndarray:
        names = self.names() if names is None else tuple(names)
        return np.concatenate([self.arrays[k].ravel() for k in names]) if names else np.zeros(0)

    def set_flat(self, vec: np.ndarray, names: Iterable[str] | None = None) -> None:
        names = self.names() if names is None else tuple(names)
        pos = 0
        for k in names:
            n = self.arrays[k].size
            self.arrays[k] = vec[pos:pos + n].reshape(self.arrays[k].shape).copy()
            pos += n

    def num_params(self) -> int:
        return sum(v.size for v in self.arrays.values())


def sgd_step(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float,
             weight_decay: float = 0.0) -> ParamSet:
    """In-place ``p <- p - lr * (g + weight_decay * p)`` for every name in ``grads``."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if weight_decay < 0:
        raise ValueError("weight_decay must be non-negative")
    for k, g in grads.items():
        p = params.arrays[k]
        if np.shape(g) != p.shape:
            raise ValueError(f"sgd_step: gradient for {k} has shape {np.shape(g)}, parameter {p.shape}")
        params.arrays[k] = p - lr * (g + weight_decay * p)
    return params


class Adam:
    """Adam; weight decay enters as an L2 term added to the gradient."""

    def __init__(self, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: ParamSet, grads: Mapping[str, np.ndarray]) -> ParamSet:
        for k, g in grads.items():
            p = params.arrays[k]
            g = g + self.weight_decay * p
            m = self.m.get(k, np.zeros_like(p))
            v = self.v.get(k, np.zeros_like(p))
            t = self.t.get(k, 0) + 1
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**t)
            vhat = v / (1 - self.b2**t)
            params.arrays[k] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            self.m[k], self.v[k], self.t[k] = m, v, t
        return params

    def reset(self, names: Iterable[str] | None = None) -> None:
        for k in list(self.m if names is None else names):
            self.m.pop(k, None)
            self.v.pop(k, None)
            self.t.pop(k, None)


class SGD:
    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, params: ParamSet, grads: Mapping[str, np.ndarray]) -> ParamSet:
        return sgd_step(params, grads, self.lr, self.weight_decay)

    def reset(self, names=None) -> None:
        pass


def make_optimizer(kind: str, lr: float, weight_decay: float = 0.0):
    if kind == "sgd":
        return SGD(lr, weight_decay)
    if kind == "adam":
        return Adam(lr, weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


@dataclass
class PenaltyGrad:
    value: float
    grads: dict[str, np.ndarray]
    mode: str
    inner_grad: dict[str, np.ndarray] = field(default_factory=dict)


def grad_penalty_grad(loss_builder: Callable[[dict[str, Tensor]], Tensor], params: ParamSet,
                      wrt: Iterable[str] | None = None, mode: str = "nested",
                      h: float | None = None) -> PenaltyGrad:
    """Value and full gradient of ``||grad_wrt L||^2`` where ``L = loss_builder(params)``.

    ``mode="nested"`` differentiates through the first backward pass. ``mode="fd"``
    uses a central-difference Hessian-vector product along the inner gradient, with
    step ``h = 1e-4 * (1 + max|omega|)`` unless given.
    """
    wrt = tuple(params.omega if wrt is None else wrt)
    names = params.names()
    if mode == "nested":
        leaves = params.leaves()
        loss = loss_builder(leaves)
        if loss.size != 1:
            raise ValueError(f"loss_builder must return a scalar, got shape {loss.shape}")
        inner = grad(loss, [leaves[k] for k in wrt], create_graph=True)
        pen = sum((sq_norm(g) for g in inner), Tensor(0.0))
        if not np.isfinite(pen.data):
            raise NonFiniteError("non-finite penalty during nested pass")
        outer = grad(pen, [leaves[k] for k in names])
        return PenaltyGrad(pen.item(), {k: g.data for k, g in zip(names, outer)}, "nested",
                           {k: g.data for k, g in zip(wrt, inner)})
    if mode != "fd":
        raise ValueError(f"unknown mode {mode!r}")

    def full_grad(ps: ParamSet) -> tuple[float, dict[str, np.ndarray]]:
        leaves = ps.leaves()
        loss = loss_builder(leaves)
        if loss.size != 1:
            raise ValueError(f"loss_builder must return a scalar, got shape {loss.shape}")
        gs = grad(loss, [leaves[k] for k in names])
        return loss.item(), {k: g.data for k, g in zip(names, gs)}

    _, g0 = full_grad(params)
    gw = np.concatenate([g0[k].ravel() for k in wrt])
    norm = float(np.linalg.norm(gw))
    inner = {k: g0[k] for k in wrt}
    if norm == 0.0:
        return PenaltyGrad(0.0, {k: np.zeros_like(v) for k, v in params.arrays.items()}, "fd", inner)
    direction = gw / norm
    base = params.flat(wrt)
    step = h if h is not None else 1e-4 * (1.0 + float(np.max(np.abs(base))))
    plus, minus = params.copy(), params.copy()
    plus.set_flat(base + step * direction, wrt)
    minus.set_flat(base - step * direction, wrt)
    _, gp = full_grad(plus)
    _, gm = full_grad(minus)
    # d/dp ||g||^2 = 2 H g = 2 |g| H v
    grads = {k: 2.0 * norm * (gp[k] - gm[k]) / (2.0 * step) for k in names}
    return PenaltyGrad(norm**2, grads, "fd", inner)
