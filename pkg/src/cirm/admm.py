"""Scaled consensus ADMM with per-block equality constraints.

Solves ``min sum_e f_e(x_e)`` subject to ``x_e = z`` and ``g_e(x_e) = 0`` through the
augmented Lagrangian

    L = sum_e f_e(x_e) + rho0/2 ||x_e - z + u_e||^2 + rho1/2 ||g_e(x_e) + v_e||^2

with updates, in order: block minimization, consensus average, scaled consensus
duals ``u_e``, constraint duals ``v_e``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class AdmmError(FloatingPointError):
    def __init__(self, block: int, what: str):
        self.block = block
        super().__init__(f"non-finite {what} in block {block}")


@dataclass
class Residuals:
    primal: float
    dual: float
    constraint: float

    def below(self, tol: float) -> bool:
        return self.primal < tol and self.dual < tol and self.constraint < tol


@dataclass
class AdmmState:
    blocks: list[np.ndarray]
    consensus: np.ndarray
    u: list[np.ndarray]
    v: list[np.ndarray]
    rho0: float = 10.0
    rho1: float = 10.0
    iteration: int = 0
    prev_consensus: np.ndarray | None = None
    last_constraint: list[float] = field(default_factory=list)

    @classmethod
    def init(cls, x0: np.ndarray, n_blocks: int, constraint_dim: int | None = None,
             rho0: float = 10.0, rho1: float = 10.0) -> AdmmState:
        x0 = np.asarray(x0, dtype=np.float64).ravel()
        cdim = x0.size if constraint_dim is None else constraint_dim
        if rho0 <= 0 or rho1 < 0:
            raise ValueError("rho0 must be positive and rho1 non-negative")
        return cls(
            blocks=[x0.copy() for _ in range(n_blocks)],
            consensus=x0.copy(),
            u=[np.zeros_like(x0) for _ in range(n_blocks)],
            v=[np.zeros(cdim) for _ in range(n_blocks)],
            rho0=rho0,
            rho1=rho1,
        )

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def copy(self) -> AdmmState:
        return AdmmState([b.copy() for b in self.blocks], self.consensus.copy(),
                         [x.copy() for x in self.u], [x.copy() for x in self.v],
                         self.rho0, self.rho1, self.iteration,
                         None if self.prev_consensus is None else self.prev_consensus.copy(),
                         list(self.last_constraint))


# block_update(e, state) -> new x_e; it sees the full pre-update state (Jacobi sweep)
BlockUpdate = Callable[[int, AdmmState], np.ndarray]
Constraint = Callable[[int, np.ndarray], np.ndarray]


def consensus_average(blocks: Sequence[np.ndarray], u: Sequence[np.ndarray],
                      anchor: np.ndarray | None = None) -> np.ndarray:
    """``mean(x_e + u_e)``; with ``anchor`` the two-term form ``(x + u + anchor) / 2``."""
    if anchor is not None:
        if len(blocks) != 1:
            raise ValueError("the anchored consensus takes exactly one block")
        return 0.5 * (blocks[0] + u[0] + anchor)
    return np.mean([b + w for b, w in zip(blocks, u)], axis=0)


def gadmm_step(state: AdmmState, block_update: BlockUpdate, constraint: Constraint | None = None,
               anchor: np.ndarray | None = None, executor: ThreadPoolExecutor | None = None) -> AdmmState:
    """One ADMM iteration, in place. ``executor`` runs block updates concurrently."""
    if executor is None:
        new_blocks = [block_update(e, state) for e in range(state.n_blocks)]
    else:
        new_blocks = list(executor.map(lambda e: block_update(e, state), range(state.n_blocks)))
    for e, b in enumerate(new_blocks):
        b = np.asarray(b, dtype=np.float64)
        if not np.all(np.isfinite(b)):
            raise AdmmError(e, "block update")
        state.blocks[e] = b
    # single synchronization point
    state.prev_consensus = state.consensus
    state.consensus = consensus_average(state.blocks, state.u, anchor)
    state.last_constraint = []
    for e in range(state.n_blocks):
        state.u[e] = state.u[e] + (state.blocks[e] - state.consensus)
        if constraint is not None:
            g = np.asarray(constraint(e, state.blocks[e]), dtype=np.float64).ravel()
            if not np.all(np.isfinite(g)):
                raise AdmmError(e, "constraint value")
            state.v[e] = state.v[e] + g
            state.last_constraint.append(float(np.linalg.norm(g)))
    state.iteration += 1
    return state


def residuals(state: AdmmState) -> Residuals:
    if state.prev_consensus is None:
        raise ValueError("residuals need at least one completed step")
    primal = max(float(np.linalg.norm(b - state.consensus)) for b in state.blocks)
    dual = state.rho0 * float(np.linalg.norm(state.consensus - state.prev_consensus))
    constraint = max(state.last_constraint) if state.last_constraint else 0.0
    return Residuals(primal, dual, constraint)


def rho_schedule(rho1_init: float, epoch: int, total_epochs: int, delta_rho: float = 100.0,
                 threshold: float = 0.5) -> float:
    """``rho1`` after an additive bump of ``delta_rho`` once ``epoch >= threshold * total_epochs``."""
    return rho1_init + (delta_rho if epoch >= threshold * total_epochs else 0.0)


def solve(state: AdmmState, block_update: BlockUpdate, constraint: Constraint | None = None,
          tol: float = 1e-4, max_iter: int = 1000) -> AdmmState:
    """Iterate until primal, dual and constraint residuals are all below ``tol``."""
    for _ in range(max_iter):
        gadmm_step(state, block_update, constraint)
        if residuals(state).below(tol):
            break
    return state


def quadratic_block_solver(targets: Sequence[np.ndarray], curvature: float = 2.0) -> BlockUpdate:
    """Exact minimizer of ``(c/2)||x - a_e||^2 + rho0/2 ||x - z + u_e||^2`` (no g term)."""
    targets = [np.asarray(a, dtype=np.float64) for a in targets]

    def update(e: int, st: AdmmState) -> np.ndarray:
        return (curvature * targets[e] + st.rho0 * (st.consensus - st.u[e])) / (curvature + st.rho0)

    return update
