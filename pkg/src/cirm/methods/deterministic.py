"""Deterministic-weight trainers: ERM, IRMv1 and IRMG.

Every trainer works both offline (``fit`` on all environments) and sequentially
(``observe`` one environment at a time, keeping the same parameters).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from cirm.autodiff import Tensor, grad, no_grad
from cirm.envs import EnvironmentData
from cirm.methods.common import (TrainedPredictor, as_targets, check_envs, env_arrays,
                                 irm_scale_penalty, minibatches, penalty_weight, risk)
from cirm.methods.config import MethodConfig
from cirm.nets import HEAD, Arch, accuracy, features, forward, head, init_mlp
from cirm.params import ParamSet, make_optimizer


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a (seed, purpose, index) key."""
    return np.random.default_rng([seed, *key])


INIT, TRAIN, MC, EVAL = 0, 1, 2, 3


class Trainer:
    """Common state for trainers; subclasses implement ``_train``."""

    method = "base"

    def __init__(self, cfg: MethodConfig, in_dim: int, out_dim: int = 1, task: str = "classification"):
        self.cfg = cfg
        self.task = task
        self.in_dim, self.out_dim = in_dim, out_dim
        self.env_count = 0
        self.log: list[dict] = []

    def observe(self, env: EnvironmentData) -> None:
        self._train([env], sequential=True)
        self.env_count += 1

    def observe_joint(self, envs: Sequence[EnvironmentData]) -> None:
        """One time step made of several sub-environments seen together (e.g. an inferred split)."""
        check_envs(envs)
        if len(envs) == 1:
            return self.observe(envs[0])
        self._train_joint(list(envs))
        self.env_count += 1

    def _train_joint(self, envs) -> None:
        self._train(envs, sequential=False)

    def fit(self, envs: Sequence[EnvironmentData]) -> TrainedPredictor:
        check_envs(envs)
        self._train(list(envs), sequential=False)
        self.env_count += len(envs)
        return self.predictor()

    def _train(self, envs, sequential: bool) -> None:
        raise NotImplementedError

    def predictor(self) -> TrainedPredictor:
        raise NotImplementedError

    def _epochs(self, arrays, rng):
        """Yield (epoch, step, [(x_b, y_b) per env]) with env batches advanced in lockstep."""
        cfg = self.cfg
        step = 0
        for epoch in range(cfg.epochs):
            per_env = [minibatches(len(x), cfg.batch_size, rng) for x, _ in arrays]
            n_steps = max(len(b) for b in per_env)
            for s in range(n_steps):
                batch = []
                for (x, y), bs in zip(arrays, per_env):
                    idx = bs[s % len(bs)]
                    batch.append((x[idx], as_targets(y[idx], self.task)))
                yield epoch, step, batch
                step += 1


class PenalizedTrainer(Trainer):
    """ERM and IRMv1: ``sum_e R^e + lam_t * P^e``, divided by ``lam_t`` once it exceeds 1.

    ERM pools all offline environments into one; with ``lam = 0`` the IRMv1 objective
    is the ERM objective and both consume random numbers identically.
    """

    method = "irmv1"
    pool_offline = False

    def __init__(self, cfg, in_dim, out_dim=1, task="classification", model="mlp", feat_dim=None):
        super().__init__(cfg, in_dim, out_dim, task)
        self.arch = Arch(model, cfg.hidden, feat_dim)
        self.params = self.arch.init(in_dim, out_dim, stream(cfg.seed, INIT))
        self.opt = make_optimizer(cfg.optimizer, cfg.lr, cfg.weight_decay)

    def lam_at(self, epoch: int) -> float:
        return penalty_weight(self.cfg.lam, epoch, self.cfg.anneal_epoch)

    def objective(self, leaves, batch, epoch, rng) -> tuple[Tensor, float, float]:
        lam = self.lam_at(epoch)
        total, r_sum, p_sum = Tensor(0.0), 0.0, 0.0
        for x, y in batch:
            logits = self.arch.forward(leaves, x, self.cfg.dropout, rng, train=True)
            if lam > 0:
                r, pen = irm_scale_penalty(logits, y, self.task)
                total = total + r + pen * lam
                p_sum += pen.item()
            else:
                r = risk(logits, y, self.task)
                total = total + r
            r_sum += r.item()
        if lam > 1:
            total = total * (1.0 / lam)
        return total, r_sum, p_sum

    def _train(self, envs, sequential):
        arrays = [env_arrays(e) for e in envs]
        if self.pool_offline and len(arrays) > 1:
            arrays = [(np.concatenate([a[0] for a in arrays]), np.concatenate([a[1] for a in arrays]))]
        rng = stream(self.cfg.seed, TRAIN, self.env_count)
        names = self.params.names()
        for epoch, step, batch in self._epochs(arrays, rng):
            leaves = self.params.leaves()
            total, r, p = self.objective(leaves, batch, epoch, rng)
            gs = grad(total, [leaves[k] for k in names])
            self.opt.step(self.params, {k: g.data for k, g in zip(names, gs)})
            self.log.append({"env": self.env_count, "epoch": epoch, "step": step, "risk": r,
                             "penalty": p, "loss": total.item()})

    def predictor(self) -> TrainedPredictor:
        return TrainedPredictor(self.method, self.params.copy(), self.task, log=list(self.log), arch=self.arch)


class ERMTrainer(PenalizedTrainer):
    method = "erm"
    pool_offline = True

    def lam_at(self, epoch: int) -> float:
        return 0.0


class IRMv1Trainer(PenalizedTrainer):
    method = "irmv1"


def irmv1_loss(params: ParamSet | dict, batches, lam: float, task: str = "classification",
               p_drop: float = 0.0, rng=None) -> Tensor:
    """``sum_e R^e(phi) + lam * ||d/dw R^e(w phi)|_{w=1}||^2`` as a differentiable scalar.

    ``params`` is a ParamSet or a mapping of leaf tensors; ``batches`` holds one
    (x, y) pair per environment.
    """
    if len(batches) < 1:
        raise ValueError("irmv1_loss needs at least one environment")
    leaves = params.leaves() if isinstance(params, ParamSet) else params
    total = Tensor(0.0)
    for x, y in batches:
        logits = forward(leaves, x, p_drop, rng, train=p_drop > 0)
        r, pen = irm_scale_penalty(logits, as_targets(y, task), task)
        total = total + r + pen * lam
    return total


class IRMGTrainer(Trainer):
    """Ensemble game: one classifier per environment, prediction by their average.

    Sequentially, a new environment adds a new ensemble member; earlier members stay
    frozen because their environments are gone.
    """

    method = "irmg"

    def __init__(self, cfg, in_dim, out_dim=1, task="classification"):
        super().__init__(cfg, in_dim, out_dim, task)
        base = init_mlp(in_dim, cfg.hidden, out_dim, stream(cfg.seed, INIT))
        self.phi = ParamSet({k: v for k, v in base.arrays.items() if k not in HEAD})
        self.heads: list[ParamSet] = []
        self._first_head = {k: base[k].copy() for k in HEAD}
        self.opt_phi = make_optimizer(cfg.optimizer, cfg.lr, cfg.weight_decay)
        self.opt_heads: list = []
        self.steps = 0
        self.terminated = False

    def _new_head(self) -> int:
        if not self.heads:
            arrays = self._first_head
        else:
            rng = stream(self.cfg.seed, INIT, len(self.heads))
            h = self._first_head["head.W"].shape[0]
            bound = 1.0 / np.sqrt(h)
            arrays = {"head.W": rng.uniform(-bound, bound, (h, self.out_dim)),
                      "head.b": rng.uniform(-bound, bound, (self.out_dim,))}
        self.heads.append(ParamSet(arrays))
        self.opt_heads.append(make_optimizer(self.cfg.optimizer, self.cfg.lr, self.cfg.weight_decay))
        return len(self.heads) - 1

    def ensemble_logits(self, phi_leaves, head_leaves: list, x, rng, train=True) -> Tensor:
        h = features(phi_leaves, x, self.cfg.dropout, rng, train)
        out = Tensor(0.0)
        for hl in head_leaves:
            out = out + head(hl, h)
        return out * (1.0 / len(head_leaves))

    def round(self, e: int, batch, rng, update_phi: bool = True, batches_phi=None) -> float:
        """Best-response step for member ``e`` on ``batch``, then an outer step on phi."""
        x, y = batch
        phi_l = self.phi.leaves(())
        head_l = [hp.leaves(HEAD if i == e else ()) for i, hp in enumerate(self.heads)]
        r = risk(self.ensemble_logits(phi_l, head_l, x, rng), y, self.task)
        gs = grad(r, [head_l[e][k] for k in HEAD])
        self.opt_heads[e].step(self.heads[e], {k: g.data for k, g in zip(HEAD, gs)})
        if update_phi:
            phi_l = self.phi.leaves()
            head_l = [hp.leaves(()) for hp in self.heads]
            total = Tensor(0.0)
            for xb, yb in (batches_phi or [batch]):
                total = total + risk(self.ensemble_logits(phi_l, head_l, xb, rng), yb, self.task)
            names = self.phi.names()
            gs = grad(total, [phi_l[k] for k in names])
            self.opt_phi.step(self.phi, {k: g.data for k, g in zip(names, gs)})
        return r.item()

    def _warm_step(self, members: list[int], batches, rng) -> float:
        """Joint ERM step of phi and the given members on the ensemble risk."""
        phi_l = self.phi.leaves()
        head_l = [hp.leaves(HEAD if i in members else ()) for i, hp in enumerate(self.heads)]
        total = Tensor(0.0)
        for xb, yb in batches:
            total = total + risk(self.ensemble_logits(phi_l, head_l, xb, rng), yb, self.task)
        names = self.phi.names()
        gs = grad(total, [phi_l[k] for k in names] + [head_l[i][k] for i in members for k in HEAD])
        self.opt_phi.step(self.phi, {k: g.data for k, g in zip(names, gs[:len(names)])})
        rest = gs[len(names):]
        for j, i in enumerate(members):
            self.opt_heads[i].step(self.heads[i], {k: rest[2 * j + t].data for t, k in enumerate(HEAD)})
        return total.item()

    def _batch_accuracy(self, batches) -> float:
        with no_grad():
            phi_l = self.phi.leaves(())
            head_l = [hp.leaves(()) for hp in self.heads]
            accs = [accuracy(self.ensemble_logits(phi_l, head_l, x, None, train=False).data, y)
                    for x, y in batches]
        return float(np.mean(accs))

    def _train(self, envs, sequential):
        arrays = [env_arrays(e) for e in envs]
        members = [self._new_head() for _ in envs]
        rng = stream(self.cfg.seed, TRAIN, self.env_count)
        for epoch, step, batch in self._epochs(arrays, rng):
            if self.terminated:
                break
            if self.steps < self.cfg.warm_start:
                r = self._warm_step(members, batch, rng)
            else:
                r = 0.0
                for j, e in enumerate(members):
                    r += self.round(e, batch[j], rng, update_phi=(j == len(members) - 1), batches_phi=batch)
                if self._batch_accuracy(batch) < self.cfg.termination_acc:
                    self.terminated = True
            self.steps += 1
            self.log.append({"env": self.env_count, "epoch": epoch, "step": step, "risk": r})

    def predictor(self) -> TrainedPredictor:
        if not self.heads:
            raise RuntimeError("IRMG predictor requested before training")
        arrays = dict(self.phi.arrays)
        arrays.update(self.heads[0].arrays)
        params = ParamSet({k: v.copy() for k, v in arrays.items()}, HEAD)
        extra = [{k: v.copy() for k, v in hp.arrays.items()} for hp in self.heads[1:]]
        return TrainedPredictor(self.method, params, self.task, extra_heads=extra, log=list(self.log))


def erm_train(envs: Sequence[EnvironmentData], cfg: MethodConfig, task: str = "classification") -> TrainedPredictor:
    check_envs(envs)
    out_dim = 1 if task == "classification" else envs[0].labels.reshape(len(envs[0]), -1).shape[1]
    return ERMTrainer(cfg, envs[0].features.shape[1], out_dim, task).fit(envs)
