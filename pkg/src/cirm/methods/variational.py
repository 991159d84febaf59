"""Mean-field variational trainers: VCL, C-VIRMv1 and C-VIRMG.

Each environment's objective anchors the posterior to the previous environment's
posterior through a KL term; the first environment uses a standard normal prior.
"""

from __future__ import annotations

import numpy as np

from cirm.autodiff import Tensor, grad, softplus
from cirm.methods.common import TrainedPredictor, env_arrays, irm_scale_penalty, penalty_weight, risk
from cirm.methods.deterministic import INIT, TRAIN, Trainer, stream
from cirm.nets import HEAD, features, forward, head, init_mlp
from cirm.params import ParamSet, make_optimizer
from cirm.variational import VariationalModel, reparam, softplus_np, standard_prior


def draw_eps(model: VariationalModel, names, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {k: rng.standard_normal(model.params[f"{k}.mu"].shape) for k in names}


def sigmas_of(leaves, names) -> dict[str, Tensor]:
    """``softplus(rho)`` nodes, computed once and shared by every draw of a step."""
    return {k: softplus(leaves[f"{k}.rho"]) for k in names}


def sample_with(leaves, eps: dict[str, np.ndarray], sigmas: dict[str, Tensor] | None = None) -> dict[str, Tensor]:
    if sigmas is None:
        return {k: reparam(leaves[f"{k}.mu"], leaves[f"{k}.rho"], e) for k, e in eps.items()}
    return {k: leaves[f"{k}.mu"] + sigmas[k] * e for k, e in eps.items()}


class VariationalOptimizer:
    """Optimizer wrapper applying weight decay to means only (never to ``rho``)."""

    def __init__(self, kind: str, lr: float, weight_decay: float):
        self.mu_opt = make_optimizer(kind, lr, weight_decay)
        self.rho_opt = make_optimizer(kind, lr, 0.0)

    def step(self, params: ParamSet, grads: dict[str, np.ndarray]) -> None:
        self.mu_opt.step(params, {k: g for k, g in grads.items() if k.endswith(".mu")})
        self.rho_opt.step(params, {k: g for k, g in grads.items() if k.endswith(".rho")})


class VariationalTrainer(Trainer):
    """Base class holding the posterior, the running prior and the KL scaling."""

    def __init__(self, cfg, in_dim, out_dim=1, task="classification"):
        super().__init__(cfg, in_dim, out_dim, task)
        det = init_mlp(in_dim, cfg.hidden, out_dim, stream(cfg.seed, INIT))
        self.model = VariationalModel.from_deterministic(det, cfg.sigma0)
        self.prior = standard_prior(self.model, 1.0)
        self.history: list[dict] = []

    def kl_weight(self, n: int) -> float:
        return self.cfg.beta / n if self.cfg.kl_per_sample else self.cfg.beta

    def new_optimizer(self) -> VariationalOptimizer:
        return VariationalOptimizer(self.cfg.optimizer, self.cfg.lr, self.cfg.weight_decay)

    def hand_off(self) -> None:
        """The posterior after this environment becomes the next environment's prior."""
        self.prior = self.model.prior()
        self.history.append({k: (m.copy(), s.copy()) for k, (m, s) in self.prior.items()})

    def predictor(self) -> TrainedPredictor:
        return TrainedPredictor(self.method, self.model.mean_params(), self.task,
                                variational=self.model.copy(), log=list(self.log))


class VCLTrainer(VariationalTrainer):
    """Per environment: ``E_q[R + lam_t P] + beta KL(q || q_prev)`` over the full network.

    ``lam = 0`` gives VCL; ``lam > 0`` the variational IRMv1 extension (C-VIRMv1),
    with the same annealing and rescaling as the deterministic IRMv1 trainer.
    """

    method = "vcl"

    def lam_at(self, epoch: int) -> float:
        return penalty_weight(self.cfg.lam, epoch, self.cfg.anneal_epoch)

    def objective(self, leaves, batch, epoch, rng, kl_w) -> tuple[Tensor, float, float]:
        """``batch`` holds one ``(x, y)`` pair per sub-environment; their terms are summed."""
        cfg = self.cfg
        lam = self.lam_at(epoch)
        data, r_sum, p_sum = Tensor(0.0), 0.0, 0.0
        sig = sigmas_of(leaves, self.model.base_names)
        for _ in range(cfg.n_mc):
            draw = sample_with(leaves, draw_eps(self.model, self.model.base_names, rng), sig)
            for x, y in batch:
                logits = forward(draw, x)
                if lam > 0:
                    r, pen = irm_scale_penalty(logits, y, self.task)
                    data = data + r + pen * lam
                    p_sum += pen.item()
                else:
                    r = risk(logits, y, self.task)
                    data = data + r
                r_sum += r.item()
        total = data * (1.0 / cfg.n_mc) + self.model.kl(leaves, self.prior, self.model.base_names, sig) * kl_w
        if lam > 1:
            total = total * (1.0 / lam)
        return total, r_sum / cfg.n_mc, p_sum / cfg.n_mc

    def _train(self, envs, sequential):
        if len(envs) != 1:
            # offline use treats the environments as a stream
            for e in envs:
                self._train([e], True)
                self.env_count += 1
            self.env_count -= len(envs)
            return
        self._train_joint(envs)

    def _train_joint(self, envs):
        arrays = [env_arrays(e) for e in envs]
        kl_w = self.kl_weight(sum(len(a[0]) for a in arrays))
        rng = stream(self.cfg.seed, TRAIN, self.env_count)
        opt = self.new_optimizer()
        names = self.model.params.names()
        for epoch, step, batch in self._epochs(arrays, rng):
            leaves = self.model.params.leaves()
            total, r, p = self.objective(leaves, batch, epoch, rng, kl_w)
            gs = grad(total, [leaves[k] for k in names])
            opt.step(self.model.params, {k: g.data for k, g in zip(names, gs)})
            self.log.append({"env": self.env_count, "epoch": epoch, "step": step, "risk": r,
                             "penalty": p, "loss": total.item()})
        self.hand_off()


class CVIRMv1Trainer(VCLTrainer):
    method = "c-virmv1"


class CVIRMGTrainer(VariationalTrainer):
    """Two-member variational ensemble ``w_bar = (w + w_prev) / 2``.

    ``w_prev`` is drawn from the frozen classifier posterior of the previous
    environment (identically zero on the first). Each step makes a best-response
    update of q_w, then an outer update of q_phi on the ensemble risk.
    """

    method = "c-virmg"

    def __init__(self, cfg, in_dim, out_dim=1, task="classification"):
        super().__init__(cfg, in_dim, out_dim, task)
        self.prev_head: dict[str, tuple[np.ndarray, np.ndarray]] | None = None
        self.theta_names = tuple(f"{k}.{s}" for k in self.model.base_theta for s in ("mu", "rho"))
        self.omega_names = tuple(f"{k}.{s}" for k in HEAD for s in ("mu", "rho"))
        self.partner: dict[str, tuple[np.ndarray, np.ndarray]] | None = None

    def _prev_draw(self, rng) -> dict[str, Tensor] | None:
        if self.prev_head is None:
            return None
        return {k: Tensor(m + s * rng.standard_normal(m.shape)) for k, (m, s) in self.prev_head.items()}

    def _ensemble(self, draw, prev, x) -> Tensor:
        h = features(draw, x)
        out = head(draw, h)
        if prev is not None:
            out = out + head(prev, h)
        return out * 0.5

    def _risk(self, leaves, eps_list, prev_list, x, y, sig) -> Tensor:
        total = Tensor(0.0)
        for eps, prev in zip(eps_list, prev_list):
            total = total + risk(self._ensemble(sample_with(leaves, eps, sig), prev, x), y, self.task)
        return total * (1.0 / len(eps_list))

    def _train_joint(self, envs) -> None:
        raise NotImplementedError(f"{self.method} has no joint multi-environment step")

    def _train(self, envs, sequential):
        if len(envs) != 1:
            for e in envs:
                self._train([e], True)
                self.env_count += 1
            self.env_count -= len(envs)
            return
        cfg = self.cfg
        arrays = [env_arrays(envs[0])]
        kl_w = self.kl_weight(len(arrays[0][0]))
        rng = stream(cfg.seed, TRAIN, self.env_count)
        opt_w, opt_phi = self.new_optimizer(), self.new_optimizer()
        for epoch, step, batch in self._epochs(arrays, rng):
            x, y = batch[0]
            eps_list = [draw_eps(self.model, self.model.base_names, rng) for _ in range(cfg.n_mc)]
            prev_list = [self._prev_draw(rng) for _ in range(cfg.n_mc)]
            # best response of the classifier
            leaves = self.model.params.leaves(self.omega_names)
            sig = sigmas_of(leaves, self.model.base_names)
            q_w = self._risk(leaves, eps_list, prev_list, x, y, sig) + self.model.kl(leaves, self.prior, HEAD, sig) * kl_w
            gs = grad(q_w, [leaves[k] for k in self.omega_names])
            opt_w.step(self.model.params, {k: g.data for k, g in zip(self.omega_names, gs)})
            # outer update of the feature extractor
            leaves = self.model.params.leaves(self.theta_names)
            sig = sigmas_of(leaves, self.model.base_names)
            r = self._risk(leaves, eps_list, prev_list, x, y, sig)
            q_phi = r + self.model.kl(leaves, self.prior, self.model.base_theta, sig) * kl_w
            gs = grad(q_phi, [leaves[k] for k in self.theta_names])
            opt_phi.step(self.model.params, {k: g.data for k, g in zip(self.theta_names, gs)})
            self.log.append({"env": self.env_count, "epoch": epoch, "step": step, "risk": r.item(),
                             "loss": q_phi.item()})
        # the partner this head was trained with stays its ensemble mate for prediction
        self.partner = self.prev_head
        self.hand_off()
        self.prev_head = {k: self.prior[k] for k in HEAD}

    def predictor(self) -> TrainedPredictor:
        params = self.model.mean_params()
        partner = self.partner
        w = params["head.W"] * 0.5
        b = params["head.b"] * 0.5
        if partner is not None:
            w = w + 0.5 * partner["head.W"][0]
            b = b + 0.5 * partner["head.b"][0]
        params["head.W"], params["head.b"] = w, b
        return TrainedPredictor(self.method, params, self.task, variational=None, log=list(self.log))
