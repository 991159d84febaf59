"""Bilevel IRM solved by consensus ADMM: BIRM, BVIRM and the continual C-BVIRM.

The classifier of every environment gets its own copy ``omega_e`` driven to a
shared consensus ``omega``; the stationarity constraint ``grad_omega Q_w^e = 0`` is
enforced through constraint duals ``v_e``. The feature extractor is updated by an
outer gradient step on the environment objectives at the consensus classifier.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from cirm.admm import AdmmState, gadmm_step, rho_schedule
from cirm.autodiff import Tensor, grad, no_grad, sq_norm
from cirm.methods.common import TrainedPredictor, env_arrays, risk
from cirm.methods.deterministic import INIT, MC, TRAIN, Trainer, stream
from cirm.methods.variational import VariationalOptimizer, draw_eps, sample_with, sigmas_of
from cirm.nets import Arch
from cirm.params import ParamSet, make_optimizer
from cirm.variational import VariationalModel, standard_prior


class BilevelADMMTrainer(Trainer):
    """Shared machinery; ``variational`` and ``continual`` select the flavour.

    ``model="mlp"`` uses the ELU network with its final layer as classifier;
    ``model="linear"`` uses ``x @ phi @ w`` for regression problems.
    """

    method = "birm"
    variational = False
    continual = False

    def __init__(self, cfg, in_dim, out_dim=1, task="classification", model="mlp",
                 feat_dim: int | None = None, jobs: int = 1):
        super().__init__(cfg, in_dim, out_dim, task)
        self.arch = Arch(model, cfg.hidden, feat_dim)
        det = self.arch.init(in_dim, out_dim, stream(cfg.seed, INIT))
        self.feat_fn, self.head_fn, omega_base = self.arch.features, self.arch.head, self.arch.omega
        self.model_kind = model
        self.omega_base = omega_base
        self.theta_base = tuple(k for k in det.names() if k not in omega_base)
        if self.variational:
            self.vm = VariationalModel.from_deterministic(det, cfg.sigma0)
            self.params = self.vm.params
            self.prior = standard_prior(self.vm, 1.0)
            suffix = ("mu", "rho")
            self.omega_names = tuple(f"{k}.{s}" for k in omega_base for s in suffix)
            self.theta_names = tuple(f"{k}.{s}" for k in self.theta_base for s in suffix)
        else:
            self.vm = None
            self.params = det
            self.prior = None
            self.omega_names, self.theta_names = tuple(omega_base), self.theta_base
        self.anchor: np.ndarray | None = None
        self.jobs = jobs
        self.state: AdmmState | None = None
        self.history: list[dict] = []

    # -- sampling -------------------------------------------------------------

    def _n_samples(self) -> int:
        return self.cfg.n_mc if self.variational else 1

    def _draw(self, leaves, base, eps, sig=None):
        if not self.variational:
            return {k: leaves[k] for k in base}
        return sample_with(leaves, {k: eps[k] for k in base}, sig)

    def _sigmas(self, leaves, base):
        return sigmas_of(leaves, base) if self.variational else None

    def _kl(self, leaves, base, sig=None) -> Tensor:
        return self.vm.kl(leaves, self.prior, base, sig)

    # -- objectives -----------------------------------------------------------

    def _omega_split(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        out, pos = {}, 0
        for k in self.omega_names:
            shape = self.params[k].shape
            n = int(np.prod(shape))
            out[k] = vec[pos:pos + n].reshape(shape)
            pos += n
        return out

    def head_objective(self, omega_leaves, ctx) -> Tensor:
        """Q_w^e as a function of the classifier only (features fixed in ``ctx``)."""
        total = Tensor(0.0)
        sig = self._sigmas(omega_leaves, self.omega_base)
        for h, eps in zip(ctx["feats"], ctx["eps"]):
            total = total + risk(self.head_fn(self._draw(omega_leaves, self.omega_base, eps, sig), h),
                                 ctx["y"], self.task)
        total = total * (1.0 / len(ctx["eps"]))
        if self.variational:
            total = total + self._kl(omega_leaves, self.omega_base, sig) * ctx["kl_w"]
        return total

    def _feats(self, leaves, ctx, sig=None) -> list[Tensor]:
        return [self.feat_fn(self._draw(leaves, self.theta_base, eps, sig), ctx["x"]) for eps in ctx["eps"]]

    def _constraint_leaves(self, vec):
        return {k: Tensor(a, requires_grad=True) for k, a in self._omega_split(vec).items()}

    def block_update(self, e: int, st: AdmmState) -> np.ndarray:
        """One optimizer step on the augmented Lagrangian of block ``e``."""
        ctx = self._ctx[e]
        ps = ParamSet(self._omega_split(st.blocks[e].copy()))
        target = self._omega_split(st.consensus - st.u[e])
        v = self._omega_split(st.v[e])
        for _ in range(self.cfg.block_steps):
            self._lagrangian_step(e, ps, ctx, target, v, st.rho0, st.rho1)
        return ps.flat(self.omega_names)

    def _lagrangian_step(self, e, ps, ctx, target, v, rho0, rho1) -> None:
        leaves = ps.leaves()
        lv = [leaves[k] for k in self.omega_names]
        q = self.head_objective(leaves, ctx)
        total = q
        if rho0 > 0:
            dev = Tensor(0.0)
            for k in self.omega_names:
                dev = dev + sq_norm(leaves[k] - target[k])
            total = total + dev * (0.5 * rho0)
        if rho1 > 0:
            gs = grad(q, lv, create_graph=True)
            pen = Tensor(0.0)
            for k, g in zip(self.omega_names, gs):
                pen = pen + sq_norm(g + v[k])
            total = total + pen * (0.5 * rho1)
        gs = grad(total, lv)
        self._block_opts[e].step(ps, {k: g.data for k, g in zip(self.omega_names, gs)})

    def constraint(self, e: int, vec: np.ndarray) -> np.ndarray:
        leaves = self._constraint_leaves(vec)
        q = self.head_objective(leaves, self._ctx[e])
        gs = grad(q, [leaves[k] for k in self.omega_names])
        return np.concatenate([g.data.ravel() for g in gs])

    def theta_step(self, ctxs, rho1: float) -> float:
        """Outer step on sum_e Q_phi^e at the consensus classifier."""
        leaves = self.params.leaves(self.theta_names)
        sig_t = self._sigmas(leaves, self.theta_base)
        sig_w = self._sigmas(leaves, self.omega_base)
        total, r_sum = Tensor(0.0), 0.0
        for e, ctx in enumerate(ctxs):
            feats = self._feats(leaves, ctx, sig_t)
            r = Tensor(0.0)
            for h, eps in zip(feats, ctx["eps"]):
                r = r + risk(self.head_fn(self._draw(leaves, self.omega_base, eps, sig_w), h), ctx["y"], self.task)
            r = r * (1.0 / len(feats))
            total = total + r
            r_sum += r.item()
            if self.cfg.theta_constraint and rho1 > 0 and self.state is not None:
                bl = self._constraint_leaves(self.state.blocks[e])
                c_ctx = dict(ctx, feats=feats)
                q = self.head_objective(bl, c_ctx)
                gs = grad(q, [bl[k] for k in self.omega_names], create_graph=True)
                v = self._omega_split(self.state.v[e])
                pen = Tensor(0.0)
                for k, g in zip(self.omega_names, gs):
                    pen = pen + sq_norm(g + v[k])
                total = total + pen * (0.5 * rho1)
        if self.variational:
            total = total + self._kl(leaves, self.theta_base, sig_t) * ctxs[0]["kl_w"]
        gs = grad(total, [leaves[k] for k in self.theta_names])
        self.opt_theta.step(self.params, {k: g.data for k, g in zip(self.theta_names, gs)})
        return r_sum

    # -- training loop --------------------------------------------------------

    def _make_ctx(self, x, y, rng, kl_w):
        base = self.theta_base + self.omega_base
        if self.variational:
            eps = [draw_eps(self.vm, base, rng) for _ in range(self.cfg.n_mc)]
        else:
            eps = [{}]
        return {"x": x, "y": y, "eps": eps, "kl_w": kl_w}

    def _refresh_feats(self, ctxs):
        with no_grad():
            leaves = self.params.leaves(())
            sig = self._sigmas(leaves, self.theta_base)
            for ctx in ctxs:
                ctx["feats"] = [Tensor(h.data) for h in self._feats(leaves, ctx, sig)]

    def _new_state(self, n_blocks: int) -> AdmmState:
        x0 = self.params.flat(self.omega_names)
        st = AdmmState.init(x0, n_blocks, rho0=self.cfg.rho0, rho1=self.cfg.rho1)
        lr = self.cfg.lr if self.cfg.block_lr is None else self.cfg.block_lr
        self._block_opts = [self._optimizer(lr) for _ in range(n_blocks)]
        return st

    def _optimizer(self, lr: float):
        if self.variational:
            return VariationalOptimizer(self.cfg.optimizer, lr, self.cfg.weight_decay)
        return make_optimizer(self.cfg.optimizer, lr, self.cfg.weight_decay)

    def _kl_weight(self, n: int) -> float:
        return self.cfg.beta / n if self.cfg.kl_per_sample else self.cfg.beta

    def _train_joint(self, envs) -> None:
        if self.continual:
            raise NotImplementedError(f"{self.method} has no joint multi-environment step")
        self._train(envs, sequential=False)

    def _train(self, envs, sequential):
        if self.continual and len(envs) != 1:
            for e in envs:
                self._train([e], True)
                self.env_count += 1
            self.env_count -= len(envs)
            return
        cfg = self.cfg
        arrays = [env_arrays(e) for e in envs]
        kl_w = self._kl_weight(min(len(a[0]) for a in arrays))
        rng = stream(cfg.seed, TRAIN, self.env_count)
        mc_rngs = [stream(cfg.seed, MC, self.env_count, e) for e in range(len(envs))]
        self.state = self._new_state(len(envs))
        self.opt_theta = self._optimizer(cfg.lr)
        anchor = None
        if self.continual:
            anchor = self.anchor
            if anchor is None and not cfg.skip_first_anchor:
                anchor = np.zeros_like(self.state.consensus)
        executor = ThreadPoolExecutor(self.jobs) if self.jobs > 1 and len(envs) > 1 else None
        try:
            for epoch, step, batch in self._epochs(arrays, rng):
                self.state.rho1 = rho_schedule(cfg.rho1, epoch, cfg.epochs, cfg.delta_rho)
                ctxs = [self._make_ctx(x, y, r, kl_w) for (x, y), r in zip(batch, mc_rngs)]
                r = self.theta_step(ctxs, self.state.rho1)
                self._refresh_feats(ctxs)
                self._ctx = ctxs
                for _ in range(cfg.K):
                    gadmm_step(self.state, self.block_update, self.constraint, anchor, executor)
                self.params.set_flat(self.state.consensus, self.omega_names)
                self.log.append({"env": self.env_count, "epoch": epoch, "step": step, "risk": r,
                                 "constraint": max(self.state.last_constraint),
                                 "primal": max(float(np.linalg.norm(b - self.state.consensus))
                                               for b in self.state.blocks)})
        finally:
            if executor is not None:
                executor.shutdown()
        self._ctx = []
        if self.continual:
            self.anchor = self.state.blocks[0].copy()
        if self.variational:
            self.prior = self.vm.prior()
            self.history.append({k: (m.copy(), s.copy()) for k, (m, s) in self.prior.items()})

    def predictor(self) -> TrainedPredictor:
        if self.variational:
            return TrainedPredictor(self.method, self.vm.mean_params(), self.task, arch=self.arch,
                                    variational=self.vm.copy(), log=list(self.log))
        return TrainedPredictor(self.method, self.params.copy(), self.task, arch=self.arch, log=list(self.log))

    def linear_coefficients(self) -> np.ndarray:
        """End-to-end regression matrix ``phi @ w`` of the linear model."""
        return self.predictor().linear_coefficients()


class BIRMTrainer(BilevelADMMTrainer):
    method = "birm"


class BVIRMTrainer(BilevelADMMTrainer):
    method = "bvirm"
    variational = True


class CBVIRMTrainer(BilevelADMMTrainer):
    method = "c-bvirm"
    variational = True
    continual = True
