"""Function-style entry points and the method registry."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from cirm.autodiff import Tensor
from cirm.envs import EnvironmentData
from cirm.methods.bilevel import BIRMTrainer, BVIRMTrainer, CBVIRMTrainer
from cirm.methods.common import TrainedPredictor, check_envs, risk
from cirm.methods.config import MethodConfig, default_config
from cirm.methods.deterministic import ERMTrainer, IRMGTrainer, IRMv1Trainer
from cirm.methods.eiil import EnvSplit, eiil_infer
from cirm.methods.variational import CVIRMGTrainer, CVIRMv1Trainer, VCLTrainer, draw_eps, sample_with, sigmas_of
from cirm.variational import VariationalModel

TRAINERS = {
    "erm": ERMTrainer,
    "irmv1": IRMv1Trainer,
    "irmg": IRMGTrainer,
    "birm": BIRMTrainer,
    "bvirm": BVIRMTrainer,
    "vcl": VCLTrainer,
    "c-virmv1": CVIRMv1Trainer,
    "c-virmg": CVIRMGTrainer,
    "c-bvirm": CBVIRMTrainer,
}
# trainers that can swap the MLP for the linear x @ phi @ w model
LINEAR_CAPABLE = ("erm", "irmv1", "birm", "bvirm", "c-bvirm")


def make_trainer(cfg: MethodConfig, in_dim: int, out_dim: int = 1, task: str = "classification",
                 model: str = "mlp", jobs: int = 1):
    cls = TRAINERS[cfg.method]
    if model != "mlp" and cfg.method not in LINEAR_CAPABLE:
        raise ValueError(f"{cfg.method} only supports the mlp model")
    kw = {}
    if cfg.method in LINEAR_CAPABLE:
        kw["model"] = model
    if cfg.method in ("birm", "bvirm", "c-bvirm"):
        kw["jobs"] = jobs
    return cls(cfg, in_dim, out_dim, task, **kw)


def _dims(envs: Sequence[EnvironmentData], task: str) -> tuple[int, int]:
    check_envs(envs)
    out_dim = 1 if task == "classification" else envs[0].labels.reshape(len(envs[0]), -1).shape[1]
    return envs[0].features.shape[1], out_dim


def _run(method: str, envs, cfg: MethodConfig | None, task: str, model: str = "mlp", **kw) -> TrainedPredictor:
    cfg = default_config(method) if cfg is None else cfg
    if cfg.method != method:
        cfg = cfg.replace(method=method)
    in_dim, out_dim = _dims(envs, task)
    return make_trainer(cfg, in_dim, out_dim, task, model, **kw).fit(envs)


def birm_admm_train(envs, cfg=None, task="classification", model="mlp", jobs=1) -> TrainedPredictor:
    """Offline bilevel IRM by consensus ADMM over all ``envs``."""
    return _run("birm", envs, cfg, task, model, jobs=jobs)


def bvirm_admm_train(envs, cfg=None, task="classification", model="mlp", jobs=1) -> TrainedPredictor:
    return _run("bvirm", envs, cfg, task, model, jobs=jobs)


def c_bvirm_admm_train(envs, cfg=None, task="classification", model="mlp") -> TrainedPredictor:
    """Continual bilevel variational IRM; ``envs`` are seen one at a time, in order."""
    return _run("c-bvirm", envs, cfg, task, model)


def vcl_train(envs, cfg=None, task="classification") -> TrainedPredictor:
    return _run("vcl", envs, cfg, task)


def c_virmv1_train(envs, cfg=None, task="classification") -> TrainedPredictor:
    return _run("c-virmv1", envs, cfg, task)


def c_virmg_train(envs, cfg=None, task="classification") -> TrainedPredictor:
    return _run("c-virmg", envs, cfg, task)


def irmg_round(trainer: IRMGTrainer, e: int, batch, rng=None, update_phi: bool = True) -> float:
    """One best-response step of ensemble member ``e`` on ``batch`` plus the outer phi step."""
    rng = np.random.default_rng(0) if rng is None else rng
    while len(trainer.heads) <= e:
        trainer._new_head()
    return trainer.round(e, batch, rng, update_phi)


def bvirm_objectives(model: VariationalModel, leaves: Mapping[str, Tensor],
                     forward: Callable[[Mapping[str, Tensor]], Tensor], y: np.ndarray,
                     prior: Mapping[str, tuple[np.ndarray, np.ndarray]], beta: float, n_mc: int,
                     rng: np.random.Generator, task: str = "classification",
                     eps: list[dict[str, np.ndarray]] | None = None) -> tuple[Tensor, Tensor]:
    """(Q_phi, Q_w) for one environment batch.

    Both share the Monte Carlo risk estimate (the same draws), so they differ by
    exactly ``beta * KL(q_phi || p_phi)``. ``forward`` maps sampled base parameters
    to predictions; ``y`` holds the batch targets.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    names = model.base_names
    if eps is None:
        eps = [draw_eps(model, names, rng) for _ in range(n_mc)]
    sig = sigmas_of(leaves, names)
    total = Tensor(0.0)
    for e in eps:
        total = total + risk(forward(sample_with(leaves, e, sig)), y, task)
    r = total * (1.0 / len(eps))
    kl_w = model.kl(leaves, prior, model.base_omega, sig)
    kl_phi = model.kl(leaves, prior, model.base_theta, sig)
    q_w = r + kl_w * beta
    return q_w + kl_phi * beta, q_w


def infer_environments(predictor: TrainedPredictor, x: np.ndarray, y: np.ndarray, n_iters: int = 10_000,
                       lr: float = 1e-2, seed: int = 0) -> EnvSplit:
    """EIIL split of pooled ``(x, y)`` using ``predictor`` as the fixed reference model."""
    return eiil_infer(predictor.logits(x), y, n_iters, lr, predictor.task, seed)
