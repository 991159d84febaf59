"""Hyperparameters for every training method, with per-method defaults."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

METHOD_IDS = ("erm", "irmv1", "irmg", "birm", "bvirm", "vcl", "c-virmv1", "c-virmg", "c-bvirm")


@dataclass
class MethodConfig:
    method: str = "erm"
    lam: float = 91257.0
    beta: float = 1.0
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 256
    K: int = 1
    n_mc: int = 5
    rho0: float = 10.0
    rho1: float = 10.0
    delta_rho: float = 100.0
    penalty_anneal_epoch: int | None = None  # None -> epochs // 2
    dropout: float = 0.0
    weight_decay: float = 0.0
    seed: int = 0
    # choices left open by the method descriptions
    optimizer: str = "adam"
    hidden: tuple[int, ...] = (100, 100)
    sigma0: float = 1e-2
    kl_per_sample: bool = True
    warm_start: int = 300
    termination_acc: float = 0.6
    skip_first_anchor: bool = False
    theta_constraint: bool = True
    block_steps: int = 1
    block_lr: float | None = None  # None -> lr
    eval_mc: int = 0
    eiil_iters: int = 10_000
    eiil_lr: float = 1e-2

    def __post_init__(self):
        if isinstance(self.hidden, list):
            self.hidden = tuple(self.hidden)
        self.validate()

    def validate(self) -> None:
        if self.method not in METHOD_IDS:
            raise ValueError(f"unknown method {self.method!r}")
        for f in dataclasses.fields(self):
            msg = field_error(f.name, getattr(self, f.name))
            if msg:
                raise ValueError(f"{f.name} {msg}")

    @property
    def anneal_epoch(self) -> int:
        return self.epochs // 2 if self.penalty_anneal_epoch is None else self.penalty_anneal_epoch

    def replace(self, **kw) -> MethodConfig:
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d


NON_NEGATIVE = ("lam", "beta", "rho0", "rho1", "delta_rho", "weight_decay", "warm_start", "eval_mc")
POSITIVE = ("lr", "sigma0", "eiil_lr")
AT_LEAST_ONE = ("epochs", "batch_size", "K", "n_mc", "block_steps", "eiil_iters")


def field_error(name: str, value) -> str | None:
    """Why ``value`` is out of range for field ``name``, or None when it is fine."""
    if value is None:
        return None
    if name in NON_NEGATIVE and value < 0:
        return "must be >= 0"
    if name in POSITIVE and value <= 0:
        return "must be > 0"
    if name in AT_LEAST_ONE and value < 1:
        return "must be >= 1"
    if name == "dropout" and not 0.0 <= value < 1.0:
        return "must lie in [0, 1)"
    if name == "termination_acc" and not 0.0 <= value <= 1.0:
        return "must lie in [0, 1]"
    if name == "block_lr" and value <= 0:
        return "must be > 0"
    if name == "penalty_anneal_epoch" and value < 0:
        return "must be >= 0"
    if name == "hidden" and any(h < 1 for h in value):
        return "widths must be >= 1"
    if name == "optimizer" and value not in ("adam", "sgd"):
        return "must be adam or sgd"
    return None


# hyperparameters listed per method in the experimental setup
DEFAULTS: dict[str, dict] = {
    "erm": dict(lr=1e-3, dropout=0.75, weight_decay=0.00125),
    "irmv1": dict(lr=2.5e-4, lam=91257.0, dropout=0.75, weight_decay=0.00125),
    "irmg": dict(lr=2.5e-4, dropout=0.75, weight_decay=0.00125, warm_start=300, termination_acc=0.6),
    "birm": dict(lr=1e-3, dropout=0.0, weight_decay=0.0, theta_constraint=True),
    "bvirm": dict(lr=1e-3, weight_decay=0.00125, beta=1.0, n_mc=5, theta_constraint=False),
    "vcl": dict(lr=5e-3, weight_decay=0.0, lam=0.0),
    "c-virmv1": dict(lr=1e-3, weight_decay=0.00125, beta=1.0, n_mc=5, lam=91257.0),
    "c-virmg": dict(lr=1e-3, weight_decay=0.00125, beta=1.0, n_mc=5),
    "c-bvirm": dict(lr=1e-3, weight_decay=0.00125, beta=1.0, n_mc=5, theta_constraint=False),
}


def default_config(method: str, **overrides) -> MethodConfig:
    if method not in DEFAULTS:
        raise ValueError(f"unknown method {method!r}")
    kw = dict(DEFAULTS[method])
    kw.update(overrides)
    return MethodConfig(method=method, **kw)
