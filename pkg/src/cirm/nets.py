"""Fully connected networks expressed over named parameter tensors.

A network is a ``ParamSet`` plus a pure forward function taking a mapping of
``Tensor`` objects, so the same forward serves deterministic weights, sampled
variational weights and per-environment classifier copies.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from cirm.autodiff import Tensor, dropout, elu, matmul
from cirm.params import ParamSet

HEAD = ("head.W", "head.b")


def init_mlp(in_dim: int, hidden: Sequence[int], out_dim: int, rng: np.random.Generator) -> ParamSet:
    """Uniform(+-1/sqrt(fan_in)) init; the final linear layer is the classifier (omega)."""
    arrays = {}
    sizes = [in_dim, *hidden]
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(a)
        arrays[f"l{i}.W"] = rng.uniform(-bound, bound, (a, b))
        arrays[f"l{i}.b"] = rng.uniform(-bound, bound, (b,))
    bound = 1.0 / np.sqrt(sizes[-1])
    arrays["head.W"] = rng.uniform(-bound, bound, (sizes[-1], out_dim))
    arrays["head.b"] = rng.uniform(-bound, bound, (out_dim,))
    return ParamSet(arrays, omega=HEAD)


def n_hidden(params: Mapping[str, object]) -> int:
    n = 0
    while f"l{n}.W" in params:
        n += 1
    return n


def features(p: Mapping[str, Tensor], x, p_drop: float = 0.0, rng=None, train: bool = False) -> Tensor:
    """The feature extractor phi: ELU hidden layers with optional dropout."""
    h = x if isinstance(x, Tensor) else Tensor(x)
    for i in range(n_hidden(p)):
        h = elu(matmul(h, p[f"l{i}.W"]) + p[f"l{i}.b"])
        h = dropout(h, p_drop, rng, train)
    return h


def head(p: Mapping[str, Tensor], h: Tensor, prefix: str = "head") -> Tensor:
    return matmul(h, p[f"{prefix}.W"]) + p[f"{prefix}.b"]


def forward(p: Mapping[str, Tensor], x, p_drop: float = 0.0, rng=None, train: bool = False) -> Tensor:
    return head(p, features(p, x, p_drop, rng, train))


def predict_logits(params: ParamSet, x: np.ndarray) -> np.ndarray:
    from cirm.autodiff import no_grad

    with no_grad():
        return forward({k: Tensor(v) for k, v in params.arrays.items()}, x).data


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels).reshape(-1)
    if logits.shape[1] == 1:
        pred = (logits[:, 0] > 0).astype(np.int64)
    else:
        pred = logits.argmax(axis=1)
    return float(np.mean(pred == labels))


def init_linear(in_dim: int, feat_dim: int, out_dim: int, rng: np.random.Generator,
                scale: float = 0.1) -> ParamSet:
    """Linear phi (``in_dim -> feat_dim``) followed by a linear classifier, no biases."""
    arrays = {
        "phi": np.eye(in_dim, feat_dim) + scale * rng.standard_normal((in_dim, feat_dim)),
        "w": np.eye(feat_dim, out_dim) + scale * rng.standard_normal((feat_dim, out_dim)),
    }
    return ParamSet(arrays, omega=("w",))


def linear_forward(p: Mapping[str, Tensor], x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return matmul(matmul(x, p["phi"]), p["w"])


class Arch:
    """Feature map, classifier and initializer for one model family."""

    def __init__(self, kind: str = "mlp", hidden: Sequence[int] = (100, 100), feat_dim: int | None = None):
        if kind not in ("mlp", "linear"):
            raise ValueError(f"unknown model {kind!r}")
        self.kind = kind
        self.hidden = tuple(hidden)
        self.feat_dim = feat_dim
        self.omega = HEAD if kind == "mlp" else ("w",)

    def init(self, in_dim: int, out_dim: int, rng: np.random.Generator) -> ParamSet:
        if self.kind == "mlp":
            return init_mlp(in_dim, self.hidden, out_dim, rng)
        return init_linear(in_dim, self.feat_dim or out_dim, out_dim, rng)

    def features(self, p, x, p_drop: float = 0.0, rng=None, train: bool = False) -> Tensor:
        if self.kind == "mlp":
            return features(p, x, p_drop, rng, train)
        return matmul(x if isinstance(x, Tensor) else Tensor(x), p["phi"])

    def head(self, p, h) -> Tensor:
        return head(p, h) if self.kind == "mlp" else matmul(h, p["w"])

    def forward(self, p, x, p_drop: float = 0.0, rng=None, train: bool = False) -> Tensor:
        return self.head(p, self.features(p, x, p_drop, rng, train))
