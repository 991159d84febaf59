"""Sequential-environment experiments: generate, stream, evaluate, aggregate."""

from __future__ import annotations

import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from cirm.envs import EnvironmentData, base_dataset, make_colored_env, pc_schedule, synth_sem
from cirm.methods import default_config, infer_environments, make_trainer
from cirm.methods.config import MethodConfig


class IsolationError(RuntimeError):
    """A method kept a reference to data from an environment whose phase ended."""


class MethodFailure(RuntimeError):
    def __init__(self, method: str, env_index: int, cause: BaseException):
        self.method, self.env_index = method, env_index
        super().__init__(f"{method} failed on environment {env_index}: {cause!r}")


@dataclass
class ExperimentPlan:
    dataset: str = "colored"  # "colored" or "sem"
    n_envs: int = 2
    scheme: str = "b01"
    p_c: list[float] | None = None
    samples_per_env: int = 1000
    test_samples: int = 2000
    test_p_c: float = 0.9
    label_flip: float = 0.25
    label_rule: str = "parity"
    methods: list[str] = field(default_factory=lambda: ["erm", "c-virmv1"])
    repetitions: int = 5
    seeds: list[int] | None = None
    data_dir: str | None = None
    sigma_e: list[float] | None = None  # sem only
    sem_dim: int = 4
    data_seed: int = 1234

    def __post_init__(self):
        if self.p_c is None and self.dataset == "colored":
            self.p_c = pc_schedule(self.n_envs)
        if self.seeds is None:
            self.seeds = list(range(self.repetitions))
        self.validate()

    def validate(self) -> None:
        if self.dataset not in ("colored", "sem"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.n_envs < 1:
            raise ValueError("n_envs must be >= 1")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.dataset == "colored" and len(self.p_c) != self.n_envs:
            raise ValueError(f"p_c lists {len(self.p_c)} values for {self.n_envs} environments")
        if self.dataset == "sem" and (self.sigma_e is None or len(self.sigma_e) != self.n_envs):
            raise ValueError("sem plans need one sigma_e per environment")
        if self.samples_per_env < 1 or self.test_samples < 1:
            raise ValueError("sample counts must be positive")


@dataclass
class MetricsRecord:
    method: str
    seed: int
    env_index: int
    phase: str  # "train" or "test"
    metric: str  # "accuracy" or "mse"
    value: float
    wall_time_ms: float = 0.0
    experiment: str = ""

    def __post_init__(self):
        if self.phase not in ("train", "test"):
            raise ValueError(f"phase must be train or test, got {self.phase!r}")
        if self.metric == "accuracy" and not 0.0 <= self.value <= 1.0:
            raise ValueError(f"accuracy {self.value} outside [0, 1]")
        if self.metric == "mse" and self.value < 0:
            raise ValueError(f"negative mse {self.value}")

    def to_dict(self) -> dict:
        return asdict(self)


# -- data ---------------------------------------------------------------------

_TEST_CACHE: dict[tuple, EnvironmentData] = {}
_TEST_LOCK = threading.Lock()


def held_out_environment(plan: ExperimentPlan) -> EnvironmentData:
    """The plan's held-out environment, generated once and shared by all methods and seeds."""
    key = (plan.dataset, plan.scheme, plan.test_p_c, plan.label_flip, plan.label_rule, plan.test_samples,
           plan.data_dir, plan.data_seed, plan.sem_dim, tuple(plan.sigma_e or ()))
    with _TEST_LOCK:
        if key not in _TEST_CACHE:
            _TEST_CACHE[key] = _make_held_out_environment(plan)
        return _TEST_CACHE[key]


def _make_held_out_environment(plan: ExperimentPlan) -> EnvironmentData:
    if plan.dataset == "colored":
        images, classes, _ = base_dataset(plan.data_dir, plan.test_samples, seed=plan.data_seed + 1, train=False)
        env = make_colored_env(images, classes, plan.label_flip, plan.test_p_c, plan.scheme, plan.label_rule,
                               n=min(plan.test_samples, len(images)), seed=plan.data_seed + 2)
    else:
        # the test distribution has a much larger noise scale than any training environment
        env = synth_sem(plan.test_samples, sigma_e=10.0 * max(plan.sigma_e), seed=plan.data_seed + 2,
                        dim=plan.sem_dim)
    env.is_test = True
    env.features.setflags(write=False)
    return env


def training_environments(plan: ExperimentPlan, seed: int) -> list[EnvironmentData]:
    """Training sequence for ``seed``: disjoint samples of the base pool, one p_c per environment."""
    n = plan.samples_per_env
    if plan.dataset == "sem":
        return [synth_sem(n, s, seed=10_000 * seed + i, dim=plan.sem_dim) for i, s in enumerate(plan.sigma_e)]
    images, classes, _ = base_dataset(plan.data_dir, n * plan.n_envs, seed=plan.data_seed, train=True)
    order = np.random.default_rng([plan.data_seed, seed]).permutation(len(images))
    if len(order) < n * plan.n_envs:
        raise ValueError(f"base pool of {len(order)} images is too small for {plan.n_envs} x {n}")
    envs = []
    for i, pc in enumerate(plan.p_c):
        idx = order[i * n:(i + 1) * n]
        envs.append(make_colored_env(images[idx], classes[idx], plan.label_flip, pc, plan.scheme,
                                     plan.label_rule, n=n, seed=10_000 * seed + i))
    return envs


# -- isolation ----------------------------------------------------------------

def _arrays_in(obj, depth: int = 0, seen=None):
    """Every ndarray reachable from ``obj`` through attributes and containers."""
    if seen is None:
        seen = set()
    if id(obj) in seen or depth > 6:
        return
    seen.add(id(obj))
    if isinstance(obj, np.ndarray):
        yield obj
    elif isinstance(obj, EnvironmentData):
        yield obj.features
        yield obj.labels
    elif isinstance(obj, dict):
        for v in obj.values():
            yield from _arrays_in(v, depth + 1, seen)
    elif isinstance(obj, (list, tuple, set)):
        for v in obj:
            yield from _arrays_in(v, depth + 1, seen)
    elif hasattr(obj, "__dict__") and not isinstance(obj, type):
        for v in vars(obj).values():
            yield from _arrays_in(v, depth + 1, seen)


def audit_isolation(trainer, consumed: Sequence[EnvironmentData]) -> None:
    """Fail if ``trainer`` still references the buffers of a consumed environment."""
    buffers = [b for env in consumed for b in (env.features, env.labels)]
    for arr in _arrays_in(trainer):
        for buf in buffers:
            if arr.size and buf.size and np.shares_memory(arr, buf):
                raise IsolationError("method retained data from a finished environment")


def consume(env: EnvironmentData) -> None:
    """End an environment's phase: mark it consumed and poison its buffers."""
    env.consumed = True
    if env.features.dtype.kind == "f":
        env.features[...] = np.nan


# -- running ------------------------------------------------------------------

def run_sequence(plan: ExperimentPlan, method: str | MethodConfig, seed: int,
                 overrides: dict | None = None, envs: list[EnvironmentData] | None = None,
                 model: str | None = None, eval_mc: int = 0, experiment: str = "") -> list[MetricsRecord]:
    """Present the plan's environments to ``method`` one at a time and evaluate after each.

    An entry of ``envs`` may itself be a list of sub-environments; they form a single
    time step (``Trainer.observe_joint``) and are scored on their union.
    """
    if isinstance(method, MethodConfig):
        cfg = method.replace(seed=seed, **(overrides or {}))
    else:
        cfg = default_config(method, seed=seed, **(overrides or {}))
    envs = training_environments(plan, seed) if envs is None else envs
    test = held_out_environment(plan)
    task = "regression" if plan.dataset == "sem" else "classification"
    metric = "mse" if task == "regression" else "accuracy"
    first = envs[0][0] if isinstance(envs[0], list) else envs[0]
    in_dim = first.features.shape[1]
    out_dim = 1 if task == "classification" else first.labels.reshape(len(first), -1).shape[1]
    model = model or ("linear" if task == "regression" else "mlp")
    trainer = make_trainer(cfg, in_dim, out_dim, task, model=model)
    records: list[MetricsRecord] = []
    consumed: list[EnvironmentData] = []
    t0 = time.perf_counter()
    for i, step in enumerate(envs):
        parts = step if isinstance(step, list) else [step]
        try:
            if isinstance(step, list):
                trainer.observe_joint(parts)
            else:
                trainer.observe(step)
            pred = trainer.predictor()
            train_val = _pooled_score(pred, parts, eval_mc)
            test_val = pred.evaluate(test, eval_mc)
        except (IsolationError, PermissionError):
            raise
        except Exception as exc:  # attach the environment index
            raise MethodFailure(cfg.method, i, exc) from exc
        ms = 1000.0 * (time.perf_counter() - t0)
        records.append(MetricsRecord(cfg.method, seed, i, "train", metric, train_val, ms, experiment))
        records.append(MetricsRecord(cfg.method, seed, i, "test", metric, test_val, ms, experiment))
        for env in parts:
            consume(env)
            consumed.append(env)
        audit_isolation(trainer, consumed)
    return records


def _pooled_score(pred, parts: list[EnvironmentData], eval_mc: int) -> float:
    if len(parts) == 1:
        return pred.evaluate(parts[0], eval_mc)
    sizes = np.array([len(p) for p in parts], dtype=float)
    return float(np.dot([pred.evaluate(p, eval_mc) for p in parts], sizes) / sizes.sum())


def inferred_environments(pooled: EnvironmentData, seed: int, reference: dict | None = None,
                          n_iters: int = 10_000, lr: float = 1e-2) -> list[EnvironmentData]:
    """Split one pooled environment in two with an ERM reference model and EIIL.

    The larger inferred group comes first. Both groups are copies, so the pooled
    buffers can be consumed independently.
    """
    x, y = pooled.training_arrays()
    cfg = default_config("erm", seed=seed, **(reference or {}))
    ref = make_trainer(cfg, x.shape[1]).fit([pooled])
    split = infer_environments(ref, x, y, n_iters, lr, seed)
    groups = sorted(split.groups(), key=len, reverse=True)
    envs = []
    for idx in groups:
        if len(idx) == 0:
            continue
        color = None if pooled.color is None else pooled.color[idx]
        envs.append(EnvironmentData(x[idx], y[idx], pooled.meta, color))
    return envs


def run_eiil(plan: ExperimentPlan, method: str | MethodConfig, seed: int, infer: bool = True,
             overrides: dict | None = None, reference: dict | None = None, n_iters: int = 10_000,
             lr: float = 1e-2) -> list[MetricsRecord]:
    """Train on the plan's single pooled environment, optionally split by environment inference.

    The inferred groups come from one observation, so they are learned jointly as one
    time step rather than as a stream.
    """
    if plan.n_envs != 1:
        raise ValueError("environment inference starts from a single pooled environment")
    pooled = training_environments(plan, seed)[0]
    envs = [inferred_environments(pooled, seed, reference, n_iters, lr)] if infer else [pooled]
    return run_sequence(plan, method, seed, overrides, envs=envs, experiment="eiil" if infer else "no-eiil")


@dataclass
class Cell:
    mean: float
    std: float
    n: int
    flagged: bool = False  # single record: std reported as 0 by convention

    def format(self, scale: float = 100.0, digits: int = 1) -> str:
        return f"{self.mean * scale:.{digits}f} ({self.std * scale:.{digits}f})"


def aggregate(records: Iterable[MetricsRecord], final_only: bool = True,
              keys: tuple[str, ...] = ("method", "phase")) -> dict[tuple, Cell]:
    """Sample mean and sample standard deviation (n - 1) per group.

    With ``final_only`` only each run's last environment counts.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to aggregate")
    if final_only:
        last: dict[tuple, int] = {}
        for r in records:
            k = (r.method, r.seed)
            last[k] = max(last.get(k, -1), r.env_index)
        records = [r for r in records if r.env_index == last[(r.method, r.seed)]]
    groups: dict[tuple, list[float]] = {}
    for r in records:
        groups.setdefault(tuple(getattr(r, k) for k in keys), []).append(r.value)
    out = {}
    for k, vals in groups.items():
        if not vals:
            raise ValueError(f"empty group {k}")
        v = np.asarray(vals, dtype=np.float64)
        if len(v) == 1:
            out[k] = Cell(float(v[0]), 0.0, 1, flagged=True)
        else:
            out[k] = Cell(float(v.mean()), float(v.std(ddof=1)), len(v))
    return out


def binomial_ceiling(n_test: int, accuracy: float = 0.75, k_sigma: float = 3.0) -> float:
    """Upper bound ``accuracy + k * sqrt(a (1 - a) / n)`` for a test set of ``n_test`` samples."""
    return accuracy + k_sigma * float(np.sqrt(accuracy * (1 - accuracy) / n_test))
