"""Loss, Adam with orthogonality maintenance, the spiral training loop and run aggregation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .linalg import polar_project
from .model import Constraint, ModelParams, Variant, collapse_g1, collapse_g2, collapse_g3, init_params, integrate
from .paths import SplinePath, fit_natural_cubic, generate_spirals
from .solvers import NFECounter, SolverConfig, SolverDivergence

__all__ = [
    "DEFAULT_LR",
    "TrainConfig",
    "AdamState",
    "EpochStats",
    "RunReport",
    "ConfigError",
    "batch_loss",
    "adam_step",
    "constrained_update",
    "Trainer",
    "run_experiment",
    "aggregate",
    "SUMMARY_COLUMNS",
]

log = logging.getLogger(__name__)

DEFAULT_LR = {
    Variant.NQDE1_UNN: 0.002,
    Variant.NQDE2_UNN: 0.002,
    Variant.NQDE3_GEO: 0.001,
    Variant.NQDE4_GEO: 0.001,
}

TEST_SEED_OFFSET = 1000

SUMMARY_COLUMNS = [
    "model",
    "final_loss_mean",
    "final_loss_std",
    "fwd_nfe_mean",
    "fwd_nfe_std",
    "bwd_nfe_mean",
    "bwd_nfe_std",
    "acc_train_mean",
    "acc_train_std",
    "acc_test_mean",
    "acc_test_std",
]


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    variant: Variant
    epochs: int = 20
    lr: Optional[float] = None
    batch_size: int = 32
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0
    g2_mode: str = "softmax"
    repeats: int = 1
    n_samples: int = 128
    steps: int = 100
    sigma: float = 0.02

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.lr is None:
            self.lr = DEFAULT_LR[self.variant]
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.g2_mode not in ("softmax", "normalize"):
            raise ConfigError(f"unknown g2 mode {self.g2_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update of every named parameter, in place."""
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.tensor.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.tensor.data = p.tensor.data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def constrained_update(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
                       lr: float, project: bool = True) -> None:
    """Adam on all trainables, then pull projected weights back onto the orthogonal group.

    Exponential-map generators need no projection: any generator yields an
    orthogonal weight.
    """
    adam_step(params, grads, state, lr)
    if project:
        for W in params.constrained(Constraint.ORTHO_MAINTAINED).values():
            W.data = polar_project(W.data)


def batch_loss(params: ModelParams, path: SplinePath, labels: np.ndarray, solver: SolverConfig,
               counter: Optional[NFECounter] = None, check: bool = True) -> Tensor:
    """Mean NLL of the labels under softmax of the squared amplitudes at the final time."""
    z_final = integrate(params, path, solver, counter, check=check).state
    return ad.log_softmax_nll(collapse_g1(z_final), labels)


def _subset(path: SplinePath, idx) -> SplinePath:
    return SplinePath(path.knots, path.a[idx], path.b[idx], path.c[idx], path.d[idx])


@dataclass
class EpochStats:
    epoch: int
    loss: float
    forward_nfe: int
    backward_nfe: int
    accuracy_train: float
    iteration_nfe: list = field(default_factory=list)


@dataclass
class RunReport:
    model: str
    seed: int
    final_loss: float
    forward_nfe: int
    backward_nfe: int
    accuracy_train: float
    accuracy_test: float
    max_orthogonality_error: float
    epochs: list = field(default_factory=list)
    failed: bool = False
    diagnostics: str = ""
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


class Trainer:
    """Stateful spiral trainer; one :meth:`train_epoch` call per epoch."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.train_set = generate_spirals(config.n_samples, config.steps, config.sigma, config.seed)
        self.test_set = generate_spirals(
            config.n_samples, config.steps, config.sigma, config.seed + TEST_SEED_OFFSET
        )
        self.train_path = fit_natural_cubic(self.train_set.series)
        self.test_path = fit_natural_cubic(self.test_set.series)
        self.params = init_params(config.variant, config.seed)
        self.adam = AdamState()
        self.rng = np.random.default_rng([config.seed, 7])
        self.history: list[EpochStats] = []

    def train_epoch(self) -> EpochStats:
        cfg = self.config
        n = len(self.train_set)
        order = self.rng.permutation(n)
        losses, fwd, bwd, per_iter = [], 0, 0, []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            counter = NFECounter()
            self.params.zero_grad()
            with Tape() as tape:
                try:
                    loss = batch_loss(self.params, _subset(self.train_path, idx), self.train_set.labels[idx],
                                      cfg.solver, counter)
                except SolverDivergence as exc:
                    # the batch is integrated jointly, so name every sample it held
                    raise SolverDivergence(f"{exc} (epoch {len(self.history) + 1}, samples "
                                           f"{sorted(int(i) for i in idx)})", exc.step) from exc
                ad.backward(loss, tape)
            counter.backward = tape.replayed_scopes
            grads = {name: p.tensor.grad for name, p in self.params.items()}
            constrained_update(self.params, grads, self.adam, cfg.lr)
            losses.append(float(loss.data) * len(idx))
            fwd += counter.forward
            bwd += counter.backward
            per_iter.append((counter.forward, counter.backward))
        stats = EpochStats(
            epoch=len(self.history) + 1,
            loss=sum(losses) / n,
            forward_nfe=fwd,
            backward_nfe=bwd,
            accuracy_train=self.accuracy(self.train_path, self.train_set.labels),
            iteration_nfe=per_iter,
        )
        self.history.append(stats)
        log.info("%s seed=%d epoch %d loss=%.5f acc=%.3f nfe=%d/%d", cfg.variant.value, cfg.seed,
                 stats.epoch, stats.loss, stats.accuracy_train, fwd, bwd)
        return stats

    def predict_proba(self, path: SplinePath) -> np.ndarray:
        z = integrate(self.params, path, self.config.solver).state.data
        return collapse_g2(collapse_g1(z), self.config.g2_mode)

    def accuracy(self, path: SplinePath, labels: np.ndarray) -> float:
        pred = collapse_g3(self.predict_proba(path), "argmax")
        return float(np.mean(pred == labels))

    def report(self, wall_time: float = 0.0) -> RunReport:
        last = self.history[-1]
        return RunReport(
            model=self.config.variant.value,
            seed=self.config.seed,
            final_loss=last.loss,
            forward_nfe=last.forward_nfe,
            backward_nfe=last.backward_nfe,
            accuracy_train=last.accuracy_train,
            accuracy_test=self.accuracy(self.test_path, self.test_set.labels),
            max_orthogonality_error=self.params.max_orthogonality_error(),
            epochs=[asdict(e) for e in self.history],
            wall_time=wall_time,
        )


def run_experiment(config: TrainConfig) -> RunReport:
    """Train one (variant, seed) for ``config.epochs`` epochs and report."""
    start = time.perf_counter()
    trainer = Trainer(config)
    try:
        for _ in range(config.epochs):
            trainer.train_epoch()
    except ArithmeticError as exc:
        log.error("run %s seed=%d failed: %s", config.variant.value, config.seed, exc)
        last = trainer.history[-1] if trainer.history else None
        return RunReport(
            model=config.variant.value,
            seed=config.seed,
            final_loss=last.loss if last else math.nan,
            forward_nfe=last.forward_nfe if last else 0,
            backward_nfe=last.backward_nfe if last else 0,
            accuracy_train=last.accuracy_train if last else 0.0,
            accuracy_test=0.0,
            max_orthogonality_error=trainer.params.max_orthogonality_error(),
            epochs=[asdict(e) for e in trainer.history],
            failed=True,
            diagnostics=f"{type(exc).__name__}: {exc}",
            wall_time=time.perf_counter() - start,
        )
    return trainer.report(time.perf_counter() - start)


_METRICS = [
    ("final_loss", "final_loss"),
    ("fwd_nfe", "forward_nfe"),
    ("bwd_nfe", "backward_nfe"),
    ("acc_train", "accuracy_train"),
    ("acc_test", "accuracy_test"),
]


def aggregate(reports: Sequence[RunReport]) -> list[dict]:
    """Per-model mean and sample standard deviation (0 for a single run) of each metric."""
    if not reports:
        raise ValueError("nothing to aggregate")
    ordered = sorted(reports, key=lambda r: (r.model, r.seed))
    rows = []
    for model in sorted({r.model for r in ordered}):
        group = [r for r in ordered if r.model == model]
        row: dict = {"model": model}
        for col, attr in _METRICS:
            vals = np.array([getattr(r, attr) for r in group], dtype=np.float64)
            row[f"{col}_mean"] = float(vals.mean())
            row[f"{col}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append(row)
    return rows
