"""Local training engine for one federated client."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .datagen import ClientDataset, Split
from .model import Batch, ModelSpec, combine, dice_score, loss_terms, predict
from .param_math import SparseUpdate, UsageError, top_fraction_mask

MODES = ("plain", "fedprox", "dtp")
KPI_FLOOR = 1e-6
LR_FLOOR_RATIO = 0.01


class TrainingDivergence(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at local iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


@dataclass(frozen=True)
class ClientConfig:
    client_id: int = 0
    mode: str = "plain"
    mu: float = 0.0
    gamma: float = 1.0
    alpha: float = 0.9
    kpi_exponent: float = 1.0
    local_epochs: int = 10
    batch_size: int = 4
    lr: float = 5e-4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    share_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise UsageError(f"unknown client mode {self.mode!r}")
        if self.mu < 0:
            raise UsageError("mu must be >= 0")
        if self.mode == "dtp" and not (self.gamma > 0 and 0 <= self.alpha < 1 and self.kpi_exponent > 0):
            raise UsageError("dtp mode needs gamma > 0, alpha in [0, 1), kpi_exponent > 0")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise UsageError("local_epochs and batch_size must be >= 1")
        if self.lr < 0:
            raise UsageError("lr must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise UsageError(f"unknown optimizer {self.optimizer!r}")
        if not 0 < self.share_fraction <= 1:
            raise UsageError("share_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class DtpState:
    kappa_bar: float = 1.0
    initialized: bool = False


@dataclass
class RoundReport:
    client_id: int
    round: int
    update: SparseUpdate
    avg_loss: float
    n_samples: int
    val_dice_per_class: dict
    iterations: int
    mean_loss_scale: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.avg_loss) and self.avg_loss >= 0):
            raise UsageError(f"avg_loss must be finite and >= 0, got {self.avg_loss}")
        if self.update.round != self.round:
            raise UsageError("update.round must equal report round")

    def __eq__(self, other):
        if not isinstance(other, RoundReport):
            return NotImplemented
        return (
            self.client_id == other.client_id
            and self.round == other.round
            and self.update == other.update
            and self.avg_loss == other.avg_loss
            and self.n_samples == other.n_samples
            and self.val_dice_per_class == other.val_dice_per_class
            and self.iterations == other.iterations
            and self.mean_loss_scale == other.mean_loss_scale
        )


@dataclass
class IterationRecord:
    iteration: int
    lr: float
    base_loss: float
    soft_dice: float
    kpi: float
    loss_scale: float


@dataclass
class LocalResult:
    report: RoundReport
    params: np.ndarray
    delta: np.ndarray
    dtp_state: DtpState
    log: list = field(default_factory=list)


def kpi(batch_dice: float, exponent: float) -> float:
    """Performance index ``dice ** exponent`` clamped to ``[1e-6, 1]``."""
    return min(1.0, max(KPI_FLOOR, batch_dice ** exponent))


def kpi_ema(prev: DtpState, kappa: float, alpha: float) -> DtpState:
    if not prev.initialized:
        return DtpState(kappa, True)
    return DtpState((1.0 - alpha) * kappa + alpha * prev.kappa_bar, True)


def dtp_weight(kappa_bar: float, gamma: float) -> float:
    """Focal priority ``-(1 - k)^gamma * log(k)``; zero at a perfect KPI."""
    if kappa_bar >= 1.0:
        return 0.0
    return -((1.0 - kappa_bar) ** gamma) * math.log(kappa_bar)


def cosine_lr(base_lr: float, iteration: int, total: int) -> float:
    """Cosine annealing from ``base_lr`` to ``0.01 * base_lr`` over ``total`` steps."""
    lo = LR_FLOOR_RATIO * base_lr
    if total <= 1:
        return base_lr
    return lo + 0.5 * (base_lr - lo) * (1.0 + math.cos(math.pi * iteration / (total - 1)))


def iterations_per_round(n_train: int, cfg: ClientConfig) -> int:
    return cfg.local_epochs * math.ceil(n_train / cfg.batch_size)


def validation_dice(params, spec: ModelSpec, split: Split, label_space) -> dict:
    """Hard Dice per supervised foreground class over a whole split."""
    pred = predict(params, spec, split.images)
    return {c: dice_score(pred, split.labels, c) for c in label_space if c != 0}


def train_round(global_params, dataset: ClientDataset, cfg: ClientConfig, round: int,
                spec: ModelSpec, dtp_state: DtpState = DtpState(),
                validate: bool = True) -> LocalResult:
    """Fine-tune ``global_params`` on the client's training split for one round."""
    global_params = np.asarray(global_params, dtype=np.float64)
    if global_params.shape != (spec.n_params,):
        raise UsageError(f"expected {spec.n_params} parameters, got {global_params.shape}")
    train = dataset.train
    n = len(train)
    if n == 0:
        raise UsageError("client has no training data")

    val_dice = validation_dice(global_params, spec, dataset.val, dataset.label_space) if validate else {}

    # Optimise the update itself; the model is always global + delta, which is
    # exactly what the server reconstructs from a full-share update.
    delta = np.zeros_like(global_params)
    params = global_params.copy()
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    total = iterations_per_round(n, cfg)
    prox_mu = cfg.mu if cfg.mode == "fedprox" else 0.0
    anchor = global_params if prox_mu > 0 else None
    rng = np.random.default_rng([cfg.seed, cfg.client_id, round])

    log = []
    it = 0
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            batch = Batch(train.images[idx], train.labels[idx], dataset.label_space)
            terms = loss_terms(params, spec, batch)
            if not math.isfinite(terms.base_loss):
                raise TrainingDivergence(it, terms.base_loss)

            scale, kappa = 1.0, float("nan")
            if cfg.mode == "dtp":
                kappa = kpi(terms.soft_dice, cfg.kpi_exponent)
                dtp_state = kpi_ema(dtp_state, kappa, cfg.alpha)
                # W == 0 only for a perfect batch; keep a positive scale floor.
                scale = max(dtp_weight(dtp_state.kappa_bar, cfg.gamma), np.finfo(float).tiny)

            loss, grad = combine(terms, params, scale, prox_mu, anchor)
            if not math.isfinite(loss):
                raise TrainingDivergence(it, loss)
            lr = cosine_lr(cfg.lr, it, total)
            if cfg.optimizer == "adam":
                _kernels.adam_step(delta, grad, m, v, lr, cfg.beta1, cfg.beta2, cfg.adam_eps, it + 1)
            else:
                delta -= lr * grad
            np.add(global_params, delta, out=params)
            log.append(IterationRecord(it, lr, terms.base_loss, terms.soft_dice, kappa, scale))
            it += 1

    avg_loss = float(np.mean([r.base_loss for r in log]))
    update = top_fraction_mask(delta, cfg.share_fraction, round)
    report = RoundReport(
        client_id=cfg.client_id,
        round=round,
        update=update,
        avg_loss=avg_loss,
        n_samples=n,
        val_dice_per_class=val_dice,
        iterations=total,
        mean_loss_scale=float(np.mean([r.loss_scale for r in log])),
    )
    return LocalResult(report, params, delta, dtp_state, log)


class Client:
    """Stateful client: keeps its DTP state across rounds."""

    def __init__(self, dataset: ClientDataset, cfg: ClientConfig, spec: ModelSpec):
        self.dataset = dataset
        self.cfg = cfg
        self.spec = spec
        self.dtp_state = DtpState()
        self.last: LocalResult | None = None

    @property
    def client_id(self) -> int:
        return self.cfg.client_id

    def local_train(self, global_params, round: int) -> RoundReport:
        self.last = train_round(global_params, self.dataset, self.cfg, round, self.spec, self.dtp_state)
        self.dtp_state = self.last.dtp_state
        return self.last.report
