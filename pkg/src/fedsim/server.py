"""Global model owner: aggregation weights, update application, best-model tracking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .param_math import UsageError, weighted_sum

STRATEGIES = ("fedavg", "dwa")
LOSS_FLOOR = 1e-12


class ProtocolError(RuntimeError):
    """A peer violated the round protocol."""


@dataclass(frozen=True)
class AggregationConfig:
    strategy: str = "fedavg"
    T: float = 2.0
    xi: int = 1
    normalize_xi: bool = False
    min_clients: int = 3
    rounds: int = 60

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise UsageError(f"unknown aggregation strategy {self.strategy!r}")
        if self.strategy == "dwa" and not (self.T > 0 and int(self.xi) == self.xi and self.xi >= 1):
            raise UsageError("dwa needs T > 0 and a positive integer xi")
        if self.min_clients < 1 or self.rounds < 0:
            raise UsageError("min_clients must be >= 1 and rounds >= 0")


@dataclass
class Checkpoint:
    round: int
    params: np.ndarray
    score: float


@dataclass
class GlobalState:
    """Server state.  ``round`` is the round currently being trained (1-based)."""

    global_params: np.ndarray
    round: int = 1
    loss_history: dict = field(default_factory=dict)  # client -> (L_{r-1}, L_{r-2})
    best: Checkpoint | None = None
    weight_trace: list = field(default_factory=list)
    score_trace: list = field(default_factory=list)

    @property
    def completed_rounds(self) -> int:
        return self.round - 1

    def history_for(self, client_id: int) -> tuple[float, float]:
        return self.loss_history.get(client_id, (1.0, 1.0))


def fedavg_weights(n) -> list[float]:
    """Aggregation weights proportional to local training-set sizes."""
    n = [float(x) for x in n]
    if not n or any(not x > 0 for x in n):
        raise UsageError(f"sample counts must all be > 0: {n}")
    total = math.fsum(n)
    return [x / total for x in n]


def loss_ratios(state: GlobalState, client_ids) -> list[float]:
    """Per-client ``L_{r-1} / L_{r-2}``."""
    out = []
    for cid in client_ids:
        last, before = state.history_for(cid)
        rho = max(last, LOSS_FLOOR) / max(before, LOSS_FLOOR)
        if not math.isfinite(rho):
            raise ProtocolError(f"client {cid}: non-finite loss ratio {last!r}/{before!r}")
        out.append(rho)
    return out


def dwa_weights(state: GlobalState, T: float, xi: int, client_ids=None,
                normalize_xi: bool = False) -> list[float]:
    """``xi * softmax(rho / T)`` over clients; divided by ``xi`` when ``normalize_xi``."""
    if client_ids is None:
        client_ids = sorted(state.loss_history)
    if not client_ids:
        raise UsageError("no clients to weight")
    rho = np.array(loss_ratios(state, client_ids))
    z = rho / T
    e = np.exp(z - z.max())
    scale = 1.0 if normalize_xi else float(xi)
    # scale before normalising so equal ratios give exactly scale / K
    return [float(w) for w in (scale * e) / e.sum()]


def mean_validation_score(reports) -> float:
    """Unweighted mean over clients of each client's mean class Dice."""
    per_client = [np.mean(list(r.val_dice_per_class.values())) for r in reports if r.val_dice_per_class]
    return float(np.mean(per_client)) if per_client else float("nan")


def aggregate(state: GlobalState, reports, weights) -> GlobalState:
    """Apply weighted sparse updates and advance the round.

    Reports carry validation scores of the model they were trained from, so
    the pre-update parameters are the best-model candidate for this round.
    """
    reports = list(reports)
    if not reports:
        raise UsageError("no reports to aggregate")
    if len(weights) != len(reports):
        raise UsageError(f"{len(reports)} reports but {len(weights)} weights")
    for r in reports:
        if r.round != state.round:
            raise ProtocolError(f"client {r.client_id} reported round {r.round}, server is at {state.round}")
    order = sorted(range(len(reports)), key=lambda i: reports[i].client_id)
    reports = [reports[i] for i in order]
    weights = [float(weights[i]) for i in order]

    delta = weighted_sum([r.update for r in reports], weights)
    if delta.shape != state.global_params.shape:
        raise ProtocolError("update length does not match the global model")

    history = dict(state.loss_history)
    for r in reports:
        history[r.client_id] = (float(r.avg_loss), state.history_for(r.client_id)[0])

    best = state.best
    score = mean_validation_score(reports)
    if math.isfinite(score) and (best is None or score > best.score):
        best = Checkpoint(state.round, state.global_params.copy(), score)

    return replace(
        state,
        global_params=state.global_params + delta,
        round=state.round + 1,
        loss_history=history,
        best=best,
        weight_trace=state.weight_trace + [{r.client_id: w for r, w in zip(reports, weights)}],
        score_trace=state.score_trace + [score],
    )


def select_best(state: GlobalState) -> tuple[int, np.ndarray]:
    if state.completed_rounds < 1:
        raise UsageError("no completed rounds")
    if state.best is None:
        return state.completed_rounds, state.global_params.copy()
    return state.best.round, state.best.params.copy()


class Server:
    """Round state machine: buffers reports until ``min_clients`` arrive."""

    def __init__(self, cfg: AggregationConfig, initial_params, client_sizes: dict | None = None):
        self.cfg = cfg
        self.state = GlobalState(np.array(initial_params, dtype=np.float64))
        self.pending: dict[int, object] = {}
        self.client_sizes = dict(client_sizes or {})

    @property
    def round(self) -> int:
        return self.state.round

    def weights_for(self, reports) -> list[float]:
        ids = [r.client_id for r in reports]
        if self.cfg.strategy == "fedavg":
            return fedavg_weights([r.n_samples for r in reports])
        return dwa_weights(self.state, self.cfg.T, self.cfg.xi, ids, self.cfg.normalize_xi)

    def submit(self, report) -> bool:
        """Buffer a report; aggregate once enough are present.  True if a round closed."""
        if report.round != self.state.round:
            raise ProtocolError(
                f"client {report.client_id} reported round {report.round}, server is at {self.state.round}"
            )
        if report.client_id in self.pending:
            raise ProtocolError(f"duplicate report from client {report.client_id}")
        self.pending[report.client_id] = report
        if len(self.pending) < self.cfg.min_clients:
            return False
        reports = [self.pending[k] for k in sorted(self.pending)]
        self.state = aggregate(self.state, reports, self.weights_for(reports))
        self.pending.clear()
        return True
