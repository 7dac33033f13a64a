"""Model-averaging strategies.

All strategies take a list of :class:`ClientSnapshot` (one per client, the
weights kept after local training) and return a global client model, a global
server model and the per-client coefficients used. One scalar coefficient per
client applies uniformly to every parameter segment.

``qa-splitfed`` weighs clients by loss reliability::

    b_i = mean_i + 2 * std_i            (per-sample losses of client i)
    q   = softmax(1 / b)
    r   = q * d / (q . d)               (d: normalized sample counts)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DataError
from .params import ParamVector

STRATEGIES = ("naive", "fedavg", "fedavg-m", "qa-splitfed")
BOUND_FLOOR = 1e-8


@dataclass(frozen=True)
class ClientSnapshot:
    client_id: int
    client_params: ParamVector      # front-end + back-end
    server_params: ParamVector

    def digest(self) -> str:
        return self.client_params.digest() + self.server_params.digest()


@dataclass(frozen=True)
class LossStats:
    mean: float
    std: float
    bound: float
    count: int


def loss_bound(losses: Sequence[float], ddof: int = 0) -> LossStats:
    """Mean, standard deviation and ``mean + 2 * std`` of per-sample losses.

    ``ddof=0`` gives the population deviation.
    """
    arr = np.asarray(losses, dtype=np.float64).ravel()
    if arr.size == 0:
        raise DataError("loss_bound needs at least one loss value")
    if not np.all(np.isfinite(arr)):
        raise DataError("non-finite loss value")
    if np.any(arr < 0):
        raise DataError("losses must be non-negative")
    if arr.size <= ddof:
        raise DataError(f"{arr.size} samples is too few for ddof={ddof}")
    mean = math.fsum(arr) / arr.size
    std = math.sqrt(math.fsum((arr - mean) ** 2) / (arr.size - ddof))
    return LossStats(mean, std, mean + 2.0 * std, int(arr.size))


@dataclass(frozen=True)
class DataScores:
    scores: np.ndarray
    source: str = "training"

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise DataError("data scores must be a non-empty vector")
        if np.any(~np.isfinite(s)) or np.any(s <= 0):
            raise DataError("data scores must be positive")
        if abs(math.fsum(s) - 1.0) > 1e-12:
            raise DataError(f"data scores sum to {math.fsum(s)!r}, expected 1")
        object.__setattr__(self, "scores", s)

    def __len__(self) -> int:
        return self.scores.size


def data_scores(counts: Sequence[float], source: str = "training") -> DataScores:
    """Normalize per-client sample counts to a score vector summing to one."""
    c = np.asarray(counts, dtype=np.float64)
    if c.size == 0 or np.any(c <= 0):
        raise DataError(f"sample counts must be positive, got {list(counts)}")
    return DataScores(c / math.fsum(c), source)


@dataclass(frozen=True)
class AveragingWeights:
    r: np.ndarray
    q: np.ndarray | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return self.r.size


def quality_scores(bounds: Sequence[float]) -> np.ndarray:
    """``softmax(1 / max(b, 1e-8))`` with the maximum subtracted before ``exp``."""
    b = np.asarray(bounds, dtype=np.float64)
    if b.ndim != 1 or b.size == 0:
        raise DataError("bounds must be a non-empty vector")
    if not np.all(np.isfinite(b)):
        raise DataError(f"non-finite reliability bound in {b.tolist()}")
    x = 1.0 / np.maximum(b, BOUND_FLOOR)
    e = np.exp(x - x.max())
    return e / math.fsum(e)


def averaging_weights(bounds: Sequence[float], d: DataScores | Sequence[float]) -> AveragingWeights:
    """Coefficients ``r = q * d / (q . d)`` with ``q = softmax(1 / b)``."""
    normalized = isinstance(d, DataScores)
    d = d.scores if normalized else np.asarray(d, dtype=np.float64)
    q = quality_scores(bounds)
    if q.size != d.size:
        raise ConfigurationError(f"{q.size} bounds but {d.size} data scores")
    if np.all(q == q[0]):
        # constant q cancels exactly; validated scores are returned untouched
        r = d.copy() if normalized else d / math.fsum(d)
    else:
        w = q * d
        r = w / math.fsum(w)
    return AveragingWeights(r, q)


def _check_snapshots(snapshots: Sequence[ClientSnapshot]) -> None:
    if not snapshots:
        raise ConfigurationError("no client snapshots to average")
    ref = snapshots[0]
    for s in snapshots[1:]:
        ref.client_params.check_compatible(s.client_params, "client models")
        ref.server_params.check_compatible(s.server_params, "server models")


def weighted_average(snapshots: Sequence[ClientSnapshot], r: Sequence[float]):
    """Convex combination of client and server weights with coefficients ``r``."""
    _check_snapshots(snapshots)
    if len(r) != len(snapshots):
        raise ConfigurationError(f"{len(snapshots)} snapshots but {len(r)} coefficients")
    client = ParamVector.linear_combination([s.client_params for s in snapshots], r, clip_to_hull=True)
    server = ParamVector.linear_combination([s.server_params for s in snapshots], r, clip_to_hull=True)
    return client, server


def model_updates(snapshots: Sequence[ClientSnapshot], bounds: Sequence[float],
                  d: DataScores | Sequence[float]):
    """Quality-aware averaging; returns ``(global_client, global_server, weights)``."""
    if not (len(snapshots) == len(bounds) == len(d)):
        raise ConfigurationError(
            f"{len(snapshots)} snapshots, {len(bounds)} bounds, {len(d)} data scores")
    weights = averaging_weights(bounds, d)
    client, server = weighted_average(snapshots, weights.r)
    return client, server, weights


def fedavg(snapshots: Sequence[ClientSnapshot], counts: Sequence[float]):
    """Sample-count weighted average; returns ``(client, server, weights)``."""
    if len(counts) != len(snapshots):
        raise ConfigurationError(f"{len(snapshots)} snapshots but {len(counts)} counts")
    c = np.asarray(counts, dtype=np.float64)
    if np.any(c < 1):
        raise DataError(f"sample counts must be >= 1, got {list(counts)}")
    total = math.fsum(c)
    if total <= 0:
        raise DataError("total sample count is zero")
    r = c / total
    client, server = weighted_average(snapshots, r)
    return client, server, AveragingWeights(r)


def naive_average(snapshots: Sequence[ClientSnapshot]):
    """Plain mean over clients; returns ``(client, server, weights)``."""
    return fedavg(snapshots, [1.0] * len(snapshots))


@dataclass(frozen=True)
class MomentumState:
    """Server-side momentum for ``fedavg-m``; empty until the first round."""

    momentum: float = 0.9
    previous_client: ParamVector | None = None
    previous_server: ParamVector | None = None
    velocity_client: ParamVector | None = None
    velocity_server: ParamVector | None = None

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")


def fedavg_m(snapshots: Sequence[ClientSnapshot], counts: Sequence[float], state: MomentumState):
    """FedAvg with server momentum over the pseudo-gradient.

    ``delta = previous - fedavg``, ``v = m * v + delta``,
    ``global = previous - v``. Without a previous global model this is plain
    FedAvg and the velocity starts at zero. Returns
    ``(client, server, weights, new_state)``.
    """
    client, server, weights = fedavg(snapshots, counts)
    if state.previous_client is None or state.previous_server is None:
        new_state = MomentumState(state.momentum, client, server,
                                  client.zeros_like(), server.zeros_like())
        return client, server, weights, new_state

    m = state.momentum

    def step(prev, avg, vel):
        prev.check_compatible(avg, "previous and averaged models")
        vel = vel if vel is not None else prev.zeros_like()
        new_vel = ParamVector((n, m * vel[n] + (prev[n] - avg[n])) for n in prev)
        # prev - new_vel, written so that m == 0 reproduces avg exactly
        return ParamVector((n, avg[n] - m * vel[n]) for n in prev), new_vel

    new_client, vc = step(state.previous_client, client, state.velocity_client)
    new_server, vs = step(state.previous_server, server, state.velocity_server)
    return new_client, new_server, weights, MomentumState(state.momentum, new_client, new_server, vc, vs)
