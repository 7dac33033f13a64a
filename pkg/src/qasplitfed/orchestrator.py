"""Sequential split-federated training with pluggable averaging.

One global epoch trains every client in turn against the server, collects the
best-validation snapshot of each, and averages them. For ``qa-splitfed`` the
average is computed twice: first with reliability bounds from each client's
training losses, then (after scoring that interim model on every client's
validation set) again from the same snapshots with validation-derived bounds.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from contextlib import ExitStack
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import aggregation as agg
from . import dataset as ds
from . import metrics, nn, split
from .errors import ConfigurationError, DataError
from .nodes import SplitClient, SplitServer
from .params import ParamVector
from .transport import InProcessTransport, TcpServer, TcpTransport

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    clients: int = 5
    counts: tuple[int, ...] | None = None     # default: desk-scale client sizes
    global_epochs: int = 10
    local_epochs: int = 12
    learning_rate: float = 0.1
    optimizer: str = "sgd"
    momentum: float = 0.0                     # local optimizer momentum
    server_momentum: float = 0.9              # fedavg-m
    strategy: str = "qa-splitfed"
    seed: int = 0
    samples: int = 160
    image_size: int = 32
    noise: float = 0.08
    down_filters: tuple[int, ...] = (8, 16)
    bottleneck: int = 0                       # 0: same as the deepest down block
    batchnorm: bool = True
    split: str = "default"                    # or "<fe_end>,<be_start>"
    radius: int = 3
    dilate_classes: tuple[int, ...] = ds.FOREGROUND
    corrupted: int = 0
    corrupt_ids: tuple[int, ...] | None = None
    batch_size: int = 0                       # 0: whole client set per step
    std_ddof: int = 0
    transport: str = "inproc"

    def __post_init__(self):
        def bad(name, why):
            raise ConfigurationError(f"config field {name!r}: {why}")
        for name in ("clients", "global_epochs", "local_epochs", "samples"):
            if int(getattr(self, name)) < 1:
                bad(name, "must be >= 1")
        if self.counts is not None and len(self.counts) != self.clients:
            bad("counts", f"has {len(self.counts)} entries for {self.clients} clients")
        if self.strategy not in agg.STRATEGIES:
            bad("strategy", f"must be one of {', '.join(agg.STRATEGIES)}")
        if self.transport not in ("inproc", "tcp"):
            bad("transport", "must be inproc or tcp")
        if self.optimizer not in ("sgd", "sgd-momentum"):
            bad("optimizer", "must be sgd or sgd-momentum")
        if self.learning_rate < 0:
            bad("learning_rate", "must be non-negative")
        if not 0 <= self.momentum < 1:
            bad("momentum", "must lie in [0, 1)")
        if not 0 <= self.server_momentum < 1:
            bad("server_momentum", "must lie in [0, 1)")
        if self.radius < 1:
            bad("radius", "must be >= 1")
        if not self.dilate_classes or not set(self.dilate_classes) <= set(ds.FOREGROUND):
            bad("dilate_classes", f"must be a non-empty subset of {ds.FOREGROUND}")
        if not 0 <= self.corrupted <= self.clients:
            bad("corrupted", f"must lie in [0, {self.clients}]")
        if self.corrupt_ids is not None:
            if len(set(self.corrupt_ids)) != len(self.corrupt_ids) or any(
                    not 0 <= i < self.clients for i in self.corrupt_ids):
                bad("corrupt_ids", f"must be distinct ids in [0, {self.clients})")
        if self.image_size < 16 or self.image_size % (2 ** len(self.down_filters)):
            bad("image_size", f"must be >= 16 and divisible by {2 ** len(self.down_filters)}")
        if sum(self.client_counts) > self.samples:
            bad("counts", f"total {sum(self.client_counts)} exceeds samples={self.samples}")
        if self.split != "default":
            try:
                fe_end, be_start = (int(v) for v in self.split.split(","))
            except ValueError:
                bad("split", "must be 'default' or '<fe_end>,<be_start>'")

    @property
    def client_counts(self) -> tuple[int, ...]:
        if self.counts is not None:
            return tuple(int(c) for c in self.counts)
        return tuple(ds.DESK_COUNTS[i % len(ds.DESK_COUNTS)] for i in range(self.clients))

    def corrupted_ids(self) -> tuple[int, ...]:
        if self.corrupt_ids is not None:
            return tuple(sorted(self.corrupt_ids))
        return tuple(sorted(ds.corruption_order(self.client_counts, self.seed)[:self.corrupted]))

    @classmethod
    def from_mapping(cls, values: dict[str, Any]) -> "RunConfig":
        """Build from loosely typed values (config files, CLI flags)."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            name = key.replace("-", "_")
            if name not in known:
                raise ConfigurationError(f"unknown config field {key!r}")
            default = getattr(cls, name, None) if name != "counts" else None
            try:
                kwargs[name] = _coerce(name, raw, default)
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"config field {key!r}: cannot parse {raw!r}") from exc
        return cls(**kwargs)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


_TUPLE_FIELDS = ("counts", "down_filters", "corrupt_ids", "dilate_classes")


def _coerce(name, raw, default):
    if raw is None:
        return None
    if name in _TUPLE_FIELDS:
        if isinstance(raw, str):
            raw = [v for v in raw.replace(",", " ").split()]
        return tuple(int(v) for v in raw)
    if name == "batchnorm":
        if isinstance(raw, str):
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return raw.lower() in ("1", "true", "yes", "on")
        return bool(raw)
    if isinstance(default, bool):
        return bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return str(raw)


# ---------------------------------------------------------------------------
# log


class TrainingLog:
    """Ordered event records; written as JSON lines."""

    def __init__(self, records: list[dict] | None = None):
        self.records: list[dict] = list(records or [])

    def add(self, event: str, **fields) -> dict:
        rec = {"event": event, **fields}
        self.records.append(rec)
        return rec

    def select(self, event: str, **match) -> list[dict]:
        return [r for r in self.records if r["event"] == event
                and all(r.get(k) == v for k, v in match.items())]

    def lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True) for r in self.records]

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")

    @classmethod
    def read(cls, path) -> "TrainingLog":
        return cls([json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()])

    def digest(self) -> str:
        return hashlib.sha256(("\n".join(self.lines()) + "\n").encode()).hexdigest()


def best_index(values: Sequence[float]) -> int:
    """Index of the minimum; earliest wins ties."""
    best, idx = math.inf, -1
    for i, v in enumerate(values):
        if v < best:
            best, idx = v, i
    if idx < 0:
        raise DataError("no finite values to select from")
    return idx


# ---------------------------------------------------------------------------
# setup


def build_network(config: RunConfig) -> split.SplitPartition:
    net = nn.unet((1, config.image_size, config.image_size), config.down_filters,
                  config.bottleneck or None, ds.NUM_CLASSES, batchnorm=config.batchnorm)
    if config.split == "default":
        return split.default_split(net)
    fe_end, be_start = (int(v) for v in config.split.split(","))
    return split.SplitPartition(net, fe_end, be_start)


def build_data(config: RunConfig):
    """``(clients, test)`` with the configured clients corrupted."""
    samples = ds.generate_synthetic(config.seed, config.samples, (config.image_size, config.image_size),
                                    noise=config.noise)
    clients, test = ds.partition_clients(samples, config.client_counts, config.seed)
    spec = ds.CorruptionSpec(config.radius, classes=tuple(config.dilate_classes))
    bad = set(config.corrupted_ids())
    clients = [ds.corrupt_client(c, spec) if c.client_id in bad else c for c in clients]
    return clients, test


@dataclass
class TrainingState:
    client: ParamVector
    server: ParamVector
    momentum: agg.MomentumState = field(default_factory=agg.MomentumState)


@dataclass
class RunResult:
    client: ParamVector
    server: ParamVector
    best_epoch: int
    log: TrainingLog
    report: metrics.Report
    network: nn.Network
    history: list[tuple[ParamVector, ParamVector]] = field(default_factory=list, repr=False)

    @property
    def model(self) -> ParamVector:
        return ParamVector.merge(self.client, self.server, order=self.network.param_names())


def _floats(values) -> list[float]:
    return [float(v) for v in values]


def _snapshot_digest(snaps: Sequence[agg.ClientSnapshot]) -> str:
    h = hashlib.sha256()
    for s in snaps:
        h.update(s.client_params.to_bytes())
        h.update(s.server_params.to_bytes())
    return h.hexdigest()


def global_epoch(g: int, config: RunConfig, server: SplitServer, clients: Sequence[SplitClient],
                 state: TrainingState, trainlog: TrainingLog) -> tuple[TrainingState, float]:
    """One pass over all clients plus aggregation; returns ``(new_state, global_val_loss)``."""
    E = config.local_epochs
    server.clear_uploads()
    server.set_global(state.client, state.server)
    results = []
    for client in clients:
        res = client.local_training(g, E)
        stats = agg.loss_bound(res.sample_losses, config.std_ddof)
        trainlog.add("local", g=g, client=res.client_id, train_losses=_floats(res.train_losses),
                     val_losses=_floats(res.val_losses), best_epoch=res.best_epoch,
                     sample_losses=_floats(res.sample_losses),
                     mean=stats.mean, std=stats.std, bound=stats.bound)
        results.append((res, stats))
    snaps = [server.uploads[c.cid] for c in clients]
    snap_digest = _snapshot_digest(snaps)
    m = [c.data.train_count for c in clients]
    n = [c.data.validation_count for c in clients]

    try:
        momentum = state.momentum
        if config.strategy == "qa-splitfed":
            bt = [s.bound for _, s in results]
            d_t = agg.data_scores(m, "training")
            c1, s1, w1 = agg.model_updates(snaps, bt, d_t)
            trainlog.add("aggregate", g=g, phase=1, strategy=config.strategy, bounds=_floats(bt),
                         q=_floats(w1.q), d=_floats(d_t.scores), r=_floats(w1.r),
                         snapshots=snap_digest)
            server.set_global(c1, s1)
            bv = []
            for client in clients:
                losses = client.validate(g, 1, E)
                st = agg.loss_bound(losses, config.std_ddof)
                trainlog.add("validate", g=g, phase=1, client=client.cid, sample_losses=_floats(losses),
                             mean=st.mean, std=st.std, bound=st.bound)
                bv.append(st.bound)
            if _snapshot_digest(snaps) != snap_digest:
                raise DataError("client snapshots changed between the two averaging phases")
            d_v = agg.data_scores(n, "validation")
            c2, s2, w2 = agg.model_updates(snaps, bv, d_v)
            trainlog.add("aggregate", g=g, phase=2, strategy=config.strategy, bounds=_floats(bv),
                         q=_floats(w2.q), d=_floats(d_v.scores), r=_floats(w2.r),
                         snapshots=snap_digest)
        else:
            if config.strategy == "naive":
                c2, s2, w2 = agg.naive_average(snaps)
            elif config.strategy == "fedavg":
                c2, s2, w2 = agg.fedavg(snaps, m)
            else:
                c2, s2, w2, momentum = agg.fedavg_m(snaps, m, momentum)
            trainlog.add("aggregate", g=g, phase=1, strategy=config.strategy, r=_floats(w2.r),
                         snapshots=snap_digest)
    except Exception as exc:
        raise type(exc)(f"global epoch {g}: {exc}") from exc

    server.set_global(c2, s2)
    client_means, digests = [], []
    for client in clients:
        losses = client.validate(g, 2, E)
        client_means.append(math.fsum(losses) / len(losses))
        digests.append(client.params.digest())
        trainlog.add("validate", g=g, phase=2, client=client.cid, sample_losses=_floats(losses),
                     digest=digests[-1])
    global_val = math.fsum(client_means) / len(client_means)
    trainlog.add("global", g=g, val_loss=global_val, client_digest=c2.digest(), server_digest=s2.digest())
    return TrainingState(c2, s2, momentum), global_val


def run(config: RunConfig, keep_history: bool = False) -> RunResult:
    """Train ``config.global_epochs`` global epochs and evaluate the best one on the test set."""
    partition = build_network(config)
    client_data, test = build_data(config)
    init_client, init_server = partition.init_params(np.random.default_rng([config.seed, 0x1417]))
    opt = nn.OptimizerState(config.optimizer, config.learning_rate, config.momentum)
    server = SplitServer(partition, opt)
    trainlog = TrainingLog()
    trainlog.add("config", **{k: (list(v) if isinstance(v, tuple) else v)
                              for k, v in config.to_dict().items()},
                 corrupted_clients=list(config.corrupted_ids()),
                 train_counts=[c.train_count for c in client_data],
                 validation_counts=[c.validation_count for c in client_data],
                 test_count=len(test))

    with ExitStack() as stack:
        if config.transport == "tcp":
            tcp = stack.enter_context(TcpServer(server))
            def make_transport():
                t = TcpTransport(tcp.server_address)
                stack.callback(t.close)
                return t
        else:
            def make_transport():
                return InProcessTransport(server)
        clients = [SplitClient(d, partition, make_transport(), opt, config.batch_size, config.seed)
                   for d in client_data]
        state = TrainingState(init_client, init_server, agg.MomentumState(config.server_momentum))
        history, val_losses = [], []
        for g in range(config.global_epochs):
            state, val = global_epoch(g, config, server, clients, state, trainlog)
            history.append((state.client, state.server))
            val_losses.append(val)
            log.info("global epoch %d: validation loss %.5f", g, val)

    best = best_index(val_losses)
    best_client, best_server = history[best]
    net, merged = split.assemble_monolithic(partition, best_client, best_server)
    report = metrics.evaluate_global(net, merged, test)
    trainlog.add("best", g=best, val_loss=val_losses[best])
    trainlog.add("report", **report.as_row())
    return RunResult(best_client, best_server, best, trainlog, report, net,
                     history if keep_history else [])
