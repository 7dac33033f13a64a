"""Server and client nodes of the split training protocol.

A client session with the server looks like::

    control begin        -> global-broadcast (current global client model)
    per batch:
      fe-activations     -> server-activations
      be-gradients       -> server-gradients        (training only)
    control mark-best    -> ack                     (after an improved validation epoch)
    control use-best     -> ack                     (roll the trunk back to the best epoch)
    weights-upload       -> ack                     (client weights of the best epoch)
    control end          -> ack

The server holds one session at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn, split
from .aggregation import ClientSnapshot
from .dataset import ClientDataset, stack
from .errors import DataError, ProtocolError
from .params import ParamVector
from .split import BoundaryMessage, Round, control


def _ack(msg: BoundaryMessage) -> BoundaryMessage:
    return control(msg.round, "ack")


class SplitServer:
    """Holds the trunk, trains it with one client at a time, and collects uploads."""

    def __init__(self, partition: split.SplitPartition, optimizer: nn.OptimizerState):
        self.partition = partition
        self.optimizer = optimizer
        self.global_client: ParamVector | None = None
        self.global_server: ParamVector | None = None
        self.trunk: ParamVector | None = None
        self.best: ParamVector | None = None
        self.opt_state: nn.OptimizerState | None = None
        self.active: int | None = None
        self.training = False
        self.cache: split.StageCache | None = None
        self.tracker = split.RoundTracker()
        self.uploads: dict[int, ClientSnapshot] = {}
        self.exchanges = 0

    def set_global(self, client_params: ParamVector, server_params: ParamVector) -> None:
        if self.active is not None:
            raise ProtocolError(f"cannot replace the global model while client {self.active} is active")
        self.global_client = client_params.copy()
        self.global_server = server_params.copy()

    def clear_uploads(self) -> None:
        self.uploads = {}

    def _require_session(self, msg: BoundaryMessage) -> None:
        if self.active is None:
            raise ProtocolError(f"{msg.kind} from client {msg.round.client_id} outside a session")
        if msg.round.client_id != self.active:
            raise ProtocolError(
                f"{msg.kind} from client {msg.round.client_id} while client {self.active} holds the server")

    def handle(self, msg: BoundaryMessage) -> BoundaryMessage:
        self.tracker.check(msg)
        if msg.kind == "control":
            return self._control(msg)
        self._require_session(msg)
        if msg.kind == "fe-activations":
            reply, self.cache = split.server_forward(self.partition, self.trunk, msg)
            self.exchanges += 1
            return reply
        if msg.kind == "be-gradients":
            if not self.training:
                raise ProtocolError("gradients sent during an evaluation session")
            if self.cache is None:
                raise ProtocolError("be-gradients without a preceding forward pass")
            grads, reply = split.server_backward(self.partition, self.trunk, self.cache, msg)
            self.cache = None
            self.trunk, self.opt_state = nn.optimizer_step(self.opt_state, self.trunk, grads)
            return reply
        if msg.kind == "weights-upload":
            msg.payload.check_compatible(self.global_client, "uploaded client model")
            server_part = self.best if self.best is not None else self.trunk
            self.uploads[self.active] = ClientSnapshot(self.active, msg.payload.copy(), server_part.copy())
            return _ack(msg)
        raise ProtocolError(f"server does not accept {msg.kind} messages")

    def _control(self, msg: BoundaryMessage) -> BoundaryMessage:
        cmd, args = split.control_command(msg)
        cid = msg.round.client_id
        if cmd == "begin":
            if self.active is not None:
                raise ProtocolError(f"client {cid} cannot start: client {self.active} is still active")
            if self.global_server is None:
                raise ProtocolError("no global model has been set")
            self.active = cid
            self.training = bool(args.get("train", 0.0))
            self.trunk = self.global_server.copy()
            self.best = None
            self.cache = None
            self.opt_state = nn.OptimizerState(self.optimizer.kind, self.optimizer.learning_rate,
                                               self.optimizer.momentum)
            return BoundaryMessage("global-broadcast", msg.round, self.global_client)
        self._require_session(msg)
        if cmd == "mark-best":
            self.best = self.trunk.copy()
        elif cmd == "use-best":
            if self.best is None:
                raise ProtocolError("use-best before any mark-best")
            self.trunk = self.best.copy()
        elif cmd == "end":
            self.active = None
            self.training = False
            self.cache = None
        else:
            raise ProtocolError(f"unknown control command {cmd!r}")
        return _ack(msg)


@dataclass
class LocalResult:
    client_id: int
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    sample_losses: list[float]


class SplitClient:
    """Holds a client's data plus its front-end and back-end weights."""

    def __init__(self, dataset: ClientDataset, partition: split.SplitPartition, transport,
                 optimizer: nn.OptimizerState, batch_size: int = 0, seed: int = 0):
        self.data = dataset
        self.cid = dataset.client_id
        self.partition = partition
        self.transport = transport
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.seed = seed
        self.fe: ParamVector | None = None
        self.be: ParamVector | None = None
        self._seq = 0
        self._train = stack(dataset.train)
        self._val = stack(dataset.validation)

    # -- protocol helpers ----------------------------------------------------
    def _round(self, g: int, local_epoch: int) -> Round:
        self._seq += 1
        return Round(g, self.cid, local_epoch, self._seq)

    def _request(self, msg: BoundaryMessage, expect: str) -> BoundaryMessage:
        reply = self.transport.request(msg)
        if reply.kind != expect:
            raise ProtocolError(f"client {self.cid}: expected {expect}, got {reply.kind}")
        if reply.round != msg.round:
            raise ProtocolError(f"client {self.cid}: reply round {tuple(reply.round)} != {tuple(msg.round)}")
        return reply

    def _begin(self, g: int, local_epoch: int, train: bool) -> None:
        reply = self._request(control(self._round(g, local_epoch), "begin", train=float(train)),
                              "global-broadcast")
        self.fe, self.be = self.partition.split_params(reply.payload)

    def _end(self, g: int, local_epoch: int) -> None:
        self._request(control(self._round(g, local_epoch), "end"), "control")

    @property
    def params(self) -> ParamVector:
        return ParamVector.merge(self.fe, self.be)

    def _batches(self, n: int, rng: np.random.Generator | None):
        if not self.batch_size or self.batch_size >= n:
            return [np.arange(n)]
        order = rng.permutation(n) if rng is not None else np.arange(n)
        return [order[i:i + self.batch_size] for i in range(0, n, self.batch_size)]

    def _evaluate(self, data, g: int, local_epoch: int) -> np.ndarray:
        images, masks = data
        losses = []
        for idx in self._batches(len(images), None):
            fe_msg, _ = split.client_forward_fe(self.partition, self.fe, images[idx], self._round(g, local_epoch))
            act = self._request(fe_msg, "server-activations")
            _, _, per_sample, _ = split.client_forward_be(self.partition, self.be, act, masks[idx])
            losses.append(per_sample)
        return np.concatenate(losses)

    # -- protocol phases -----------------------------------------------------
    def local_training(self, g: int, epochs: int) -> LocalResult:
        """Train from the global model for ``epochs`` epochs, keep the best-validation epoch,
        score the training set with it and upload the weights."""
        self._begin(g, 0, train=True)
        state = nn.OptimizerState(self.optimizer.kind, self.optimizer.learning_rate, self.optimizer.momentum)
        images, masks = self._train
        n = len(images)
        train_losses, val_losses = [], []
        best_val, best_epoch, best = math.inf, -1, None
        for e in range(epochs):
            rng = np.random.default_rng([self.seed, g, self.cid, e])
            total = []
            for idx in self._batches(n, rng):
                rnd = self._round(g, e)
                fe_msg, fe_cache = split.client_forward_fe(self.partition, self.fe, images[idx], rnd)
                act = self._request(fe_msg, "server-activations")
                loss, _, _, be_cache = split.client_forward_be(self.partition, self.be, act, masks[idx])
                if not math.isfinite(loss):
                    raise DataError(f"client {self.cid}: loss diverged (global epoch {g}, local epoch {e})")
                be_grads, gmsg = split.client_backward_be(self.partition, self.be, be_cache)
                sg = self._request(gmsg, "server-gradients")
                fe_grads = split.client_backward_fe(self.partition, self.fe, fe_cache, sg)
                params, state = nn.optimizer_step(state, self.params, ParamVector.merge(fe_grads, be_grads))
                self.fe, self.be = self.partition.split_params(params)
                total.append(loss * len(idx))
            train_losses.append(math.fsum(total) / n)
            val = self._evaluate(self._val, g, e)
            val_loss = math.fsum(val) / len(val)
            if not math.isfinite(val_loss):
                raise DataError(f"client {self.cid}: validation loss diverged (global epoch {g}, local epoch {e})")
            val_losses.append(val_loss)
            if val_loss < best_val:
                best_val, best_epoch, best = val_loss, e, self.params
                self._request(control(self._round(g, e), "mark-best"), "control")
        self.fe, self.be = self.partition.split_params(best)
        self._request(control(self._round(g, epochs), "use-best"), "control")
        sample_losses = self._evaluate(self._train, g, epochs)
        self._request(BoundaryMessage("weights-upload", self._round(g, epochs), self.params), "control")
        self._end(g, epochs)
        return LocalResult(self.cid, train_losses, val_losses, best_epoch, sample_losses.tolist())

    def validate(self, g: int, phase: int, epochs: int) -> list[float]:
        """Per-sample validation losses of the server's current global model."""
        le = epochs + phase
        self._begin(g, le, train=False)
        losses = self._evaluate(self._val, g, le)
        self._end(g, le)
        return losses.tolist()
