"""Client/server partition of a segmentation network and the messages crossing it.

The network is cut into a client front-end (FE), a server trunk and a client
back-end (BE). Activations flow FE -> server -> BE, gradients flow back. Skip
tensors produced on one side and consumed further along travel inside the
activation message; the server echoes FE skip tensors that the BE needs, so
no extra channel is required. Masks never leave the client: loss and its
gradient are computed in the BE.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import nn
from .errors import ConfigurationError, DataError, ProtocolError
from .params import ParamVector

MESSAGE_KINDS = ("fe-activations", "server-activations", "be-gradients", "server-gradients",
                 "weights-upload", "global-broadcast", "control")
_KIND_CODE = {k: i for i, k in enumerate(MESSAGE_KINDS)}

MAIN = "main"


def skip_name(source: int) -> str:
    return f"skip.{source:03d}"


def _skip_source(name: str) -> int:
    return int(name.split(".", 1)[1])


class Round(NamedTuple):
    global_epoch: int
    client_id: int
    local_epoch: int
    batch_id: int


@dataclass(frozen=True)
class BoundaryMessage:
    kind: str
    round: Round
    payload: ParamVector

    def __post_init__(self):
        if self.kind not in _KIND_CODE:
            raise ProtocolError(f"unknown message kind {self.kind!r}")
        object.__setattr__(self, "round", Round(*(int(v) for v in self.round)))


def control(round: Round, command: str, **values: float) -> BoundaryMessage:
    """Control message; the command travels as an empty segment named ``cmd.<command>``."""
    segs = [(f"cmd.{command}", np.zeros(0))]
    segs += [(f"arg.{k}", np.array([float(v)])) for k, v in sorted(values.items())]
    return BoundaryMessage("control", round, ParamVector(segs))


def control_command(msg: BoundaryMessage) -> tuple[str, dict[str, float]]:
    if msg.kind != "control":
        raise ProtocolError(f"expected a control message, got {msg.kind}")
    cmds = [n[4:] for n in msg.payload if n.startswith("cmd.")]
    if len(cmds) != 1:
        raise ProtocolError("control message must carry exactly one command")
    args = {n[4:]: float(v[0]) for n, v in msg.payload.items() if n.startswith("arg.")}
    return cmds[0], args


# ---------------------------------------------------------------------------
# wire encoding
#
#   4-byte magic, u8 kind, 4 x u32 round, u64 payload length, payload
#   (payload = ParamVector binary encoding, all integers little-endian)

MAGIC = b"QSF1"
_HEADER = struct.Struct("<4sBIIIIQ")
HEADER_SIZE = _HEADER.size


def encode_message(msg: BoundaryMessage) -> bytes:
    payload = msg.payload.to_bytes()
    return _HEADER.pack(MAGIC, _KIND_CODE[msg.kind], *msg.round, len(payload)) + payload


def decode_header(header: bytes) -> tuple[str, Round, int]:
    if len(header) != HEADER_SIZE:
        raise ProtocolError(f"message header must be {HEADER_SIZE} bytes, got {len(header)}")
    magic, code, g, c, e, b, length = _HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if code >= len(MESSAGE_KINDS):
        raise ProtocolError(f"unknown message kind code {code}")
    return MESSAGE_KINDS[code], Round(g, c, e, b), length


def decode_message(blob: bytes) -> BoundaryMessage:
    kind, rnd, length = decode_header(blob[:HEADER_SIZE])
    body = blob[HEADER_SIZE:]
    if len(body) != length:
        raise ProtocolError(f"payload length {len(body)} does not match header ({length})")
    try:
        payload = ParamVector.from_bytes(body)
    except DataError as exc:
        raise ProtocolError(f"malformed payload: {exc}") from exc
    return BoundaryMessage(kind, rnd, payload)


class RoundTracker:
    """Enforces strictly increasing round metadata per ``(client, kind)`` stream."""

    def __init__(self):
        self._last: dict[tuple[int, str], Round] = {}

    def check(self, msg: BoundaryMessage) -> None:
        key = (msg.round.client_id, msg.kind)
        last = self._last.get(key)
        if last is not None and not msg.round > last:
            raise ProtocolError(f"{msg.kind} round {tuple(msg.round)} does not follow {tuple(last)}")
        self._last[key] = msg.round


# ---------------------------------------------------------------------------
# partition


@dataclass(frozen=True)
class SplitPartition:
    """``network.layers[:fe_end]`` on the client, ``[fe_end:be_start]`` on the server,
    ``[be_start:]`` back on the client."""

    network: nn.Network
    fe_end: int
    be_start: int

    def __post_init__(self):
        n = len(self.network)
        if not 0 < self.fe_end <= self.be_start < n:
            raise ConfigurationError(
                f"need 0 < fe_end <= be_start < {n}, got fe_end={self.fe_end}, be_start={self.be_start}")
        if self.network.layers[self.fe_end - 1].kind == "concat" or not any(
                l.kind == "conv2d" for l in self.fe):
            raise ConfigurationError("front-end must contain the first convolution")
        if self.network.layers[-1].kind != "argmax-output":
            raise ConfigurationError("back-end must end with the argmax output layer")
        if not any(l.kind == "conv2d" for l in self.be):
            raise ConfigurationError("back-end must contain a convolution")

    @property
    def fe(self) -> tuple[nn.LayerSpec, ...]:
        return self.network.layers[:self.fe_end]

    @property
    def server(self) -> tuple[nn.LayerSpec, ...]:
        return self.network.layers[self.fe_end:self.be_start]

    @property
    def be(self) -> tuple[nn.LayerSpec, ...]:
        return self.network.layers[self.be_start:]

    @property
    def skip_routes(self) -> list[tuple[int, int]]:
        return self.network.skip_routes

    def fe_names(self) -> list[str]:
        return self.network.param_names(0, self.fe_end)

    def server_names(self) -> list[str]:
        return self.network.param_names(self.fe_end, self.be_start)

    def be_names(self) -> list[str]:
        return self.network.param_names(self.be_start)

    def client_names(self) -> list[str]:
        return self.fe_names() + self.be_names()

    def init_params(self, rng=None) -> tuple[ParamVector, ParamVector]:
        """``(client_params, server_params)``; client = FE + BE segments."""
        full = self.network.init_params(rng)
        return full.subset(self.client_names()), full.subset(self.server_names())

    def split_params(self, client: ParamVector):
        return client.subset(self.fe_names()), client.subset(self.be_names())

    def fe_boundary_shape(self) -> tuple[int, int, int]:
        return self.network.shape_before(self.fe_end)

    def server_boundary_shape(self) -> tuple[int, int, int]:
        return self.network.shape_before(self.be_start)


def default_split(network: nn.Network) -> SplitPartition:
    """FE = first conv (with its BN/ReLU); BE = last two convs plus the argmax output."""
    convs = [i for i, l in enumerate(network.layers) if l.kind == "conv2d"]
    if len(convs) < 3:
        raise ConfigurationError("default split needs at least three convolutions")
    fe_end = convs[0] + 1
    while fe_end < len(network) and network.layers[fe_end].kind in ("batchnorm", "relu"):
        fe_end += 1
    return SplitPartition(network, fe_end, convs[-2])


def assemble_monolithic(partition: SplitPartition, client_params: ParamVector | None = None,
                        server_params: ParamVector | None = None):
    """The unsplit network and, when given the parts, the merged parameters in layer order."""
    net = partition.network
    if client_params is None or server_params is None:
        return net, None
    merged = ParamVector.merge(client_params, server_params, order=net.param_names())
    return net, merged


# ---------------------------------------------------------------------------
# split pipeline


def _pack(main: np.ndarray, skips: dict[int, np.ndarray]) -> ParamVector:
    return ParamVector([(MAIN, main)] + [(skip_name(s), t) for s, t in sorted(skips.items())])


def _unpack(payload: ParamVector) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    if MAIN not in payload:
        raise ProtocolError("message payload has no main tensor")
    return payload[MAIN], {_skip_source(n): v for n, v in payload.items() if n != MAIN}


def _expect(msg: BoundaryMessage, kind: str) -> None:
    if msg.kind != kind:
        raise ProtocolError(f"expected {kind} message, got {msg.kind}")


def _check_boundary(partition, tensor, shape, what):
    if tensor.ndim != 4 or tensor.shape[1:] != shape:
        raise ProtocolError(f"{what} shape {tensor.shape} does not match boundary {shape}")


@dataclass
class StageCache:
    round: Round
    inner: nn.ForwardCache
    extra: object = None


def client_forward_fe(partition: SplitPartition, fe_params: ParamVector, images: np.ndarray,
                      round: Round):
    """Run the front-end; returns ``(fe-activations message, cache)``."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != partition.network.input_shape:
        raise ProtocolError(f"input batch shape {images.shape} does not match {partition.network.input_shape}")
    out, exports, cache = nn.forward_range(partition.network, fe_params, images, 0, partition.fe_end)
    msg = BoundaryMessage("fe-activations", round, _pack(out, exports))
    return msg, StageCache(msg.round, cache)


def server_forward(partition: SplitPartition, server_params: ParamVector, msg: BoundaryMessage,
                   tracker: RoundTracker | None = None):
    """Run the trunk on FE activations; returns ``(server-activations message, cache)``."""
    _expect(msg, "fe-activations")
    if tracker is not None:
        tracker.check(msg)
    x, carried = _unpack(msg.payload)
    _check_boundary(partition, x, partition.fe_boundary_shape(), "fe-activations")
    out, exports, cache = nn.forward_range(partition.network, server_params, x,
                                           partition.fe_end, partition.be_start, carried)
    reply = BoundaryMessage("server-activations", msg.round, _pack(out, exports))
    return reply, StageCache(msg.round, cache)


def client_forward_be(partition: SplitPartition, be_params: ParamVector, msg: BoundaryMessage,
                      masks: np.ndarray):
    """Run the back-end and the loss; returns ``(loss, prediction, per_sample_losses, cache)``."""
    _expect(msg, "server-activations")
    x, carried = _unpack(msg.payload)
    _check_boundary(partition, x, partition.server_boundary_shape(), "server-activations")
    logits, _, cache = nn.forward_range(partition.network, be_params, x, partition.be_start,
                                        carried=carried)
    masks = np.asarray(masks)
    if logits.shape[1] != partition.network.num_classes:
        raise ConfigurationError("class count mismatch between network and loss")
    if masks.shape != logits.shape[:1] + logits.shape[2:]:
        raise DataError(f"mask shape {masks.shape} does not match prediction {logits.shape[:1] + logits.shape[2:]}")
    loss, grad = nn.cross_entropy_loss(logits, masks)
    per_sample = nn.per_sample_losses(logits, masks)
    return loss, nn.predict(logits), per_sample, StageCache(msg.round, cache, grad)


def client_backward_be(partition: SplitPartition, be_params: ParamVector, cache: StageCache,
                       logit_gradient: np.ndarray | None = None):
    """Backpropagate the loss through the back-end; returns ``(be_grads, be-gradients message)``."""
    if cache is None:
        raise ProtocolError("no back-end cache for this exchange")
    g = cache.extra if logit_gradient is None else logit_gradient
    grads, gx, gcarried = nn.backward_range(partition.network, be_params, cache.inner, g)
    return grads, BoundaryMessage("be-gradients", cache.round, _pack(gx, gcarried))


def server_backward(partition: SplitPartition, server_params: ParamVector, cache: StageCache,
                    msg: BoundaryMessage):
    """Backpropagate BE gradients through the trunk; returns ``(server_grads, server-gradients message)``."""
    _expect(msg, "be-gradients")
    if cache is None:
        raise ProtocolError("no server cache for this exchange")
    if msg.round != cache.round:
        raise ProtocolError(f"be-gradients for round {tuple(msg.round)} but cache is for {tuple(cache.round)}")
    g, gexports = _unpack(msg.payload)
    grads, gx, gcarried = nn.backward_range(partition.network, server_params, cache.inner, g, gexports)
    return grads, BoundaryMessage("server-gradients", msg.round, _pack(gx, gcarried))


def client_backward_fe(partition: SplitPartition, fe_params: ParamVector, cache: StageCache,
                       msg: BoundaryMessage) -> ParamVector:
    """Finish backpropagation in the front-end; returns FE gradients."""
    _expect(msg, "server-gradients")
    if cache is None:
        raise ProtocolError("no front-end cache for this exchange")
    if msg.round != cache.round:
        raise ProtocolError(f"server-gradients for round {tuple(msg.round)} but cache is for {tuple(cache.round)}")
    g, gexports = _unpack(msg.payload)
    grads, _, _ = nn.backward_range(partition.network, fe_params, cache.inner, g, gexports)
    return grads
