"""Small numpy network core with manual backpropagation.

Tensors are float64 numpy arrays in NCHW layout ``(batch, channels, height,
width)``; masks are integer ``(batch, height, width)`` arrays. A :class:`Network` is a validated list of :class:`LayerSpec`
entries; ``concat`` layers append the output of an earlier layer along the
channel axis, which is how U-Net skip connections are expressed.

Execution is available over any contiguous layer range so that the split
pipeline and the monolithic network run exactly the same arithmetic.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, ProtocolError
from .params import ParamVector

LAYER_KINDS = ("conv2d", "relu", "maxpool2x2", "upsample2x2", "batchnorm", "concat",
               "argmax-output")
BN_EPS = 1e-5

# When set, every layer output is checked for NaN/Inf.
DEBUG_FINITE = False


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0        # conv2d output channels
    kernel: int = 3         # conv2d kernel size (odd, "same" zero padding)
    source: int = -1        # concat: index of the layer whose output is appended
    bias: bool = True       # conv2d only

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if self.filters < 1:
                raise ConfigurationError("conv2d needs filters >= 1")
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise ConfigurationError(f"conv2d kernel must be odd, got {self.kernel}")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv2d", "batchnorm")


def conv(filters: int, kernel: int = 3, bias: bool = True) -> LayerSpec:
    return LayerSpec("conv2d", filters=filters, kernel=kernel, bias=bias)


def bn() -> LayerSpec:
    return LayerSpec("batchnorm")


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool() -> LayerSpec:
    return LayerSpec("maxpool2x2")


def upsample() -> LayerSpec:
    return LayerSpec("upsample2x2")


def concat(source: int) -> LayerSpec:
    return LayerSpec("concat", source=source)


def argmax_output() -> LayerSpec:
    return LayerSpec("argmax-output")


def _segment_prefix(index: int, kind: str) -> str:
    return f"{index:03d}.{kind}"


@dataclass(frozen=True)
class Network:
    """Ordered layer list plus the per-sample input shape ``(C, H, W)``.

    Construction validates inter-layer shapes; a bad layer raises
    :class:`ConfigurationError` naming its index and kind.
    """

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    shapes: tuple[tuple[int, int, int], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError(f"input shape must be (C, H, W) positive, got {self.input_shape}")
        shapes = []
        c, h, w = self.input_shape
        for i, layer in enumerate(self.layers):
            where = f"layer {i} ({layer.kind})"
            if layer.kind == "conv2d":
                c = layer.filters
            elif layer.kind == "maxpool2x2":
                if h % 2 or w % 2:
                    raise ConfigurationError(f"{where}: odd spatial size {h}x{w}")
                h, w = h // 2, w // 2
            elif layer.kind == "upsample2x2":
                h, w = h * 2, w * 2
            elif layer.kind == "concat":
                if not 0 <= layer.source < i:
                    raise ConfigurationError(f"{where}: source {layer.source} must precede it")
                sc, sh, sw = shapes[layer.source]
                if (sh, sw) != (h, w):
                    raise ConfigurationError(
                        f"{where}: skip from layer {layer.source} is {sh}x{sw}, expected {h}x{w}")
                c = c + sc
            elif layer.kind == "argmax-output":
                if i != len(self.layers) - 1:
                    raise ConfigurationError(f"{where}: argmax output must be the last layer")
            shapes.append((c, h, w))
        object.__setattr__(self, "shapes", tuple(shapes))

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return self.shapes[-1] if self.shapes else self.input_shape

    def shape_before(self, index: int) -> tuple[int, int, int]:
        return self.shapes[index - 1] if index > 0 else self.input_shape

    @property
    def num_classes(self) -> int:
        return self.output_shape[0]

    @property
    def skip_routes(self) -> list[tuple[int, int]]:
        """``(source_layer, concat_layer)`` pairs."""
        return [(l.source, i) for i, l in enumerate(self.layers) if l.kind == "concat"]

    def param_layout(self, start: int = 0, stop: int | None = None) -> list[tuple[str, tuple[int, ...]]]:
        stop = len(self.layers) if stop is None else stop
        out = []
        for i in range(start, stop):
            layer = self.layers[i]
            prefix = _segment_prefix(i, layer.kind)
            cin = self.shape_before(i)[0]
            if layer.kind == "conv2d":
                k = layer.kernel
                out.append((f"{prefix}.kernel", (layer.filters, cin, k, k)))
                if layer.bias:
                    out.append((f"{prefix}.bias", (layer.filters,)))
            elif layer.kind == "batchnorm":
                out.append((f"{prefix}.scale", (cin,)))
                out.append((f"{prefix}.shift", (cin,)))
        return out

    def param_names(self, start: int = 0, stop: int | None = None) -> list[str]:
        return [n for n, _ in self.param_layout(start, stop)]

    def init_params(self, rng: np.random.Generator | int | None = None,
                    start: int = 0, stop: int | None = None) -> ParamVector:
        """He-uniform conv kernels, zero biases, unit BN scale, zero BN shift."""
        rng = np.random.default_rng(rng)
        segs = []
        for name, shape in self.param_layout(start, stop):
            if name.endswith(".kernel"):
                fan_in = shape[1] * shape[2] * shape[3]
                limit = math.sqrt(6.0 / fan_in)
                segs.append((name, rng.uniform(-limit, limit, size=shape)))
            elif name.endswith(".scale"):
                segs.append((name, np.ones(shape)))
            else:
                segs.append((name, np.zeros(shape)))
        return ParamVector(segs)

    def check_params(self, params: ParamVector, start: int = 0, stop: int | None = None) -> None:
        layout = self.param_layout(start, stop)
        for name, shape in layout:
            if name not in params:
                raise ConfigurationError(f"missing parameter segment {name!r}")
            if params[name].shape != shape:
                raise ConfigurationError(
                    f"segment {name!r} has shape {params[name].shape}, expected {shape}")


# ---------------------------------------------------------------------------
# layer kernels
#
# Internally activations are channel-major, (C, B, H, W). A "same" k x k
# convolution is evaluated on the zero-padded grid flattened to one axis, so
# every kernel tap is a contiguous slice of that buffer and the layer reduces
# to one matrix product. Rows/columns of the padded output grid that do not
# correspond to real pixels are discarded.


def _pad_flat(x, k, front=0):
    """Zero-pad spatially and flatten (C, B, H, W) -> (C, front + n + tail)."""
    c, b, h, w = x.shape
    p = k // 2
    hp, wp = h + 2 * p, w + 2 * p
    n = b * hp * wp
    buf = np.zeros((c, front + n + (k - 1) * (wp + 1)))
    buf[:, front:front + n].reshape(c, b, hp, wp)[:, :, p:p + h, p:p + w] = x
    return buf, n, wp


def _gather_taps(buf, k, n, wp, reverse=False):
    c = buf.shape[0]
    cols = np.empty((k * k, c, n))
    for t in range(k * k):
        off = (t // k) * wp + t % k
        cols[k * k - 1 - t if reverse else t] = buf[:, off:off + n]
    return cols.reshape(k * k * c, n)


def _conv_forward(x, kernel, bias):
    f, c, k, _ = kernel.shape
    _, b, h, w = x.shape
    xpf, n, wp = _pad_flat(x, k)
    cols = _gather_taps(xpf, k, n, wp)
    y = (kernel.transpose(0, 2, 3, 1).reshape(f, -1) @ cols).reshape(f, b, -1, wp)[:, :, :h, :w]
    if bias is not None:
        y = y + bias[:, None, None, None]
    else:
        y = np.ascontiguousarray(y)
    return y, cols


def _conv_backward(g, cols, kernel):
    f, c, k, _ = kernel.shape
    _, b, h, w = g.shape
    p = k // 2
    hp, wp = h + 2 * p, w + 2 * p
    n = b * hp * wp
    span = (k - 1) * (wp + 1)
    # output gradient placed on the padded grid, shifted so that the
    # transposed convolution reads it through non-negative offsets
    gpf = np.zeros((f, span + n + span))
    gpf[:, span:span + n].reshape(f, b, hp, wp)[:, :, :h, :w] = g
    g2 = gpf[:, span:span + n]
    kmat = kernel.transpose(0, 2, 3, 1).reshape(f, -1)
    dkernel = np.ascontiguousarray((g2 @ cols.T).reshape(f, k, k, c).transpose(0, 3, 1, 2))
    dbias = g.sum(axis=(1, 2, 3))
    if f < c:
        gcols = _gather_taps(gpf, k, n, wp, reverse=True)
        dxp = kernel.transpose(1, 2, 3, 0).reshape(c, -1) @ gcols
    else:
        dcols = (kmat.T @ g2).reshape(k * k, c, n)
        dxp = np.zeros((c, n + span))
        for t in range(k * k):
            off = (t // k) * wp + t % k
            dxp[:, off:off + n] += dcols[t]
    dx = dxp[:, :n].reshape(c, b, hp, wp)[:, :, p:p + h, p:p + w]
    return np.ascontiguousarray(dx), dkernel, dbias


def _bn_forward(x, scale, shift):
    c = x.shape[0]
    flat = x.reshape(c, -1)
    mean = flat.mean(axis=1)
    var = flat.var(axis=1)
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[:, None, None, None]) * inv_std[:, None, None, None]
    return xhat * scale[:, None, None, None] + shift[:, None, None, None], (xhat, inv_std)


def _bn_backward(g, cache, scale):
    xhat, inv_std = cache
    c = g.shape[0]
    n = g[0].size
    g2, xh2 = g.reshape(c, -1), xhat.reshape(c, -1)
    dscale = (g2 * xh2).sum(axis=1)
    dshift = g2.sum(axis=1)
    dxhat = g2 * scale[:, None]
    dx = (inv_std / n)[:, None] * (n * dxhat - dxhat.sum(axis=1)[:, None]
                                   - xh2 * (dxhat * xh2).sum(axis=1)[:, None])
    return dx.reshape(g.shape), dscale, dshift


_POOL_TAPS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _pool_forward(x):
    taps = np.stack([x[:, :, i::2, j::2] for i, j in _POOL_TAPS])
    idx = taps.argmax(axis=0)   # first maximum wins on ties
    return np.take_along_axis(taps, idx[None], axis=0)[0], idx


def _pool_backward(g, idx):
    c, b, h2, w2 = g.shape
    dx = np.zeros((c, b, 2 * h2, 2 * w2))
    for t, (i, j) in enumerate(_POOL_TAPS):
        dx[:, :, i::2, j::2] = np.where(idx == t, g, 0.0)
    return dx


def _upsample_forward(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def _upsample_backward(g):
    c, b, h, w = g.shape
    return g.reshape(c, b, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def _to_internal(t: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(t, dtype=np.float64).transpose(1, 0, 2, 3))


def _to_public(t: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(t.transpose(1, 0, 2, 3))


# ---------------------------------------------------------------------------
# range execution

_cache_ids = itertools.count()


@dataclass
class ForwardCache:
    """Activation record of one forward call over ``layers[start:stop]``."""

    network: Network
    start: int
    stop: int
    input_shape: tuple[int, ...]
    records: list
    carried_sources: tuple[int, ...]
    export_sources: tuple[int, ...]
    token: int = field(default_factory=lambda: next(_cache_ids))
    consumed: bool = False


def _check_finite(t: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(t)):
        raise DataError(f"non-finite values after {where}")


def export_sources(network: Network, stop: int) -> tuple[int, ...]:
    """Skip sources (layer indices < stop) consumed by a concat at or after ``stop``."""
    return tuple(sorted({s for s, d in network.skip_routes if s < stop <= d}))


def forward_range(network: Network, params: ParamVector, x: np.ndarray, start: int = 0,
                  stop: int | None = None, carried: dict[int, np.ndarray] | None = None):
    """Run ``layers[start:stop]`` on the NCHW batch ``x``.

    ``carried`` holds skip tensors produced before ``start``. Returns
    ``(output, exports, cache)`` where ``exports`` maps every skip source
    below ``stop`` that a later layer still needs to its tensor.
    """
    stop = len(network) if stop is None else stop
    if not 0 <= start <= stop <= len(network):
        raise ConfigurationError(f"bad layer range [{start}, {stop})")
    x = np.asarray(x, dtype=np.float64)
    expected = network.shape_before(start)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ConfigurationError(
            f"input to layer {start} has shape {x.shape}, expected (batch,) + {expected}")
    carried = dict(carried or {})
    needed_before = {s for s, d in network.skip_routes if s < start <= d}
    missing = needed_before - set(carried)
    if missing:
        raise ConfigurationError(f"missing skip tensors from layers {sorted(missing)}")
    for s, t in carried.items():
        if t.shape[1:] != network.shapes[s] or t.shape[0] != x.shape[0]:
            raise ConfigurationError(f"carried skip tensor from layer {s} has shape {t.shape}")
    outputs = {s: _to_internal(t) for s, t in carried.items()}
    sources = {s for s, _ in network.skip_routes}
    records = []
    h = _to_internal(x)
    for i in range(start, stop):
        layer = network.layers[i]
        prefix = _segment_prefix(i, layer.kind)
        if layer.kind == "conv2d":
            bias = params[f"{prefix}.bias"] if layer.bias else None
            h, rec = _conv_forward(h, params[f"{prefix}.kernel"], bias)
        elif layer.kind == "batchnorm":
            h, rec = _bn_forward(h, params[f"{prefix}.scale"], params[f"{prefix}.shift"])
        elif layer.kind == "relu":
            rec = h > 0
            h = h * rec
        elif layer.kind == "maxpool2x2":
            h, rec = _pool_forward(h)
        elif layer.kind == "upsample2x2":
            h, rec = _upsample_forward(h), None
        elif layer.kind == "concat":
            rec = h.shape[0]
            h = np.concatenate([h, outputs[layer.source]], axis=0)
        else:  # argmax-output: logits pass through
            rec = None
        if DEBUG_FINITE:
            _check_finite(h, f"layer {i} ({layer.kind})")
        if i in sources:
            outputs[i] = h
        records.append(rec)
    exports = {s: _to_public(outputs[s]) for s in export_sources(network, stop)}
    cache = ForwardCache(network, start, stop, x.shape, records, tuple(sorted(carried)),
                         tuple(exports))
    return _to_public(h), exports, cache


def backward_range(network: Network, params: ParamVector, cache: ForwardCache,
                   grad_output: np.ndarray, grad_exports: dict[int, np.ndarray] | None = None):
    """Backpropagate through the range recorded in ``cache``.

    Returns ``(param_grads, grad_input, grad_carried)``; ``grad_carried``
    holds gradients for skip tensors that entered the range via ``carried``.
    """
    if cache.network is not network and cache.network != network:
        raise ProtocolError("forward cache belongs to a different network")
    if cache.consumed:
        raise ProtocolError(f"forward cache {cache.token} already consumed")
    grad_exports = dict(grad_exports or {})
    unexpected = set(grad_exports) - set(cache.export_sources)
    if unexpected:
        raise ProtocolError(f"gradients for unexpected skip sources {sorted(unexpected)}")
    start, stop = cache.start, cache.stop
    out_shape = (cache.input_shape[0],) + network.shapes[stop - 1] if stop > start else cache.input_shape
    grad_output = np.asarray(grad_output, dtype=np.float64)
    if grad_output.shape != out_shape:
        raise ProtocolError(f"output gradient shape {grad_output.shape}, expected {out_shape}")
    cache.consumed = True
    skip_grads = {s: _to_internal(g) for s, g in grad_exports.items()}
    grads: dict[str, np.ndarray] = {}
    g = _to_internal(grad_output)
    for i in range(stop - 1, start - 1, -1):
        layer = network.layers[i]
        rec = cache.records[i - start]
        prefix = _segment_prefix(i, layer.kind)
        if i in skip_grads:
            g = g + skip_grads.pop(i)
        if layer.kind == "conv2d":
            g, dk, db = _conv_backward(g, rec, params[f"{prefix}.kernel"])
            grads[f"{prefix}.kernel"] = dk
            if layer.bias:
                grads[f"{prefix}.bias"] = db
        elif layer.kind == "batchnorm":
            g, ds, dsh = _bn_backward(g, rec, params[f"{prefix}.scale"])
            grads[f"{prefix}.scale"] = ds
            grads[f"{prefix}.shift"] = dsh
        elif layer.kind == "relu":
            g = g * rec
        elif layer.kind == "maxpool2x2":
            g = _pool_backward(g, rec)
        elif layer.kind == "upsample2x2":
            g = _upsample_backward(g)
        elif layer.kind == "concat":
            main_c = rec
            gs = g[main_c:]
            skip_grads[layer.source] = skip_grads[layer.source] + gs if layer.source in skip_grads else gs
            g = g[:main_c]
    grad_carried = {s: _to_public(skip_grads.pop(s)) for s in cache.carried_sources if s in skip_grads}
    param_grads = ParamVector((n, grads[n]) for n in network.param_names(start, stop))
    return param_grads, _to_public(g), grad_carried


def forward(network: Network, params: ParamVector, x: np.ndarray):
    """Full forward pass; returns ``(output, cache)``."""
    out, _, cache = forward_range(network, params, x)
    return out, cache


def backward(network: Network, params: ParamVector, cache: ForwardCache, output_gradient: np.ndarray):
    """Full backward pass; returns ``(param_gradient, input_gradient)``."""
    pg, gx, _ = backward_range(network, params, cache, output_gradient)
    return pg, gx


def predict(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the class axis; the lowest class index wins ties."""
    return np.argmax(logits, axis=1)


# ---------------------------------------------------------------------------
# loss


def _check_mask(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if logits.ndim < 2 or mask.shape != logits.shape[:1] + logits.shape[2:]:
        raise DataError(f"mask shape {mask.shape} does not match logits {logits.shape}")
    if not np.issubdtype(mask.dtype, np.integer):
        if not np.all(mask == np.round(mask)):
            raise DataError("mask must hold integer class ids")
        mask = mask.astype(np.int64)
    c = logits.shape[1]
    if mask.size and (mask.min() < 0 or mask.max() >= c):
        raise DataError(f"mask class ids must lie in [0, {c}), got [{mask.min()}, {mask.max()}]")
    return mask


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def pixel_losses(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-pixel cross-entropy, shape ``mask.shape``."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = _check_mask(logits, mask)
    logp = _log_softmax(logits)
    return -np.take_along_axis(logp, mask[:, None], axis=1)[:, 0]


def cross_entropy_loss(logits: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Pixel-mean softmax cross-entropy and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = _check_mask(logits, mask)
    logp = _log_softmax(logits)
    n = mask.size
    idx = mask[:, None]
    loss = -float(np.take_along_axis(logp, idx, axis=1).sum()) / n
    grad = np.exp(logp)
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=1) - 1.0, axis=1)
    return loss, grad / n


def per_sample_losses(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean pixel cross-entropy of each sample in the batch."""
    pl = pixel_losses(logits, mask)
    return pl.reshape(pl.shape[0], -1).mean(axis=1)


# ---------------------------------------------------------------------------
# optimizers


@dataclass(frozen=True)
class OptimizerState:
    kind: str = "sgd"                   # "sgd" or "sgd-momentum"
    learning_rate: float = 0.1
    momentum: float = 0.0
    velocity: ParamVector | None = None

    def __post_init__(self):
        if self.kind not in ("sgd", "sgd-momentum"):
            raise ConfigurationError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate < 0:
            raise ConfigurationError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")


def optimizer_step(state: OptimizerState, params: ParamVector,
                   grads: ParamVector) -> tuple[ParamVector, OptimizerState]:
    """One update; returns ``(new_params, new_state)``.

    sgd: ``p - lr * g``. sgd-momentum: ``v = m * v + g``, ``p - lr * v``.
    """
    params.check_compatible(grads, "parameters and gradients")
    if state.kind == "sgd":
        return ParamVector((n, p - state.learning_rate * grads[n]) for n, p in params.items()), state
    velocity = state.velocity if state.velocity is not None else params.zeros_like()
    params.check_compatible(velocity, "parameters and velocity")
    v = ParamVector((n, state.momentum * velocity[n] + grads[n]) for n in params)
    new = ParamVector((n, p - state.learning_rate * v[n]) for n, p in params.items())
    return new, replace(state, velocity=v)


# ---------------------------------------------------------------------------
# finite differences


def central_difference(fn: Callable[[ParamVector], float], params: ParamVector,
                       eps: float = 1e-5) -> ParamVector:
    """Central-difference gradient of a scalar function of ``params``."""
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    flat = params.flat()
    grad = np.empty_like(flat)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        up = fn(params.with_flat(flat))
        flat[j] = orig - eps
        down = fn(params.with_flat(flat))
        flat[j] = orig
        grad[j] = (up - down) / (2 * eps)
    return params.with_flat(grad)


def finite_difference_gradient(network: Network, params: ParamVector, x: np.ndarray,
                               mask: np.ndarray, eps: float = 1e-5) -> ParamVector:
    """Central-difference estimate of d(cross-entropy)/d(params)."""
    def loss(p):
        out, _ = forward(network, p, x)
        return cross_entropy_loss(out, mask)[0]
    return central_difference(loss, params, eps)


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max over scalars of ``|a - b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


# ---------------------------------------------------------------------------
# architectures


def unet(input_shape: Sequence[int] = (1, 32, 32), down_filters: Sequence[int] = (8, 16),
         bottleneck_filters: int | None = None, num_classes: int = 5, kernel: int = 3,
         batchnorm: bool = True) -> Network:
    """U-Net: conv blocks (2 x conv-BN-ReLU), max-pool down, upsample + skip concat up.

    Up blocks mirror ``down_filters`` in reverse. The bottleneck defaults to the
    deepest down-block width. Convs feeding a batchnorm carry no bias (it would
    be cancelled by the normalization). The last block is followed by a 1x1
    classifier conv and the argmax output.
    """
    layers: list[LayerSpec] = []

    def block(filters):
        for _ in range(2):
            layers.append(conv(filters, kernel, bias=not batchnorm))
            if batchnorm:
                layers.append(bn())
            layers.append(relu())

    skips = []
    for f in down_filters:
        block(f)
        skips.append(len(layers) - 1)
        layers.append(maxpool())
    block(bottleneck_filters or down_filters[-1])
    for f, src in zip(reversed(down_filters), reversed(skips)):
        layers.append(upsample())
        layers.append(concat(src))
        block(f)
    layers.append(conv(num_classes, kernel=1))
    layers.append(argmax_output())
    return Network(tuple(layers), tuple(input_shape))
