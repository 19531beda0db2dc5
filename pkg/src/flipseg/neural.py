"""A small sequential network engine in float64 numpy.

Tensors are laid out channel-first: ``(batch, channels, *spatial)`` with one to
three spatial axes.  Every layer implements ``forward(x) -> (y, cache)`` and
``backward(grad_y, cache) -> grad_x`` and accumulates parameter gradients into
``layer.grads``.
"""
from __future__ import annotations

import itertools
from typing import Iterable

import numpy as np

from .errors import ConfigError, FormatError, NumericError, StateError

MAGIC = b"FLNN1\n"


class Layer:
    kind = "layer"
    param_names: tuple[str, ...] = ()

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def manifest(self) -> str:
        return self.kind

    def output_shape(self, shape):
        return shape


class Conv(Layer):
    kind = "conv"
    param_names = ("W", "b")

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=0, ndim=2, rng=None):
        super().__init__()
        self.ndim = ndim
        self.kernel = (kernel,) * ndim if np.isscalar(kernel) else tuple(kernel)
        self.stride = int(stride)
        self.padding = int(padding)
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        fan_in = self.in_ch * int(np.prod(self.kernel))
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (self.out_ch, self.in_ch) + self.kernel)
        self.params["b"] = np.zeros(self.out_ch)
        self._slices = {}
        self.zero_grad()

    def manifest(self):
        return " ".join(map(str, [self.kind, self.ndim, self.in_ch, self.out_ch, *self.kernel,
                                  self.stride, self.padding]))

    def output_shape(self, shape):
        c, *sp = shape
        if c != self.in_ch:
            raise ConfigError(f"conv expects {self.in_ch} channels, got {c}")
        out = [(s + 2 * self.padding - k) // self.stride + 1 for s, k in zip(sp, self.kernel)]
        if len(sp) != self.ndim or min(out) < 1:
            raise ConfigError(f"conv kernel {self.kernel} does not fit spatial dims {tuple(sp)}")
        return (self.out_ch, *out)

    def _offsets(self, out_sp):
        key = tuple(out_sp)
        if key not in self._slices:
            s = self.stride
            self._slices[key] = [
                (j, tuple(slice(o, o + s * (n - 1) + 1, s) for o, n in zip(off, out_sp)))
                for j, off in enumerate(itertools.product(*[range(k) for k in self.kernel]))]
        return self._slices[key]

    def _w_matrix(self):
        # (out, in, *k) -> (out, K*in) with the channel index fastest, matching the column layout
        return np.moveaxis(self.params["W"], 1, -1).reshape(self.out_ch, -1)

    def forward(self, x):
        # Work channel-last internally: slice copies stay contiguous along channels, and the
        # channel-first view returned here keeps that memory order through elementwise layers.
        n, c = x.shape[:2]
        p = self.padding
        padded = tuple(s + 2 * p for s in x.shape[2:])
        xt = np.zeros((n,) + padded + (c,))
        xt[(slice(None),) + tuple(slice(p, p + s) for s in x.shape[2:])] = np.moveaxis(x, 1, -1)
        out_sp = tuple((q - k) // self.stride + 1 for q, k in zip(padded, self.kernel))
        kk = int(np.prod(self.kernel))
        cols = np.empty((n,) + out_sp + (kk, c))
        for j, sl in self._offsets(out_sp):
            cols[..., j, :] = xt[(slice(None),) + sl]
        cols = cols.reshape(-1, kk * c)
        y = cols @ self._w_matrix().T
        y += self.params["b"]
        y = np.moveaxis(y.reshape((n,) + out_sp + (self.out_ch,)), -1, 1)
        return y, (x.shape, cols)

    def backward(self, g, cache):
        x_shape, cols = cache
        n, c = x_shape[:2]
        out_sp = g.shape[2:]
        kk = int(np.prod(self.kernel))
        g_mat = np.moveaxis(g, 1, -1).reshape(-1, self.out_ch)
        dw = (g_mat.T @ cols).reshape((self.out_ch,) + self.kernel + (c,))
        self.grads["W"] += np.moveaxis(dw, -1, 1)
        self.grads["b"] += g_mat.sum(axis=0)
        dcols = (g_mat @ self._w_matrix()).reshape((n,) + out_sp + (kk, c))
        p = self.padding
        padded = tuple(s + 2 * p for s in x_shape[2:])
        dxt = np.zeros((n,) + padded + (c,))
        for j, sl in self._offsets(out_sp):
            dxt[(slice(None),) + sl] += dcols[..., j, :]
        dxt = dxt[(slice(None),) + tuple(slice(p, p + s) for s in x_shape[2:])]
        return np.moveaxis(dxt, -1, 1)


class Dense(Layer):
    kind = "dense"
    param_names = ("W", "b")

    def __init__(self, n_in, n_out, rng=None):
        super().__init__()
        self.n_in, self.n_out = int(n_in), int(n_out)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = rng.normal(0.0, np.sqrt(2.0 / self.n_in), (self.n_in, self.n_out))
        self.params["b"] = np.zeros(self.n_out)
        self.zero_grad()

    def manifest(self):
        return f"dense {self.n_in} {self.n_out}"

    def output_shape(self, shape):
        if tuple(shape) != (self.n_in,):
            raise ConfigError(f"dense expects ({self.n_in},), got {tuple(shape)}")
        return (self.n_out,)

    def forward(self, x):
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, g, x):
        self.grads["W"] += x.T @ g
        self.grads["b"] += g.sum(axis=0)
        return g @ self.params["W"].T


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0), x > 0

    def backward(self, g, mask):
        return g * mask


class MaxPool(Layer):
    """Non-overlapping max pooling; trailing cells that do not fill a window are dropped."""
    kind = "maxpool"

    def __init__(self, window=2):
        super().__init__()
        self.window = int(window)

    def manifest(self):
        return f"maxpool {self.window}"

    def output_shape(self, shape):
        c, *sp = shape
        out = [s // self.window for s in sp]
        if min(out) < 1:
            raise ConfigError(f"maxpool window {self.window} larger than spatial dims {tuple(sp)}")
        return (c, *out)

    def _offsets(self, sp):
        w = self.window
        out = [d // w for d in sp]
        for j, off in enumerate(itertools.product(range(w), repeat=len(sp))):
            yield j, (slice(None), slice(None)) + tuple(slice(o, o + w * n, w) for o, n in zip(off, out))

    def forward(self, x):
        best = arg = None
        for j, sl in self._offsets(x.shape[2:]):
            v = x[sl]
            if best is None:
                best, arg = v, np.zeros(v.shape, dtype=np.int8)
            else:
                arg = np.where(v > best, np.int8(j), arg)
                best = np.maximum(best, v)
        return best.copy() if best.base is not None else best, (x.shape, arg)

    def backward(self, g, cache):
        x_shape, arg = cache
        dx = np.zeros(x_shape)
        for j, sl in self._offsets(x_shape[2:]):
            dx[sl] = np.where(arg == j, g, 0.0)
        return dx


class GlobalAvgPool(Layer):
    kind = "gap"

    def output_shape(self, shape):
        return (shape[0],)

    def forward(self, x):
        axes = tuple(range(2, x.ndim))
        return x.mean(axis=axes), x.shape

    def backward(self, g, x_shape):
        count = int(np.prod(x_shape[2:]))
        return np.broadcast_to(g.reshape(g.shape + (1,) * (len(x_shape) - 2)), x_shape) / count


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, g, x_shape):
        return g.reshape(x_shape)


class Cache:
    __slots__ = ("entries", "version", "owner")

    def __init__(self, entries, version, owner):
        self.entries, self.version, self.owner = entries, version, owner


class Sequential:
    """Ordered layer list with exact backprop.  ``version`` increments on every parameter update."""

    def __init__(self, layers: Iterable[Layer], input_shape=None):
        self.layers = list(layers)
        self.version = 0
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        if self.input_shape is not None:
            self.output_shape(self.input_shape)

    def output_shape(self, shape):
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(tuple(shape))
            except ConfigError as exc:
                raise ConfigError(f"layer {i} ({layer.kind}): {exc}") from None
        return shape

    def forward(self, x, keep_cache=True):
        x = np.asarray(x, dtype=np.float64)
        if self.input_shape is not None and x.shape[1:] != self.input_shape:
            raise ConfigError(f"layer 0 ({self.layers[0].kind}): input shape {x.shape[1:]} "
                              f"does not match expected {self.input_shape}")
        entries = []
        for i, layer in enumerate(self.layers):
            try:
                x, c = layer.forward(x)
            except ValueError as exc:
                raise ConfigError(f"layer {i} ({layer.kind}): {exc}") from None
            if keep_cache:
                entries.append(c)
        return x, Cache(entries, self.version, id(self)) if keep_cache else None

    def __call__(self, x):
        return self.forward(x, keep_cache=False)[0]

    def backward(self, grad, cache: Cache):
        if cache is None or cache.owner != id(self) or cache.version != self.version:
            raise StateError("stale cache: parameters changed since the forward pass")
        for layer, c in zip(reversed(self.layers), reversed(cache.entries)):
            grad = layer.backward(grad, c)
        return grad

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def parameters(self):
        """(layer index, name, array) for every parameter, in manifest order."""
        for i, layer in enumerate(self.layers):
            for name in layer.param_names:
                yield i, name, layer.params[name]

    def gradients(self):
        for layer in self.layers:
            for name in layer.param_names:
                yield layer.grads[name]

    def copy_from(self, other: "Sequential"):
        for (_, _, dst), (_, _, src) in zip(self.parameters(), other.parameters()):
            dst[...] = src
        self.version += 1

    def manifest(self) -> list[str]:
        return [layer.manifest() for layer in self.layers]


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient with respect to the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(labels)
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


class AdamW:
    """Adam with decoupled weight decay (decay applied to the weights, not the gradient)."""

    def __init__(self, nets, lr=1e-3, weight_decay=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.nets = list(nets)
        self.lr, self.weight_decay = lr, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for _, _, p in self._params()]
        self.v = [np.zeros_like(p) for _, _, p in self._params()]

    def _params(self):
        for net in self.nets:
            yield from net.parameters()

    def _grads(self):
        for net in self.nets:
            yield from net.gradients()

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        grads = list(self._grads())
        for g in grads:
            if not np.all(np.isfinite(g)):
                bad = int(np.sum(~np.isfinite(g)))
                raise NumericError(f"non-finite gradient (step {self.step_count}, "
                                   f"{bad} of {g.size} entries)")
        self.step_count += 1
        t = self.step_count
        bc1 = 1 - self.beta1 ** t
        bc2 = 1 - self.beta2 ** t
        for (_, _, p), g, m, v in zip(self._params(), grads, self.m, self.v):
            p *= 1 - lr * self.weight_decay
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        for net in self.nets:
            net.version += 1


# --------------------------------------------------------------------------- serialization

def _parse_layer(tokens: list[str]) -> Layer:
    kind, args = tokens[0], [int(t) for t in tokens[1:]]
    if kind == "conv":
        ndim, cin, cout = args[:3]
        kernel = tuple(args[3:3 + ndim])
        stride, padding = args[3 + ndim:5 + ndim]
        return Conv(cin, cout, kernel, stride, padding, ndim)
    if kind == "dense":
        return Dense(*args)
    if kind == "maxpool":
        return MaxPool(*args)
    simple = {"relu": ReLU, "gap": GlobalAvgPool, "flatten": Flatten}
    if kind in simple and not args:
        return simple[kind]()
    raise FormatError(f"unknown layer '{' '.join(tokens)}'")


def save_networks(path, nets: dict[str, Sequential]) -> None:
    """FLNN1 layout: magic line, ASCII manifest terminated by ``end``, then raw <f8 payload.

    Manifest::

        net <name> <n_layers> [<input dims...>]
        <one line per layer>
        ...
        end

    Payload: for each net and each parametric layer in manifest order, ``W`` then
    ``b`` as little-endian float64 in C order.
    """
    lines = []
    for name, net in nets.items():
        if " " in name:
            raise ConfigError(f"network name may not contain spaces: {name!r}")
        dims = " ".join(map(str, net.input_shape)) if net.input_shape else ""
        lines.append(f"net {name} {len(net.layers)} {dims}".rstrip())
        lines.extend(net.manifest())
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for net in nets.values():
            for _, _, p in net.parameters():
                fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_networks(path) -> dict[str, Sequential]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(MAGIC):
        raise FormatError("not an FLNN1 model file", 0)
    pos = len(MAGIC)
    specs = []
    while True:
        end = buf.find(b"\n", pos)
        if end < 0:
            raise FormatError("unterminated manifest", pos)
        line = buf[pos:end].decode("ascii", errors="replace").split()
        if not line:
            raise FormatError("empty manifest line", pos)
        if line[0] == "end":
            pos = end + 1
            break
        if line[0] != "net":
            raise FormatError(f"expected 'net' header, got {line[0]!r}", pos)
        name, n_layers = line[1], int(line[2])
        input_shape = tuple(int(t) for t in line[3:]) or None
        layers = []
        pos = end + 1
        for _ in range(n_layers):
            end = buf.find(b"\n", pos)
            if end < 0:
                raise FormatError("truncated manifest", pos)
            try:
                layers.append(_parse_layer(buf[pos:end].decode("ascii").split()))
            except (ValueError, TypeError, IndexError):
                raise FormatError("malformed layer line", pos) from None
            pos = end + 1
        specs.append((name, layers, input_shape))
    nets = {}
    for name, layers, input_shape in specs:
        net = Sequential(layers, input_shape)
        for _, _, p in net.parameters():
            nbytes = p.size * 8
            chunk = buf[pos:pos + nbytes]
            if len(chunk) < nbytes:
                raise FormatError(f"truncated payload for network '{name}'", pos + len(chunk))
            p[...] = np.frombuffer(chunk, dtype="<f8").reshape(p.shape)
            pos += nbytes
        nets[name] = net
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after payload", pos)
    return nets


# --------------------------------------------------------------------------- reference architectures

def conv_block(cin, cout, ndim, rng):
    return [Conv(cin, cout, 3, 1, 1, ndim, rng), ReLU(), MaxPool(2)]


def classifier_net(ndim=2, input_size=32, channels=(8, 16, 32), seed=0) -> Sequential:
    rng = np.random.default_rng(seed)
    layers = []
    cin = 1
    for c in channels:
        layers += conv_block(cin, c, ndim, rng)
        cin = c
    layers += [GlobalAvgPool(), Dense(cin, 2, rng)]
    return Sequential(layers, (1,) + (input_size,) * ndim)
