"""Convolutional feature network: forward pass, FC2 features, FC fine-tuning.

Tensors are channels-last.  Convolution kernels have shape
``(k, k, C_in, C_out)`` and are applied as cross-correlation (no flip);
fully connected weights have shape ``(in, out)`` and act on the row-major
flattening of the ``(H, W, C)`` input.

Weights file layout (all little-endian)::

    b"DTW1"  u32 layer_count
    per parameterized layer:
        u8  type code (1 = conv, 2 = fully connected)
        u32 ndim, then ndim x u32 kernel dims
        f32 kernel data, row-major
        f32 bias data, dims[-1] values
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"DTW1"
CODE_CONV = 1
CODE_FC = 2
CHUNK = 8


class ShapeError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class MaxPool:
    kernel: int
    stride: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class FullyConnected:
    out_dim: int


@dataclass(frozen=True)
class Softmax:
    pass


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_size: int
    channels: int = 3

    def __post_init__(self):
        self.shapes()  # raises on inconsistent chains

    def shapes(self) -> list[tuple]:
        """Output shape (without batch axis) of every layer."""
        shape: tuple = (self.input_size, self.input_size, self.channels)
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise ShapeError(f"layer {i} (Conv) needs a spatial input, got {shape}")
                h, w, _ = shape
                ho = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
                wo = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
                if ho < 1 or wo < 1:
                    raise ShapeError(f"layer {i} (Conv) produces an empty map from {shape}")
                shape = (ho, wo, layer.out_channels)
            elif isinstance(layer, MaxPool):
                if len(shape) != 3:
                    raise ShapeError(f"layer {i} (MaxPool) needs a spatial input, got {shape}")
                h, w, c = shape
                ho = (h - layer.kernel) // layer.stride + 1
                wo = (w - layer.kernel) // layer.stride + 1
                if ho < 1 or wo < 1:
                    raise ShapeError(f"layer {i} (MaxPool) produces an empty map from {shape}")
                shape = (ho, wo, c)
            elif isinstance(layer, FullyConnected):
                shape = (layer.out_dim,)
            elif isinstance(layer, (ReLU, Softmax)):
                pass
            else:
                raise ShapeError(f"layer {i}: unknown layer type {layer!r}")
            out.append(shape)
        return out

    def fc_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, FullyConnected)]

    def feature_index(self) -> int:
        """Index of the layer whose output is the FC2 feature vector."""
        fcs = self.fc_indices()
        if len(fcs) < 2:
            raise ShapeError("network needs at least two fully connected layers")
        idx = fcs[1]
        if idx + 1 < len(self.layers) and isinstance(self.layers[idx + 1], ReLU):
            idx += 1
        return idx

    def trunk_end(self) -> int:
        """Number of leading layers before the first fully connected layer."""
        return self.fc_indices()[0] if self.fc_indices() else len(self.layers)

    @property
    def feature_dim(self) -> int:
        return self.layers[self.fc_indices()[1]].out_dim

    @property
    def has_classifier_head(self) -> bool:
        fcs = self.fc_indices()
        return (len(fcs) >= 3 and self.layers[fcs[-1]].out_dim == 2
                and isinstance(self.layers[-1], Softmax))


def default_spec(patch_size: int = 64, finetune: bool = False) -> NetworkSpec:
    """Five conv+pool stages then FC1(256), FC2(128) and optionally FC3(2)+softmax."""
    layers: list = []
    for c in (16, 32, 32, 64, 64):
        layers += [Conv(c, 3, 1, 1), ReLU(), MaxPool(2, 2)]
    layers += [FullyConnected(256), ReLU(), FullyConnected(128), ReLU()]
    if finetune:
        layers += [FullyConnected(2), Softmax()]
    return NetworkSpec(tuple(layers), patch_size, 3)


# ---------------------------------------------------------------------------
# Weights


class Weights:
    """Per-layer ``(kernel, bias)`` pairs, ``None`` for parameter-free layers."""

    def __init__(self, params: list):
        self.params = params

    def copy(self) -> "Weights":
        return Weights([None if p is None else (p[0].copy(), p[1].copy()) for p in self.params])

    def __len__(self):
        return len(self.params)

    def __getitem__(self, i):
        return self.params[i]

    def equals(self, other: "Weights") -> bool:
        if len(self) != len(other):
            return False
        for a, b in zip(self.params, other.params):
            if (a is None) != (b is None):
                return False
            if a is not None and not (np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])):
                return False
        return True


def _param_shapes(spec: NetworkSpec) -> list:
    shapes = [(spec.input_size, spec.input_size, spec.channels)] + spec.shapes()
    out = []
    for i, layer in enumerate(spec.layers):
        inp = shapes[i]
        if isinstance(layer, Conv):
            out.append(((layer.kernel, layer.kernel, inp[2], layer.out_channels), (layer.out_channels,)))
        elif isinstance(layer, FullyConnected):
            out.append(((int(np.prod(inp)), layer.out_dim), (layer.out_dim,)))
        else:
            out.append(None)
    return out


def init_weights(spec: NetworkSpec, rng: np.random.Generator) -> Weights:
    """He-normal kernels, zero biases; values are exactly representable in float32."""
    params = []
    for shp in _param_shapes(spec):
        if shp is None:
            params.append(None)
            continue
        kshape, bshape = shp
        fan_in = int(np.prod(kshape[:-1]))
        k = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=kshape)
        params.append((k.astype(np.float32).astype(np.float64), np.zeros(bshape)))
    return Weights(params)


def check_weights(spec: NetworkSpec, w: Weights) -> None:
    expected = _param_shapes(spec)
    if len(w) != len(expected):
        raise ShapeError(f"weights have {len(w)} layers, spec has {len(expected)}")
    for i, (exp, got) in enumerate(zip(expected, w.params)):
        layer = type(spec.layers[i]).__name__
        if exp is None:
            if got is not None:
                raise ShapeError(f"layer {i} ({layer}) takes no parameters")
            continue
        if got is None or got[0].shape != exp[0] or got[1].shape != exp[1]:
            got_shape = None if got is None else (got[0].shape, got[1].shape)
            raise ShapeError(f"layer {i} ({layer}) expects shapes {exp}, got {got_shape}")
        if not (np.all(np.isfinite(got[0])) and np.all(np.isfinite(got[1]))):
            raise ShapeError(f"layer {i} ({layer}) has non-finite parameters")


def weights_to_bytes(spec: NetworkSpec, w: Weights) -> bytes:
    check_weights(spec, w)
    chunks = []
    count = 0
    for layer, p in zip(spec.layers, w.params):
        if p is None:
            continue
        count += 1
        code = CODE_CONV if isinstance(layer, Conv) else CODE_FC
        k, b = p
        chunks.append(struct.pack("<BI", code, k.ndim))
        chunks.append(struct.pack(f"<{k.ndim}I", *k.shape))
        chunks.append(np.ascontiguousarray(k, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return MAGIC + struct.pack("<I", count) + b"".join(chunks)


def read_header(data: bytes) -> list[tuple[int, tuple]]:
    """Parse a DTW1 blob into ``[(type_code, kernel_shape), ...]``."""
    return [(code, shape) for code, shape, _, _ in _parse(data)]


def _parse(data: bytes):
    if data[:4] != MAGIC:
        raise ValueError("not a DTW1 weights file (bad magic)")
    (count,) = struct.unpack_from("<I", data, 4)
    pos = 8
    layers = []
    for i in range(count):
        try:
            code, ndim = struct.unpack_from("<BI", data, pos)
            pos += 5
            dims = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
        except struct.error:
            raise ValueError(f"truncated weights file at layer {i}") from None
        if code not in (CODE_CONV, CODE_FC):
            raise ValueError(f"layer {i}: unknown type code {code}")
        nk = int(np.prod(dims))
        nb = dims[-1] if dims else 0
        end = pos + 4 * (nk + nb)
        if end > len(data):
            raise ValueError(f"truncated weights file at layer {i}")
        k = np.frombuffer(data, dtype="<f4", count=nk, offset=pos).reshape(dims).astype(np.float64)
        b = np.frombuffer(data, dtype="<f4", count=nb, offset=pos + 4 * nk).astype(np.float64)
        pos = end
        layers.append((code, tuple(dims), k, b))
    return layers


def weights_from_bytes(data: bytes, spec: NetworkSpec) -> Weights:
    parsed = _parse(data)
    params = []
    it = iter(parsed)
    for i, layer in enumerate(spec.layers):
        if not isinstance(layer, (Conv, FullyConnected)):
            params.append(None)
            continue
        try:
            code, _, k, b = next(it)
        except StopIteration:
            raise ShapeError(f"weights file ends before layer {i} ({type(layer).__name__})") from None
        want = CODE_CONV if isinstance(layer, Conv) else CODE_FC
        if code != want:
            raise ShapeError(f"layer {i} ({type(layer).__name__}) got type code {code}")
        params.append((k, b))
    if next(it, None) is not None:
        raise ShapeError("weights file has more layers than the network")
    w = Weights(params)
    check_weights(spec, w)
    return w


def save_weights(path, spec: NetworkSpec, w: Weights) -> None:
    Path(path).write_bytes(weights_to_bytes(spec, w))


def load_weights(path, spec: NetworkSpec) -> Weights:
    return weights_from_bytes(Path(path).read_bytes(), spec)


# ---------------------------------------------------------------------------
# Forward pass


def _conv(x, kernel, bias, stride, pad):
    n, h, w, c = x.shape
    k = kernel.shape[0]
    if pad:
        xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
        xp[:, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    out = cols.reshape(-1, k * k * c) @ kernel.reshape(k * k * c, -1)
    out = out.reshape(n, ho, wo, -1)
    out += bias
    return out


def _maxpool(x, k, s):
    n, h, w, c = x.shape
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    out = None
    for i in range(k):
        for j in range(k):
            v = x[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
            out = v.copy() if out is None else np.maximum(out, v, out=out)
    return out


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _apply(layer, p, x):
    if isinstance(layer, Conv):
        return _conv(x, p[0].astype(x.dtype, copy=False), p[1].astype(x.dtype, copy=False),
                     layer.stride, layer.pad)
    if isinstance(layer, MaxPool):
        return _maxpool(x, layer.kernel, layer.stride)
    if isinstance(layer, ReLU):
        return np.maximum(x, 0)
    if isinstance(layer, FullyConnected):
        return x.reshape(x.shape[0], -1) @ p[0].astype(x.dtype, copy=False) + p[1].astype(x.dtype, copy=False)
    if isinstance(layer, Softmax):
        return _softmax(x.reshape(x.shape[0], -1))
    raise ShapeError(f"unknown layer {layer!r}")


def _prepare(spec: NetworkSpec, patches: np.ndarray, dtype) -> np.ndarray:
    x = np.asarray(patches)
    want = (spec.input_size, spec.input_size, spec.channels)
    if x.ndim != 4 or x.shape[1:] != want:
        raise ShapeError(f"layer 0 ({type(spec.layers[0]).__name__}) expects input {want}, got {x.shape[1:]}")
    x = x.astype(dtype, copy=True)
    x -= x.mean(axis=(1, 2, 3), keepdims=True)
    return x


def forward(spec: NetworkSpec, w: Weights, patch: np.ndarray) -> list[np.ndarray]:
    """All layer outputs for one patch (float64, after per-patch mean removal)."""
    check_weights(spec, w)
    x = _prepare(spec, np.asarray(patch)[None], np.float64)
    acts = []
    for layer, p in zip(spec.layers, w.params):
        x = _apply(layer, p, x)
        acts.append(x[0])
    return acts


def forward_batch(spec: NetworkSpec, w: Weights, patches: np.ndarray, stop: int | None = None,
                  dtype=np.float32, start: int = 0) -> np.ndarray:
    """Run layers ``start..stop`` (inclusive) on a batch; returns the last output.

    When ``start == 0`` the input is a batch of raw patches and is mean-centered
    per patch first.  Patches are processed in small chunks to stay cache-resident.
    """
    stop = len(spec.layers) - 1 if stop is None else stop
    if start == 0:
        x_all = _prepare(spec, patches, dtype)
    else:
        x_all = np.asarray(patches, dtype=dtype)
    outs = []
    layers = list(zip(spec.layers, w.params))[start:stop + 1]
    for s in range(0, x_all.shape[0], CHUNK):
        x = x_all[s:s + CHUNK]
        for layer, p in layers:
            x = _apply(layer, p, x)
        outs.append(x)
    if not outs:
        shape = ([(spec.input_size,) * 2 + (spec.channels,)] + spec.shapes())[stop + 1]
        return np.zeros((0,) + tuple(shape), dtype=dtype)
    return np.concatenate(outs, axis=0)


def extract_features(spec: NetworkSpec, w: Weights, patch: np.ndarray) -> np.ndarray:
    """FC2 activations (post-ReLU when the network places one there)."""
    return forward(spec, w, patch)[spec.feature_index()]


def extract_features_batch(spec: NetworkSpec, w: Weights, patches: np.ndarray,
                           dtype=np.float32) -> np.ndarray:
    return forward_batch(spec, w, patches, stop=spec.feature_index(), dtype=dtype).astype(np.float64)


# ---------------------------------------------------------------------------
# Fine-tuning of the fully connected head


def _head_layers(spec: NetworkSpec):
    start = spec.trunk_end()
    return start, list(spec.layers[start:])


def head_loss_and_grads(spec: NetworkSpec, w: Weights, trunk_out: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy of the head and its parameter gradients.

    ``trunk_out`` is the flattened output of the frozen conv trunk; ``labels``
    are class indices (1 = target, 0 = background).  Gradients are returned
    as a dict ``{layer_index: (dK, db)}``.
    """
    start, head = _head_layers(spec)
    if not spec.has_classifier_head:
        raise ShapeError("fine-tuning needs a network ending in FC(2) + Softmax")
    x = trunk_out.reshape(trunk_out.shape[0], -1)
    cache = []
    for off, layer in enumerate(head):
        idx = start + off
        cache.append(x)
        if isinstance(layer, Softmax):
            break
        x = _apply(layer, w.params[idx], x)
    logits = x
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    grads = {}
    # walk back from the layer feeding the softmax
    for off in range(len(head) - 2, -1, -1):
        idx = start + off
        layer = head[off]
        inp = cache[off]
        if isinstance(layer, FullyConnected):
            k, _ = w.params[idx]
            grads[idx] = (inp.T @ grad, grad.sum(axis=0))
            grad = grad @ k.T
        elif isinstance(layer, ReLU):
            grad = grad * (inp > 0)
    return loss, grads


def finetune_fc(spec: NetworkSpec, w: Weights, samples, epochs: int, lr: float,
                rng: np.random.Generator, batch_size: int = 32, momentum: float = 0.9):
    """Mini-batch SGD with momentum on the fully connected layers only.

    Conv tensors are shared, never written.  Returns ``(weights, losses)`` where
    ``losses[e]`` is the full-set cross-entropy after epoch ``e``.
    """
    check_weights(spec, w)
    if not spec.has_classifier_head:
        raise ShapeError("fine-tuning needs a network ending in FC(2) + Softmax")
    start = spec.trunk_end()
    patches = np.stack([s.patch for s in samples])
    labels = np.array([1 if s.label > 0 else 0 for s in samples])
    if start > 0:
        trunk = forward_batch(spec, w, patches, stop=start - 1, dtype=np.float64)
    else:
        trunk = _prepare(spec, patches, np.float64)
    trunk = trunk.reshape(len(samples), -1)

    new = Weights([p if (p is None or i < start) else (p[0].copy(), p[1].copy())
                   for i, p in enumerate(w.params)])
    velocity = {i: (np.zeros_like(p[0]), np.zeros_like(p[1]))
                for i, p in enumerate(new.params) if p is not None and i >= start}
    losses = []
    n = len(samples)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            loss, grads = head_loss_and_grads(spec, new, trunk[idx], labels[idx])
            if not math.isfinite(loss):
                raise DivergenceError(f"divergence: non-finite loss in epoch {epoch}")
            for i, (gk, gb) in grads.items():
                vk, vb = velocity[i]
                vk *= momentum
                vk -= lr * gk
                vb *= momentum
                vb -= lr * gb
                k, b = new.params[i]
                k += vk
                b += vb
        loss, _ = head_loss_and_grads(spec, new, trunk, labels)
        if not math.isfinite(loss):
            raise DivergenceError(f"divergence: non-finite loss in epoch {epoch}")
        losses.append(loss)
    return new, losses
