"""Small numpy network core: layer specs, batched forward and reverse-mode
backward passes, SGD/Adam updates and a binary checkpoint container.

A network is a shared trunk followed by named heads, each a layer stack.
Parameters live in a flat ``dict`` keyed ``"<block>.<layer>.<W|b>"`` where
block is ``trunk`` or the head name. Every array op here is on
:data:`DTYPE`; inputs always carry a leading batch dimension.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

Params = Dict[str, np.ndarray]
GradientRecord = Dict[str, np.ndarray]


# -- layer specs --------------------------------------------------------------

@dataclass(frozen=True)
class ImageInput:
    """uint8 HWC images to scaled float CHW."""

    scale: float = 1.0 / 255.0
    kind = "image"


@dataclass(frozen=True)
class Conv2D:
    """Valid (unpadded) 2-D convolution."""

    out_channels: int
    kernel: int
    stride: int = 1
    kind = "conv"


@dataclass(frozen=True)
class Dense:
    units: int
    kind = "dense"


@dataclass(frozen=True)
class ReLU:
    kind = "relu"


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"


@dataclass(frozen=True)
class Softmax:
    kind = "softmax"


_LAYER_KINDS = {cls.kind: cls for cls in (ImageInput, Conv2D, Dense, ReLU, Flatten, Softmax)}
Layer = Union[ImageInput, Conv2D, Dense, ReLU, Flatten, Softmax]


def layer_to_dict(layer) -> dict:
    d = {"kind": layer.kind}
    d.update({k: getattr(layer, k) for k in layer.__dataclass_fields__})
    return d


def layer_from_dict(d: Mapping) -> Layer:
    d = dict(d)
    try:
        cls = _LAYER_KINDS[d.pop("kind")]
    except KeyError as exc:
        raise ValueError(f"unknown layer kind {exc}") from None
    return cls(**d)


def _out_shape(layer, shape: Tuple[int, ...]) -> Tuple[int, ...]:
    if isinstance(layer, ImageInput):
        if len(shape) != 3:
            raise ValueError(f"image input expects (H, W, C), got {shape}")
        h, w, c = shape
        return (c, h, w)
    if isinstance(layer, Conv2D):
        if len(shape) != 3:
            raise ValueError(f"conv expects (C, H, W), got {shape}")
        c, h, w = shape
        if layer.kernel > h or layer.kernel > w or layer.stride < 1 or layer.out_channels < 1:
            raise ValueError(f"conv {layer} does not fit input {shape}")
        return (layer.out_channels, (h - layer.kernel) // layer.stride + 1,
                (w - layer.kernel) // layer.stride + 1)
    if isinstance(layer, Dense):
        if len(shape) != 1:
            raise ValueError(f"dense expects a flat input, got {shape}; add Flatten")
        if layer.units < 1:
            raise ValueError("dense needs at least one unit")
        return (layer.units,)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    return shape


def _param_shapes(layer, in_shape) -> Dict[str, Tuple[int, ...]]:
    if isinstance(layer, Conv2D):
        return {"W": (layer.out_channels, in_shape[0], layer.kernel, layer.kernel),
                "b": (layer.out_channels,)}
    if isinstance(layer, Dense):
        return {"W": (in_shape[0], layer.units), "b": (layer.units,)}
    return {}


@dataclass(frozen=True)
class NetworkSpec:
    """Trunk layers plus named output heads.

    Parameters
    ----------
    input_shape : per-sample input shape (no batch dimension).
    trunk : layers shared by all heads.
    heads : ``(name, layers)`` pairs; each head reads the trunk output.
    """

    input_shape: Tuple[int, ...]
    trunk: Tuple[Layer, ...]
    heads: Tuple[Tuple[str, Tuple[Layer, ...]], ...]
    _shapes: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(x) for x in self.input_shape))
        object.__setattr__(self, "trunk", tuple(self.trunk))
        object.__setattr__(self, "heads", tuple((str(n), tuple(ls)) for n, ls in self.heads))
        if not self.heads:
            raise ValueError("a network needs at least one head")
        names = [n for n, _ in self.heads]
        if len(set(names)) != len(names) or "trunk" in names:
            raise ValueError(f"head names must be unique and not 'trunk': {names}")
        for i, layer in enumerate(self.trunk + tuple(l for _, ls in self.heads for l in ls)):
            if isinstance(layer, ImageInput) and not (i == 0 and self.trunk and layer is self.trunk[0]):
                raise ValueError("ImageInput may only be the first trunk layer")
        object.__setattr__(self, "_shapes", self._infer())

    def _infer(self):
        params = {}
        shape = self.input_shape
        for i, layer in enumerate(self.trunk):
            for k, s in _param_shapes(layer, shape).items():
                params[f"trunk.{i}.{k}"] = s
            shape = _out_shape(layer, shape)
        trunk_out = shape
        outputs = {}
        for name, layers in self.heads:
            shape = trunk_out
            for i, layer in enumerate(layers):
                for k, s in _param_shapes(layer, shape).items():
                    params[f"{name}.{i}.{k}"] = s
                shape = _out_shape(layer, shape)
            outputs[name] = shape
        return {"params": params, "trunk_out": trunk_out, "outputs": outputs}

    @property
    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return dict(self._shapes["params"])

    @property
    def output_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return dict(self._shapes["outputs"])

    @property
    def head_names(self) -> Tuple[str, ...]:
        return tuple(n for n, _ in self.heads)

    def param_count(self) -> int:
        return int(sum(np.prod(s) for s in self._shapes["params"].values()))

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "trunk": [layer_to_dict(l) for l in self.trunk],
                "heads": [[n, [layer_to_dict(l) for l in ls]] for n, ls in self.heads]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkSpec":
        return cls(tuple(d["input_shape"]), tuple(layer_from_dict(l) for l in d["trunk"]),
                   tuple((n, tuple(layer_from_dict(l) for l in ls)) for n, ls in d["heads"]))


def conv_network(head_sizes: Mapping[str, int], input_shape=(64, 64, 3)) -> NetworkSpec:
    """The default image network: two conv layers, one 256-unit hidden layer,
    and one linear layer per head."""
    trunk = (ImageInput(), Conv2D(16, 8, 4), ReLU(), Conv2D(32, 4, 2), ReLU(), Flatten(),
             Dense(256), ReLU())
    return NetworkSpec(input_shape, trunk, tuple((n, (Dense(k),)) for n, k in head_sizes.items()))


def mlp_network(head_sizes: Mapping[str, int], input_dim: int, hidden=(64,)) -> NetworkSpec:
    trunk = []
    for h in hidden:
        trunk += [Dense(h), ReLU()]
    return NetworkSpec((input_dim,), tuple(trunk),
                       tuple((n, (Dense(k),)) for n, k in head_sizes.items()))


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> Params:
    """Fan-in scaled uniform weights ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, zero biases."""
    params = {}
    for name, shape in spec.param_shapes.items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=DTYPE)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(DTYPE)
    return params


def check_params(spec: NetworkSpec, params: Mapping[str, np.ndarray]):
    expected = spec.param_shapes
    if set(params) != set(expected):
        raise ValueError(f"parameter names differ from spec: {sorted(set(params) ^ set(expected))}")
    for k, s in expected.items():
        if tuple(params[k].shape) != s:
            raise ValueError(f"parameter {k} has shape {params[k].shape}, spec wants {s}")


# -- kernels --------------------------------------------------------------------

def _im2col(x, k, stride):
    # (N, C, H, W) -> (N, Ho, Wo, C*k*k)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * k * k)


def _col2im(dcols, x_shape, k, stride):
    n, c, h, w = x_shape
    _, ho, wo, _ = dcols.shape
    d = np.ascontiguousarray(dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2))
    dx = np.zeros(x_shape, dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, i, j]
    return dx


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _layer_forward(layer, p, x):
    if isinstance(layer, ImageInput):
        return x.transpose(0, 3, 1, 2).astype(DTYPE) * layer.scale, None
    if isinstance(layer, Conv2D):
        cols = _im2col(x, layer.kernel, layer.stride)
        w = p["W"].reshape(layer.out_channels, -1)
        y = cols @ w.T + p["b"]
        return y.transpose(0, 3, 1, 2), (cols, x.shape)
    if isinstance(layer, Dense):
        return x @ p["W"] + p["b"], x
    if isinstance(layer, ReLU):
        return np.maximum(x, 0.0), x > 0
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1), x.shape
    if isinstance(layer, Softmax):
        y = softmax(x)
        return y, y
    raise TypeError(f"not a layer: {layer!r}")


def _layer_backward(layer, p, cache, dy, need_dx):
    """Returns ``(dx, {param: grad})``; dx is None when not needed."""
    if isinstance(layer, ImageInput):
        return None, {}
    if isinstance(layer, Conv2D):
        cols, x_shape = cache
        n, co, ho, wo = dy.shape
        dyt = dy.transpose(0, 2, 3, 1).reshape(-1, co)
        dw = (dyt.T @ cols.reshape(-1, cols.shape[-1])).reshape(p["W"].shape)
        grads = {"W": dw, "b": dyt.sum(axis=0)}
        if not need_dx:
            return None, grads
        dcols = (dyt @ p["W"].reshape(co, -1)).reshape(n, ho, wo, -1)
        return _col2im(dcols, x_shape, layer.kernel, layer.stride), grads
    if isinstance(layer, Dense):
        grads = {"W": cache.T @ dy, "b": dy.sum(axis=0)}
        return (dy @ p["W"].T if need_dx else None), grads
    if isinstance(layer, ReLU):
        return dy * cache, {}
    if isinstance(layer, Flatten):
        return dy.reshape(cache), {}
    if isinstance(layer, Softmax):
        y = cache
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True)), {}
    raise TypeError(f"not a layer: {layer!r}")


def _layer_params(params, prefix, i):
    return {"W": params.get(f"{prefix}.{i}.W"), "b": params.get(f"{prefix}.{i}.b")}


# -- forward / backward -----------------------------------------------------------

@dataclass
class ForwardCache:
    """Saved activations from :func:`forward`, consumed by :func:`backward`."""

    batch: int
    trunk: List
    heads: Dict[str, List]
    trunk_out_shape: Tuple[int, ...]


def forward(spec: NetworkSpec, params: Params, x: np.ndarray) -> Tuple[Dict[str, np.ndarray], ForwardCache]:
    """Evaluate every head on a batch ``x`` of shape ``(N,) + spec.input_shape``."""
    x = np.asarray(x)
    if x.ndim != len(spec.input_shape) + 1 or tuple(x.shape[1:]) != spec.input_shape:
        raise ValueError(f"input shape {x.shape} does not match (N,) + {spec.input_shape}")
    if not (spec.trunk and isinstance(spec.trunk[0], ImageInput)):
        x = x.astype(DTYPE, copy=False)
    trunk_cache = []
    h = x
    for i, layer in enumerate(spec.trunk):
        h, c = _layer_forward(layer, _layer_params(params, "trunk", i), h)
        trunk_cache.append(c)
    outputs, head_cache = {}, {}
    for name, layers in spec.heads:
        o = h
        caches = []
        for i, layer in enumerate(layers):
            o, c = _layer_forward(layer, _layer_params(params, name, i), o)
            caches.append(c)
        outputs[name] = o
        head_cache[name] = caches
    return outputs, ForwardCache(x.shape[0], trunk_cache, head_cache, h.shape)


def backward(spec: NetworkSpec, params: Params, cache: ForwardCache,
             grad_outputs: Mapping[str, np.ndarray]) -> GradientRecord:
    """Gradients of a scalar loss given ``dLoss/dOutput`` for some heads.

    Heads missing from ``grad_outputs`` contribute nothing.
    """
    unknown = set(grad_outputs) - set(spec.head_names)
    if unknown:
        raise ValueError(f"unknown heads: {sorted(unknown)}")
    grads = {k: None for k in spec.param_shapes}
    dh = np.zeros(cache.trunk_out_shape, dtype=DTYPE)
    for name, layers in spec.heads:
        if name not in grad_outputs:
            continue
        d = np.asarray(grad_outputs[name], dtype=DTYPE)
        for i in range(len(layers) - 1, -1, -1):
            d, g = _layer_backward(layers[i], _layer_params(params, name, i), cache.heads[name][i], d, True)
            for k, v in g.items():
                grads[f"{name}.{i}.{k}"] = v
        dh += d
    d = dh
    # no input gradient is needed at or below the first layer with parameters
    first = next((i for i, l in enumerate(spec.trunk) if isinstance(l, (Conv2D, Dense))), len(spec.trunk))
    for i in range(len(spec.trunk) - 1, first - 1, -1):
        d, g = _layer_backward(spec.trunk[i], _layer_params(params, "trunk", i), cache.trunk[i], d,
                               need_dx=i > first)
        for k, v in g.items():
            grads[f"trunk.{i}.{k}"] = v
    for k, s in spec.param_shapes.items():
        if grads[k] is None:
            grads[k] = np.zeros(s, dtype=DTYPE)
    return grads


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: GradientRecord, max_norm: Optional[float]) -> Tuple[GradientRecord, float]:
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def all_finite(arrays: Mapping[str, np.ndarray]) -> bool:
    return all(np.isfinite(a).all() for a in arrays.values())


# -- optimizers -------------------------------------------------------------------

@dataclass(frozen=True)
class SGD:
    lr: float


@dataclass(frozen=True)
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class OptimizerState:
    step: int = 0
    m: Optional[Dict[str, np.ndarray]] = None
    v: Optional[Dict[str, np.ndarray]] = None


def init_optimizer(rule, params: Params) -> OptimizerState:
    if isinstance(rule, Adam):
        return OptimizerState(0, {k: np.zeros_like(p) for k, p in params.items()},
                              {k: np.zeros_like(p) for k, p in params.items()})
    return OptimizerState(0)


def apply_update(params: Params, grads: GradientRecord, state: OptimizerState, rule
                 ) -> Tuple[Params, OptimizerState]:
    """One optimizer step. Inputs are left untouched; new arrays are returned."""
    if set(params) != set(grads):
        raise ValueError("gradient record does not match parameters")
    if isinstance(rule, SGD):
        return {k: p - rule.lr * grads[k] for k, p in params.items()}, OptimizerState(state.step + 1)
    if isinstance(rule, Adam):
        t = state.step + 1
        m = {k: rule.beta1 * state.m[k] + (1 - rule.beta1) * grads[k] for k in params}
        v = {k: rule.beta2 * state.v[k] + (1 - rule.beta2) * grads[k] * grads[k] for k in params}
        c1 = 1 - rule.beta1 ** t
        c2 = 1 - rule.beta2 ** t
        new = {k: p - rule.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + rule.eps) for k, p in params.items()}
        return new, OptimizerState(t, m, v)
    raise TypeError(f"unknown update rule {rule!r}")


# -- checkpoints --------------------------------------------------------------------
#
# layout: MAGIC | u32 version | u64 header length | header JSON | tensors | sha256
# tensors are little-endian float64 in header order.

MAGIC = b"LBNNCKPT"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    """Base class for checkpoint problems."""


class CorruptCheckpointError(CheckpointError):
    """The file is not a readable checkpoint (bad magic, version, length or digest)."""


class SpecMismatchError(CheckpointError):
    """The checkpoint holds a different network than the one requested."""


def checkpoint_bytes(spec: NetworkSpec, params: Params, meta: Optional[Mapping] = None) -> bytes:
    check_params(spec, params)
    names = list(spec.param_shapes)
    header = json.dumps({"spec": spec.to_dict(), "meta": dict(meta or {}),
                         "tensors": [[n, list(params[n].shape)] for n in names],
                         "dtype": "<f8"}, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, CHECKPOINT_VERSION, len(header)) + header
    body += b"".join(np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in names)
    return body + hashlib.sha256(body).digest()


def parse_checkpoint(data: bytes, expected_spec: Optional[NetworkSpec] = None
                     ) -> Tuple[NetworkSpec, Params, dict]:
    if len(data) < _PREFIX.size or data[:8] != MAGIC:
        raise CorruptCheckpointError("corrupt checkpoint: bad magic bytes")
    _, version, hlen = _PREFIX.unpack_from(data)
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpointError(f"corrupt checkpoint: unsupported format version {version}")
    if len(data) < _PREFIX.size + hlen + 32:
        raise CorruptCheckpointError("corrupt checkpoint: truncated")
    body, digest = data[:-32], data[-32:]
    try:
        header = json.loads(data[_PREFIX.size:_PREFIX.size + hlen])
        spec = NetworkSpec.from_dict(header["spec"])
        tensors = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"corrupt checkpoint: unreadable header ({exc})") from None
    need = _PREFIX.size + hlen + 8 * sum(int(np.prod(s)) for _, s in tensors)
    if len(body) != need:
        raise CorruptCheckpointError("corrupt checkpoint: truncated" if len(body) < need
                                     else "corrupt checkpoint: trailing bytes")
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError("corrupt checkpoint: checksum mismatch")
    params, off = {}, _PREFIX.size + hlen
    for name, shape in tensors:
        count = int(np.prod(shape))
        params[name] = np.frombuffer(body, dtype="<f8", count=count, offset=off).astype(DTYPE).reshape(shape)
        off += 8 * count
    try:
        check_params(spec, params)
    except ValueError as exc:
        raise CorruptCheckpointError(f"corrupt checkpoint: {exc}") from None
    if expected_spec is not None and expected_spec.to_dict() != spec.to_dict():
        raise SpecMismatchError("checkpoint network does not match the expected spec")
    return spec, params, header["meta"]


def save_checkpoint(target: Union[str, BinaryIO], spec: NetworkSpec, params: Params,
                    meta: Optional[Mapping] = None):
    data = checkpoint_bytes(spec, params, meta)
    if hasattr(target, "write"):
        target.write(data)
    else:
        with open(target, "wb") as fh:
            fh.write(data)


def load_checkpoint(source: Union[str, BinaryIO], expected_spec: Optional[NetworkSpec] = None
                    ) -> Tuple[NetworkSpec, Params, dict]:
    if hasattr(source, "read"):
        data = source.read()
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    return parse_checkpoint(data, expected_spec)
