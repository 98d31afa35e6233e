"""Convolution, normalisation, linear, pooling and resize layers.

Layers hold their parameters as leaf :class:`~attnseg.tensor.Tensor` objects
with ``requires_grad=True``. :class:`Module` provides recursive parameter
discovery, train/eval switching and checkpoint I/O.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, FormatError
from .tensor import (
    DTYPE,
    Function,
    Tensor,
    as_tensor,
    read_tensor,
    record_switch,
    write_tensor,
)


def Parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Minimal container: attributes that are parameters, modules or lists of
    modules are discovered in definition order."""

    training: bool = True
    _buffer_names: tuple[str, ...] = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update((n, b) for n, b in self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        expected = set(params) | {n for n, _ in self.named_buffers()}
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise ContractError(
                f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(unexpected)[:5]}"
            )
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != p.data.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.data.shape}")
            p.data = arr.copy()
        self._load_buffers(state, "")

    def _load_buffers(self, state, prefix):
        for name in self._buffer_names:
            getattr(self, name)[...] = state[prefix + name]
        for name, child in self.children():
            child._load_buffers(state, prefix + name + ".")


def parameter_count(module: Module) -> int:
    """Number of learnable scalars (running statistics excluded)."""
    return sum(p.size for p in module.parameters())


# ----------------------------------------------------------------- init


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_parameters(layer: Module, rng_seed) -> Module:
    """Re-draw every conv/linear weight of ``layer`` from N(0, 2/fan_in).

    Biases are zeroed and batch-norm scale/shift reset to 1/0. ``rng_seed`` may
    be an int or a ``numpy.random.Generator``.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    for m in _walk(layer):
        if isinstance(m, (Conv2d, Linear)):
            m.weight.data = he_normal(rng, m.weight.shape, m.fan_in)
            if m.bias is not None:
                m.bias.data = np.zeros_like(m.bias.data)
        elif isinstance(m, BatchNorm2d):
            m.gamma.data = np.ones_like(m.gamma.data)
            m.beta.data = np.zeros_like(m.beta.data)
            m.running_mean[...] = 0.0
            m.running_var[...] = 1.0
    return layer


def _walk(module: Module) -> Iterator[Module]:
    yield module
    for _, child in module.children():
        yield from _walk(child)


# ---------------------------------------------------------------- conv


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """View of shape N×C×H'×W'×k×k over a padded input (no copy)."""
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))
    if stride > 1:
        cols = cols[:, :, ::stride, ::stride]
    return cols


class Conv2dFn(Function):
    """Cross-correlation via im2col and a single matrix product."""

    def forward(self, x, w, b=None, stride=1, padding=0):
        n, c, h, wd = x.shape
        cout, cin, k, _ = w.shape
        if c != cin:
            raise DimensionError(f"conv2d: input has {c} channels, weight expects {cin} (weight {w.shape})")
        ho = (h + 2 * padding - k) // stride + 1
        wo = (wd + 2 * padding - k) // stride + 1
        if ho <= 0 or wo <= 0:
            raise DimensionError(f"conv2d: input {x.shape} too small for kernel {k} with padding {padding}")
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        cols = _im2col(xp, k, stride)
        if k == 1:
            out = np.einsum("nchw,oc->nohw", cols[..., 0, 0], w[:, :, 0, 0], optimize=True)
        else:
            out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if b is not None:
            out = out + b.reshape(1, -1, 1, 1)
        self.cols, self.w, self.has_bias = cols, w, b is not None
        self.xp_shape, self.stride, self.padding, self.hw = xp.shape, stride, padding, (ho, wo)
        return np.ascontiguousarray(out)

    def backward(self, g):
        w, cols, s, p = self.w, self.cols, self.stride, self.padding
        cout, cin, k, _ = w.shape
        ho, wo = self.hw
        if k == 1:
            gw = np.einsum("nohw,nchw->oc", g, cols[..., 0, 0], optimize=True)[:, :, None, None]
            gcols = np.einsum("nohw,oc->nchw", g, w[:, :, 0, 0], optimize=True)
            gxp = np.zeros(self.xp_shape, dtype=DTYPE)
            gxp[:, :, : s * ho : s, : s * wo : s] = gcols
        else:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            gcols = np.tensordot(g, w, axes=([1], [0]))  # N×H'×W'×C×k×k
            gxp = np.zeros(self.xp_shape, dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p : gxp.shape[2] - p, p : gxp.shape[3] - p] if p else gxp
        gb = g.sum(axis=(0, 2, 3)) if self.has_bias else None
        return (np.ascontiguousarray(gx), gw) + ((gb,) if self.has_bias else ())


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    if bias is None:
        return Conv2dFn.apply(x, weight, stride=stride, padding=padding)
    return Conv2dFn.apply(x, weight, bias, stride=stride, padding=padding)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int | None = None,
                 bias: bool = True, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.fan_in = cin * k * k
        self.weight = Parameter(he_normal(rng, (cout, cin, k, k), self.fan_in))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


def conv2d_forward(x, layer: Conv2d) -> Tensor:
    return layer(x)


# ----------------------------------------------------------- batch norm


class BatchNormFn(Function):
    def forward(self, x, gamma, beta, eps=1e-5):
        axes = (0, 2, 3)
        mu = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv_std
        self.gamma = gamma.reshape(1, -1, 1, 1)
        self.batch_mean, self.batch_var = mu.reshape(-1), var.reshape(-1)
        return self.xhat * self.gamma + beta.reshape(1, -1, 1, 1)

    def backward(self, g):
        axes = (0, 2, 3)
        m = g.size / g.shape[1]
        gg = (g * self.xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * self.gamma
        gx = (self.inv_std / m) * (
            m * gxhat
            - gxhat.sum(axis=axes, keepdims=True)
            - self.xhat * (gxhat * self.xhat).sum(axis=axes, keepdims=True)
        )
        return gx, gg, gb


class BatchNorm2d(Module):
    """Per-channel normalisation. Train mode uses batch statistics and updates
    the running estimates; eval mode uses the running estimates."""

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, c: int, eps: float = 1e-5, momentum: float = 0.1):
        self.eps, self.momentum = eps, momentum
        self.gamma = Parameter(np.ones(c))
        self.beta = Parameter(np.zeros(c))
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.shape[1] != self.gamma.shape[0]:
            raise DimensionError(f"batchnorm: {x.shape[1]} channels, layer has {self.gamma.shape[0]}")
        if self.training:
            count = x.size // x.shape[1]
            if count < 2:
                raise ContractError("batchnorm in train mode needs at least 2 values per channel")
            fn_out = BatchNormFn.apply(x, self.gamma, self.beta, eps=self.eps)
            mu, var = _last_bn_stats(fn_out, x)
            mom = self.momentum
            self.running_mean *= 1 - mom
            self.running_mean += mom * mu
            self.running_var *= 1 - mom
            self.running_var += mom * var * count / (count - 1)
            return fn_out
        inv_std = Tensor._wrap((1.0 / np.sqrt(self.running_var + self.eps)).reshape(1, -1, 1, 1))
        scale = self.gamma.reshape(1, -1, 1, 1) * inv_std
        shift = Tensor._wrap(self.running_mean.reshape(1, -1, 1, 1))
        return (x - shift) * scale + self.beta.reshape(1, -1, 1, 1)


def _last_bn_stats(out: Tensor, x: Tensor) -> tuple[np.ndarray, np.ndarray]:
    if out._node is not None:
        fn = out._node.fn
        return fn.batch_mean, fn.batch_var
    d = x.data
    return d.mean(axis=(0, 2, 3)), d.var(axis=(0, 2, 3))


def batchnorm_forward(x, layer: BatchNorm2d, mode: str = "train") -> Tensor:
    layer.train(mode == "train")
    return layer(x)


# --------------------------------------------------------------- linear


class Linear(Module):
    def __init__(self, fin: int, fout: int, bias: bool = True, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fan_in = fin
        self.weight = Parameter(he_normal(rng, (fout, fin), fin))
        self.bias = Parameter(np.zeros(fout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[1]:
            raise DimensionError(f"linear: input features {x.shape[-1]} != {self.weight.shape[1]}")
        from .tensor import matmul, transpose2d

        y = matmul(x, transpose2d(self.weight))
        return y + self.bias if self.bias is not None else y


# ------------------------------------------------------------- pooling


class MaxPool2x2Fn(Function):
    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise DimensionError(f"maxpool2x2 needs even spatial extents, got {h}×{w}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        self.arg = win.argmax(axis=-1)  # first maximum in row-major window order
        record_switch(self.arg)
        self.shape = x.shape
        return np.take_along_axis(win, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, g):
        n, c, h, w = self.shape
        win = np.zeros((n, c, h // 2, w // 2, 4), dtype=DTYPE)
        np.put_along_axis(win, self.arg[..., None], g[..., None], axis=-1)
        return win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def maxpool2x2(x) -> Tensor:
    return MaxPool2x2Fn.apply(x)


def global_avg_pool(x) -> Tensor:
    from .tensor import mean

    return mean(x, axis=(2, 3), keepdims=True)


def global_max_pool(x) -> Tensor:
    from .tensor import tmax

    return tmax(x, axis=(2, 3), keepdims=True)


# ------------------------------------------------------------- resize


def interp_matrix(src: int, dst: int) -> np.ndarray:
    """dst×src linear-interpolation weights, half-pixel centres (align_corners=False)."""
    m = np.zeros((dst, src), dtype=DTYPE)
    if src == dst:
        np.fill_diagonal(m, 1.0)
        return m
    scale = src / dst
    for i in range(dst):
        pos = max((i + 0.5) * scale - 0.5, 0.0)
        lo = min(int(np.floor(pos)), src - 1)
        hi = min(lo + 1, src - 1)
        frac = pos - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


class ResizeFn(Function):
    def forward(self, x, size=(1, 1)):
        h, w = x.shape[-2:]
        th, tw = size
        if th <= 0 or tw <= 0:
            raise ContractError(f"resize target must be positive, got {size}")
        self.rh, self.rw = interp_matrix(h, th), interp_matrix(w, tw)
        return np.einsum("ih,nchw,jw->ncij", self.rh, x, self.rw, optimize=True)

    def backward(self, g):
        return np.einsum("ih,ncij,jw->nchw", self.rh, g, self.rw, optimize=True)


def bilinear_resize(x, target_h: int, target_w: int) -> Tensor:
    """Bilinear resampling of an N×C×H×W tensor."""
    return ResizeFn.apply(x, size=(int(target_h), int(target_w)))


# ---------------------------------------------------------- composites


class ConvBNReLU(Module):
    """Bias-free 3×3 (or k×k) convolution, batch norm, ReLU."""

    def __init__(self, cin: int, cout: int, k: int = 3, rng=None, relu: bool = True):
        self.conv = Conv2d(cin, cout, k, bias=False, rng=rng)
        self.bn = BatchNorm2d(cout)
        self.relu = relu

    def forward(self, x):
        from .tensor import relu

        y = self.bn(self.conv(x))
        return relu(y) if self.relu else y


# ---------------------------------------------------------- checkpoint

CKPT_MAGIC = b"ATNSCKPT"


def save_checkpoint(path, tensors: "dict[str, np.ndarray]", meta: dict | None = None) -> None:
    """Named ATNS records preceded by a JSON manifest (name -> offset, shape).

    Layout: 8-byte magic, u64 manifest length, manifest JSON, records.
    Offsets are absolute file positions of each ATNS record.
    """
    names = list(tensors)
    body = io.BytesIO()
    rel = {}
    for name in names:
        arr = np.asarray(tensors[name], dtype=DTYPE)
        rel[name] = (body.tell(), list(arr.shape))
        write_tensor(body, arr)

    def manifest_bytes(base):
        entries = [{"name": n, "offset": base + rel[n][0], "shape": rel[n][1]} for n in names]
        return json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()

    # the manifest length depends on the offsets it records; iterate to a fixpoint
    base = 16
    blob = manifest_bytes(base)
    while 16 + len(blob) != base:
        base = 16 + len(blob)
        blob = manifest_bytes(base)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(body.getvalue())


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
        (length,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(length))
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for entry in manifest["tensors"]:
            fh.seek(entry["offset"])
            arr = read_tensor(fh).data
            if list(arr.shape) != entry["shape"]:
                raise FormatError(f"{path}: {entry['name']} shape disagrees with manifest")
            out[entry["name"]] = arr
    return out, manifest["meta"]
