"""Backbone and branch networks: layouts, initialisation, forward/backward, weight files."""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .errors import ContractError, FormatError, IncompatibleModelError, NumericError

DEFAULT_NAMES = ("LE", "RE", "N", "LM", "RM")


@dataclass(frozen=True)
class NetworkConfig:
    K: int = 5
    names: tuple[str, ...] = DEFAULT_NAMES
    input_side: int = 32
    patch_side: int = 24
    magnified_side: int = 64

    def __post_init__(self):
        if self.K < 1:
            raise ContractError("K must be at least 1")
        if len(self.names) != self.K:
            raise ContractError(f"{len(self.names)} names given for K={self.K}")
        if min(self.input_side, self.patch_side, self.magnified_side) <= 0:
            raise ContractError("sides must be positive")
        if self.input_side % 4:
            raise ContractError("backbone input side must be divisible by 4")

    @classmethod
    def for_k(cls, K: int) -> "NetworkConfig":
        names = DEFAULT_NAMES if K == 5 else tuple(f"L{i}" for i in range(K))
        return cls(K=K, names=names)


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv", "deconv" or "pool"
    out_ch: int = 0
    in_ch: int = 0
    kernel: int = 0
    relu: bool = True

    @property
    def has_params(self) -> bool:
        return self.kind != "pool"

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.out_ch, self.in_ch, self.kernel, self.kernel)
        if self.kind == "deconv":
            return (self.in_ch, self.out_ch, self.kernel, self.kernel)
        return ()

    @property
    def bias_shape(self) -> tuple[int, ...]:
        return (self.out_ch,) if self.has_params else ()


def _conv(o, c, k, relu=True):
    return LayerSpec("conv", o, c, k, relu)


def _deconv(o, c):
    return LayerSpec("deconv", o, c, 2, True)


_POOL = LayerSpec("pool", relu=False)


def backbone_layout(K: int = 5) -> tuple[LayerSpec, ...]:
    return (
        _conv(20, 3, 5), _conv(20, 20, 5), _POOL,
        _conv(30, 20, 5), _conv(30, 30, 5), _POOL,
        _conv(40, 30, 5), _conv(40, 40, 5),
        _deconv(30, 40), _conv(30, 30, 5),
        _deconv(15, 30), _conv(K, 15, 1, relu=False),
    )


def branch_layout() -> tuple[LayerSpec, ...]:
    return (
        _conv(5, 4, 5), _conv(5, 5, 5), _conv(5, 5, 5), _conv(5, 5, 5),
        _conv(1, 5, 1, relu=False),
    )


@dataclass
class Net:
    """Parameters of one feed-forward stack, plus SGD momentum buffers."""

    layout: tuple[LayerSpec, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    weight_momentum: list[np.ndarray] = field(default_factory=list)
    bias_momentum: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.weight_momentum:
            self.weight_momentum = [np.zeros_like(w) for w in self.weights]
        if not self.bias_momentum:
            self.bias_momentum = [np.zeros_like(b) for b in self.biases]

    @property
    def param_layers(self) -> list[LayerSpec]:
        return [s for s in self.layout if s.has_params]

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def momentum_tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weight_momentum, self.bias_momentum):
            out += [w, b]
        return out

    def copy(self) -> "Net":
        return Net(
            self.layout,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [w.copy() for w in self.weight_momentum],
            [b.copy() for b in self.bias_momentum],
        )

    def forward(self, x: np.ndarray, keep_cache: bool = False):
        """Run the stack on ``C x H x W`` or ``N x C x H x W`` input.

        Returns ``(output, caches)`` in the input's layout; caches is None
        unless ``keep_cache``.
        """
        squeeze = x.ndim == 3
        if x.ndim not in (3, 4):
            raise ContractError(f"expected C x H x W or N x C x H x W, got {x.shape}")
        if not np.isfinite(x).all():
            raise NumericError("non-finite network input")
        h = nm.to_nhwc(x[None] if squeeze else x)
        caches = [] if keep_cache else None
        p = 0
        for spec in self.layout:
            if spec.kind == "pool":
                h, cache = nm.maxpool_nhwc(h)
            elif spec.kind == "conv":
                pad = spec.kernel // 2
                h, cache = nm.conv_nhwc(h, self.weights[p], self.biases[p], (pad, pad))
                p += 1
            else:
                h, cache = nm.deconv_nhwc(h, self.weights[p], self.biases[p])
                p += 1
            mask = None
            if spec.relu:
                mask = h > 0
                h *= mask
            if keep_cache:
                caches.append((cache, mask))
        out = nm.to_nchw(h)
        return (out[0] if squeeze else out), caches

    def backward(self, dy: np.ndarray, caches) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Backpropagate ``dy`` (same layout as the forward output).

        Returns (weight grads, bias grads) in layer order. The gradient with
        respect to the network input is not computed.
        """
        d = nm.to_nhwc(dy[None] if dy.ndim == 3 else dy)
        wgrads: list[np.ndarray] = []
        bgrads: list[np.ndarray] = []
        last = len(self.layout) - 1
        for i, (spec, (cache, mask)) in enumerate(zip(reversed(self.layout), reversed(caches))):
            if mask is not None:
                d = d * mask
            if spec.kind == "pool":
                d = nm.maxpool_nhwc_backward(d, cache)
                continue
            if spec.kind == "conv":
                g = nm.conv_nhwc_backward(d, cache, need_input_grad=i != last)
            else:
                g = nm.deconv_nhwc_backward(d, cache)
            wgrads.append(g.weight_grad)
            bgrads.append(g.bias_grad)
            d = g.input_grad
        wgrads.reverse()
        bgrads.reverse()
        return wgrads, bgrads

    def sgd_update(self, wgrads, bgrads, lr, momentum, weight_decay) -> None:
        for i in range(len(self.weights)):
            self.weights[i], self.weight_momentum[i] = nm.sgd_step(
                self.weights[i], wgrads[i], self.weight_momentum[i], lr, momentum, weight_decay
            )
            self.biases[i], self.bias_momentum[i] = nm.sgd_step(
                self.biases[i], bgrads[i], self.bias_momentum[i], lr, momentum, weight_decay
            )


@dataclass
class Model:
    """Backbone plus K branches."""

    config: NetworkConfig
    backbone: Net
    branches: list[Net]

    def copy(self) -> "Model":
        return Model(self.config, self.backbone.copy(), [b.copy() for b in self.branches])


def _fan_in(spec: LayerSpec) -> int:
    if spec.kind == "deconv":
        return spec.in_ch
    return spec.in_ch * spec.kernel * spec.kernel


def _init_net(layout, rng: np.random.Generator, std) -> Net:
    weights, biases = [], []
    for spec in layout:
        if not spec.has_params:
            continue
        s = math.sqrt(2.0 / _fan_in(spec)) if std == "he" else float(std)
        weights.append((rng.standard_normal(spec.weight_shape) * s).astype(np.float32))
        biases.append(np.zeros(spec.bias_shape, dtype=np.float32))
    return Net(tuple(layout), weights, biases)


def init_weights(config: NetworkConfig, seed: int = 0, std: float | str = 0.01) -> Model:
    """Gaussian(0, std^2) kernels, zero biases, zero momentum.

    ``std="he"`` scales each layer by sqrt(2 / fan_in) instead.
    """
    rng = np.random.default_rng(seed)
    backbone = _init_net(backbone_layout(config.K), rng, std)
    branches = [_init_net(branch_layout(), rng, std) for _ in range(config.K)]
    return Model(config, backbone, branches)


def backbone_forward(model: Model | Net, image: np.ndarray) -> np.ndarray:
    """K x H x W heat map for a 3 x H x W image (H, W divisible by 4)."""
    net = model.backbone if isinstance(model, Model) else model
    if image.shape[-3] != 3:
        raise ContractError(f"backbone expects 3 channels, got {image.shape}")
    h, w = image.shape[-2:]
    if h % 4 or w % 4:
        raise ContractError(f"backbone input dims must be divisible by 4, got {h}x{w}")
    out, _ = net.forward(image)
    return out


def branch_forward(model: Model | list[Net], k: int, patch: np.ndarray) -> np.ndarray:
    """1 x 24 x 24 fine map for a 4 x 24 x 24 patch (RGB + coarse channel k)."""
    branches = model.branches if isinstance(model, Model) else model
    if not 0 <= k < len(branches):
        raise ContractError(f"branch index {k} out of range for K={len(branches)}")
    if patch.shape[-3] != 4:
        raise ContractError(f"branch expects 4 input channels, got {patch.shape}")
    out, _ = branches[k].forward(patch)
    return out


# ---------------------------------------------------------------- weight files

MAGIC = b"BBFCN1"
FORMAT_VERSION = 1


def _expected_shapes(K: int) -> list[tuple[int, ...]]:
    shapes = []
    for layout in [backbone_layout(K)] + [branch_layout()] * K:
        for spec in layout:
            if spec.has_params:
                shapes += [spec.weight_shape, spec.bias_shape]
    return shapes


def serialize_weights(model: Model) -> bytes:
    """Encode parameters and momentum buffers.

    Layout: magic | version u16 | K u16 | backbone layer count u16 | tensors |
    CRC32 of everything before it. Each tensor is rank u8, u32 extents and
    little-endian float32 payload. Parameters come first (backbone then
    branches, weight before bias), then the momentum buffers in the same order.
    """
    K = model.config.K
    n_layers = len(model.backbone.weights)
    parts = [MAGIC, struct.pack("<HHH", FORMAT_VERSION, K, n_layers)]
    nets = [model.backbone] + list(model.branches)
    tensors = [t for net in nets for t in net.tensors()]
    tensors += [t for net in nets for t in net.momentum_tensors()]
    for t in tensors:
        parts.append(struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def deserialize_weights(stream: bytes) -> Model:
    if len(stream) < len(MAGIC) or stream[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic: not a BBFCN1 weight file")
    if len(stream) < len(MAGIC) + 6 + 4:
        raise FormatError("truncated header")
    body, crc = stream[:-4], struct.unpack("<I", stream[-4:])[0]
    version, K, n_layers = struct.unpack_from("<HHH", stream, len(MAGIC))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    pos = len(MAGIC) + 6
    tensors = []
    n_total = 2 * len(_expected_shapes(K)) if K else 0
    try:
        for _ in range(n_total):
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(body):
                raise FormatError("truncated tensor payload")
            tensors.append(np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=pos)
                           .astype(np.float32).reshape(shape))
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"truncated weight file: {exc}") from None
    if pos != len(body):
        raise FormatError("unexpected trailing bytes or truncated file")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("checksum mismatch")

    if K < 1:
        raise IncompatibleModelError("K must be at least 1")
    expected_layers = sum(s.has_params for s in backbone_layout(K))
    if n_layers != expected_layers:
        raise IncompatibleModelError(
            f"backbone has {n_layers} parameterised layers, architecture needs {expected_layers}"
        )
    expected = _expected_shapes(K)
    params, momenta = tensors[: len(expected)], tensors[len(expected):]
    for t, shape in zip(params + momenta, expected + expected):
        if t.shape != shape:
            raise IncompatibleModelError(f"tensor shape {t.shape} does not match listing {shape}")

    def take(layout, ps, ms) -> Net:
        n = sum(s.has_params for s in layout)
        return Net(tuple(layout), ps[0 : 2 * n : 2], ps[1 : 2 * n : 2], ms[0 : 2 * n : 2], ms[1 : 2 * n : 2])

    nb = 2 * expected_layers
    backbone = take(backbone_layout(K), params[:nb], momenta[:nb])
    per_branch = 2 * len([s for s in branch_layout() if s.has_params])
    branches = []
    for k in range(K):
        lo = nb + k * per_branch
        branches.append(take(branch_layout(), params[lo : lo + per_branch], momenta[lo : lo + per_branch]))
    return Model(NetworkConfig.for_k(K), backbone, branches)


def save_model(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_weights(model))


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        return deserialize_weights(fh.read())
