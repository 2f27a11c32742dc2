"""Networks: the TDNN-style embedder, backend modules, AAM-softmax head and
parameter accounting.

The embedder stands in for ECAPA-TDNN / SE-ResNet34 at desk scale: frame-level
layers over a stacked context window with ReLU, statistics pooling (mean and
std over frames), and a linear projection to the embedding. The gradient
estimator is the same family at a smaller width.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor, parameter

STD_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class DivergenceError(FloatingPointError):
    """Non-finite activations during a forward pass."""


def _check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise DivergenceError(f"non-finite values in {where}")
    return t


def linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    y = ad.matmul(x, w)
    return ad.add(y, b) if b is not None else y


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norm = ad.clip(ad.sqrt(ad.sum_(ad.square(x), axis=axis, keepdims=True)), eps, None)
    return ad.div(x, norm)


def stack_context(h: Tensor, context: int) -> Tensor:
    """``(B, T, D) -> (B, T, (2c+1) D)`` with edge-replicated time padding."""
    if context == 0:
        return h
    T = h.shape[1]
    first, last = ad.index(h, (slice(None), slice(0, 1))), ad.index(h, (slice(None), slice(T - 1, T)))
    padded = ad.concat([first] * context + [h] + [last] * context, axis=1)
    views = [ad.index(padded, (slice(None), slice(j, j + T))) for j in range(2 * context + 1)]
    return ad.concat(views, axis=2)


def stats_pool(h: Tensor) -> Tensor:
    """Mean and standard deviation over the time axis, concatenated."""
    mu = ad.mean(h, axis=1)
    sd = ad.sqrt(ad.add(ad.variance(h, axis=1), STD_EPS))
    return ad.concat([mu, sd], axis=-1)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ----------------------------------------------------------------------------
# embedder
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbedderSpec:
    channels: int = 32
    n_blocks: int = 2
    context: int = 1
    embed_dim: int = 32
    in_dim: int = 24

    def __post_init__(self):
        if min(self.channels, self.n_blocks, self.embed_dim, self.in_dim) < 1 or self.context < 0:
            raise ValueError(f"invalid embedder spec {self}")

    def param_count(self) -> int:
        width = 2 * self.context + 1
        total, d = 0, self.in_dim
        for _ in range(self.n_blocks):
            total += width * d * self.channels + self.channels
            d = self.channels
        return total + 2 * self.channels * self.embed_dim + self.embed_dim


class Embedder:
    """Frame-level TDNN stack + statistics pooling + projection."""

    def __init__(self, spec: EmbedderSpec, params: list[Tensor], in_mean=None, in_std=None):
        self.spec = spec
        self.params = params
        self.in_mean = np.zeros(spec.in_dim) if in_mean is None else np.asarray(in_mean, dtype=np.float64)
        self.in_std = np.ones(spec.in_dim) if in_std is None else np.asarray(in_std, dtype=np.float64)

    @classmethod
    def build(cls, spec: EmbedderSpec, seed: int = 0) -> Embedder:
        rng = np.random.default_rng(seed)
        width = 2 * spec.context + 1
        params, d = [], spec.in_dim
        for i in range(spec.n_blocks):
            params.append(parameter(_uniform(rng, width * d, (width * d, spec.channels)), f"block{i}.w"))
            params.append(parameter(np.zeros(spec.channels), f"block{i}.b"))
            d = spec.channels
        params.append(parameter(_uniform(rng, 2 * d, (2 * d, spec.embed_dim)), "proj.w"))
        params.append(parameter(np.zeros(spec.embed_dim), "proj.b"))
        return cls(spec, params)

    def parameters(self) -> list[Tensor]:
        return list(self.params)

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params:
            p.requires_grad = flag

    def copy(self) -> Embedder:
        params = [parameter(p.data, p.name) for p in self.params]
        for new, old in zip(params, self.params):
            new.requires_grad = old.requires_grad
        return Embedder(self.spec, params, self.in_mean.copy(), self.in_std.copy())

    def __call__(self, fbank) -> Tensor:
        return self.forward(fbank)

    def forward(self, fbank) -> Tensor:
        """``(T, in_dim) -> (embed_dim,)`` or ``(B, T, in_dim) -> (B, embed_dim)``."""
        x = as_tensor(fbank)
        single = x.ndim == 2
        if single:
            x = ad.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[-1] != self.spec.in_dim or x.shape[1] < 1:
            raise ad.ShapeError(f"embedder expects (batch, frames>=1, {self.spec.in_dim}), got {x.shape}")
        _check_finite(x, "embedder input")
        h = ad.div(ad.sub(x, self.in_mean), self.in_std)
        ps = self.params
        for i in range(self.spec.n_blocks):
            h = ad.relu(linear(stack_context(h, self.spec.context), ps[2 * i], ps[2 * i + 1]))
        out = linear(stats_pool(h), ps[-2], ps[-1])
        _check_finite(out, "embedder output")
        return ad.reshape(out, out.shape[1:]) if single else out


def build_embedder(spec: EmbedderSpec, seed: int = 0) -> Embedder:
    return Embedder.build(spec, seed)


def forward_embed(net: Embedder, fbank) -> Tensor:
    return net.forward(fbank)


# ----------------------------------------------------------------------------
# backends
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class BackendSpec:
    kind: str = "fc_residual"
    k: int = 16

    def __post_init__(self):
        if self.kind not in ("bn_only", "fc_residual"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "fc_residual" and self.k < 1:
            raise ValueError("fc_residual needs k >= 1")

    def param_count(self, embed_dim: int) -> int:
        if self.kind == "bn_only":
            return 2 * embed_dim
        k = self.k
        return (embed_dim * k + k) + 2 * k + (k * embed_dim + embed_dim)

    @property
    def label(self) -> str:
        return "Back_BN" if self.kind == "bn_only" else f"Back_FC-{self.k}"


class BatchNorm:
    def __init__(self, dim: int, name: str = "bn"):
        self.gamma = parameter(np.ones(dim), f"{name}.gamma")
        self.beta = parameter(np.zeros(dim), f"{name}.beta")
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        if train:
            if x.shape[0] < 2:
                raise ValueError("batch normalization in train mode needs a batch of at least 2")
            mu = ad.mean(x, axis=0)
            var = ad.variance(x, axis=0)
            self.running_mean = (1 - BN_MOMENTUM) * self.running_mean + BN_MOMENTUM * mu.data
            self.running_var = (1 - BN_MOMENTUM) * self.running_var + BN_MOMENTUM * var.data
            xh = ad.div(ad.sub(x, mu), ad.sqrt(ad.add(var, BN_EPS)))
        else:
            xh = ad.div(ad.sub(x, self.running_mean), np.sqrt(self.running_var + BN_EPS))
        return ad.add(ad.mul(xh, self.gamma), self.beta)


class Backend:
    """``bn_only``: BN(y). ``fc_residual``: y + FC2(ReLU(BN(FC1(y))))."""

    def __init__(self, spec: BackendSpec, embed_dim: int, seed: int = 0):
        self.spec = spec
        self.embed_dim = embed_dim
        rng = np.random.default_rng(seed)
        if spec.kind == "bn_only":
            self.bn = BatchNorm(embed_dim, "backend.bn")
            self.fc1_w = self.fc1_b = self.fc2_w = self.fc2_b = None
        else:
            k = spec.k
            self.fc1_w = parameter(_uniform(rng, embed_dim, (embed_dim, k)), "backend.fc1.w")
            self.fc1_b = parameter(np.zeros(k), "backend.fc1.b")
            self.bn = BatchNorm(k, "backend.bn")
            # zero FC2 makes the block start as the identity
            self.fc2_w = parameter(np.zeros((k, embed_dim)), "backend.fc2.w")
            self.fc2_b = parameter(np.zeros(embed_dim), "backend.fc2.b")

    def parameters(self) -> list[Tensor]:
        if self.spec.kind == "bn_only":
            return self.bn.parameters()
        return [self.fc1_w, self.fc1_b, *self.bn.parameters(), self.fc2_w, self.fc2_b]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def buffers(self) -> list[np.ndarray]:
        return [self.bn.running_mean, self.bn.running_var]

    def set_buffers(self, mean, var) -> None:
        self.bn.running_mean = np.asarray(mean, dtype=np.float64).copy()
        self.bn.running_var = np.asarray(var, dtype=np.float64).copy()

    def __call__(self, y, train: bool = False) -> Tensor:
        return self.forward(y, train)

    def forward(self, y, train: bool = False) -> Tensor:
        y = as_tensor(y)
        single = y.ndim == 1
        if single:
            y = ad.reshape(y, (1, y.shape[0]))
        if self.spec.kind == "bn_only":
            out = self.bn(y, train)
        else:
            h = ad.relu(self.bn(linear(y, self.fc1_w, self.fc1_b), train))
            out = ad.add(y, linear(h, self.fc2_w, self.fc2_b))
        return ad.reshape(out, (self.embed_dim,)) if single else out


def backend_forward(backend: Backend, y, train_mode: bool = False) -> Tensor:
    return backend.forward(y, train_mode)


# ----------------------------------------------------------------------------
# AAM-softmax
# ----------------------------------------------------------------------------


class AamHead:
    def __init__(self, n_speakers: int, embed_dim: int, margin: float = 0.3, scale: float = 20.0, seed: int = 0):
        if margin < 0 or scale <= 0:
            raise ValueError("need margin >= 0 and scale > 0")
        rng = np.random.default_rng(seed)
        self.weight = parameter(rng.normal(size=(n_speakers, embed_dim)) / math.sqrt(embed_dim), "aam.w")
        self.margin = float(margin)
        self.scale = float(scale)

    @property
    def n_speakers(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight]

    def logits(self, emb, labels) -> Tensor:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_speakers):
            raise ValueError(f"labels must lie in [0, {self.n_speakers}), got range [{labels.min()}, {labels.max()}]")
        cos = ad.matmul(l2_normalize(emb), ad.swapaxes(l2_normalize(self.weight), 0, 1))
        sin = ad.sqrt(ad.clip(ad.sub(1.0, ad.square(cos)), 0.0, 1.0))
        phi = ad.sub(ad.mul(cos, math.cos(self.margin)), ad.mul(sin, math.sin(self.margin)))
        onehot = np.zeros(cos.shape)
        onehot[np.arange(len(labels)), labels] = 1.0
        mixed = ad.add(ad.mul(phi, onehot), ad.mul(cos, 1.0 - onehot))
        return ad.mul(mixed, self.scale)

    def loss(self, emb, labels) -> Tensor:
        z = self.logits(emb, labels)
        onehot = np.zeros(z.shape)
        onehot[np.arange(z.shape[0]), np.asarray(labels)] = 1.0
        target = ad.sum_(ad.mul(z, onehot), axis=1)
        return ad.mean(ad.sub(ad.logsumexp(z, axis=1), target))


def aam_loss(emb, labels, head: AamHead) -> Tensor:
    return head.loss(emb, labels)


# ----------------------------------------------------------------------------
# parameter accounting
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamAccounting:
    bp_params: int
    added_params: int
    base_params: int
    trainable_params: int

    @property
    def bp_pct(self) -> float:
        return 100.0 * self.bp_params / self.base_params

    @property
    def add_pct(self) -> float:
        return 100.0 * self.added_params / self.base_params


def count_params(
    method: str,
    base_params: int,
    w_params: int = 0,
    estimator_params: int = 0,
    backend_params: int = 0,
) -> ParamAccounting:
    """Parameters touched by backprop during adaptation and parameters kept afterwards.

    Classifier-head parameters are never counted. Vanilla reprogramming
    backpropagates through the frozen model, so its parameters are counted
    in ``bp_params`` although they are not updated.
    """
    if base_params <= 0:
        raise ValueError("base_params must be positive")
    w, est, be = w_params, estimator_params, backend_params
    table = {
        "none": (0, 0, 0),
        "full_finetune": (base_params, 0, base_params),
        "backend_only": (be, be, be),
        "vanilla_reprog": (base_params + w + be, w + be, w + be),
        "grad_reprog": (w + est + be, w + be, w + est + be),
        "zo_reprog": (be, w + be, w + be),
    }
    if method not in table:
        raise ValueError(f"unknown adaptation method {method!r}; known: {', '.join(table)}")
    bp, add, trainable = table[method]
    return ParamAccounting(bp, add, base_params, trainable)


# ----------------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------------

FORMAT_VERSION = 1
EMBEDDER_MAGIC = b"BREM"
BACKEND_MAGIC = b"BRBK"
HEAD_MAGIC = b"BRAH"


def pack(magic: bytes, fields: list[int], arrays: list[np.ndarray]) -> bytes:
    """``magic | version | n_fields | fields (int32 LE) | n_floats | float64 LE``."""
    flat = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays]) if arrays else np.zeros(0)
    head = magic + struct.pack("<ii", FORMAT_VERSION, len(fields)) + struct.pack(f"<{len(fields)}i", *fields)
    return head + struct.pack("<q", flat.size) + flat.astype("<f8").tobytes()


def unpack(buf: bytes, magic: bytes, offset: int = 0) -> tuple[list[int], np.ndarray, int]:
    if buf[offset : offset + 4] != magic:
        raise ValueError(f"bad magic {buf[offset:offset + 4]!r}, expected {magic!r}")
    version, nf = struct.unpack_from("<ii", buf, offset + 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version}")
    pos = offset + 12
    fields = list(struct.unpack_from(f"<{nf}i", buf, pos))
    pos += 4 * nf
    (n,) = struct.unpack_from("<q", buf, pos)
    pos += 8
    floats = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64)
    return fields, floats, pos + 8 * n


def _split(floats: np.ndarray, shapes) -> list[np.ndarray]:
    out, pos = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        out.append(floats[pos : pos + n].reshape(shape))
        pos += n
    if pos != floats.size:
        raise ValueError(f"payload has {floats.size} values, expected {pos}")
    return out


def embedder_to_bytes(net: Embedder) -> bytes:
    s = net.spec
    fields = [s.in_dim, s.channels, s.n_blocks, s.context, s.embed_dim]
    return pack(EMBEDDER_MAGIC, fields, [p.data for p in net.params] + [net.in_mean, net.in_std])


def embedder_from_bytes(buf: bytes, offset: int = 0) -> tuple[Embedder, int]:
    fields, floats, end = unpack(buf, EMBEDDER_MAGIC, offset)
    in_dim, channels, n_blocks, context, embed_dim = fields
    spec = EmbedderSpec(channels, n_blocks, context, embed_dim, in_dim)
    ref = Embedder.build(spec)
    arrays = _split(floats, [p.shape for p in ref.params] + [(in_dim,), (in_dim,)])
    params = [parameter(a, p.name) for a, p in zip(arrays, ref.params)]
    return Embedder(spec, params, arrays[-2], arrays[-1]), end


def backend_to_bytes(backend: Backend) -> bytes:
    s = backend.spec
    fields = [0 if s.kind == "bn_only" else 1, backend.embed_dim, s.k]
    return pack(BACKEND_MAGIC, fields, [p.data for p in backend.parameters()] + backend.buffers())


def backend_from_bytes(buf: bytes, offset: int = 0) -> tuple[Backend, int]:
    fields, floats, end = unpack(buf, BACKEND_MAGIC, offset)
    kind, embed_dim, k = fields
    backend = Backend(BackendSpec("bn_only" if kind == 0 else "fc_residual", k), embed_dim)
    ps = backend.parameters()
    bn_dim = backend.bn.running_mean.shape
    arrays = _split(floats, [p.shape for p in ps] + [bn_dim, bn_dim])
    for p, a in zip(ps, arrays):
        p.data = a.copy()
    backend.set_buffers(arrays[-2], arrays[-1])
    return backend, end


def head_to_bytes(head: AamHead) -> bytes:
    n, d = head.weight.shape
    return pack(HEAD_MAGIC, [n, d], [np.array([head.margin, head.scale]), head.weight.data])


def head_from_bytes(buf: bytes, offset: int = 0) -> tuple[AamHead, int]:
    (n, d), floats, end = unpack(buf, HEAD_MAGIC, offset)
    head = AamHead(n, d, margin=float(floats[0]), scale=float(floats[1]))
    head.weight.data = floats[2:].reshape(n, d).copy()
    return head, end
