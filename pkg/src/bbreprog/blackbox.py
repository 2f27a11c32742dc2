"""Black-box adaptation engine.

A :class:`BlackBoxHandle` exposes nothing but a counted batch forward. The
gradient-estimated reprogramming method runs a small siamese estimator next
to the handle on the same reprogrammed input and combines the two outputs as
``detach(y - y_hat) + y_hat``: the value is the black-box output, the
gradient is the estimator's.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step, no_grad
from .dsp import FbankConfig, log_fbank
from .nets import (
    AamHead,
    Backend,
    BackendSpec,
    Embedder,
    EmbedderSpec,
    ParamAccounting,
    backend_from_bytes,
    backend_to_bytes,
    build_embedder,
    count_params,
    embedder_from_bytes,
    embedder_to_bytes,
    pack,
    unpack,
)
from .reprogram import ReprogramParams, apply_concat, init_params

log = logging.getLogger(__name__)

METHODS = ("none", "full_finetune", "backend_only", "vanilla_reprog", "grad_reprog", "zo_reprog")
BLACKBOX_COMPATIBLE = frozenset({"none", "backend_only", "grad_reprog", "zo_reprog"})


class BlackBoxViolation(RuntimeError):
    """A method needing white-box access was requested with handle-only access."""


def _compat_error(kind: str) -> BlackBoxViolation:
    return BlackBoxViolation(
        f"method {kind!r} is not allowed for black-box training (Black-box training allow: no); "
        f"black-box compatible methods: {', '.join(m for m in METHODS if m in BLACKBOX_COMPATIBLE)}"
    )


# ----------------------------------------------------------------------------
# handle
# ----------------------------------------------------------------------------


class BlackBoxHandle:
    """Forward-only access to an embedding model.

    The wrapped model is held in closures, never as an attribute, and runs
    with tape recording disabled, so nothing downstream can reach its
    parameters through the graph.
    """

    __slots__ = ("_forward", "_audit", "_lock", "_queries", "model_hash", "embed_dim", "n_params", "frontend")

    def __init__(self, net: Embedder, model_hash: str = "", frontend: FbankConfig | None = None):
        def forward(batch: np.ndarray) -> np.ndarray:
            with no_grad():
                inp = log_fbank(batch, frontend).data if frontend is not None else batch
                return net.forward(inp).data.copy()

        def audit() -> int:
            return sum(p.grad is not None for p in net.params)

        self._forward = forward
        self._audit = audit
        self._lock = threading.Lock()
        self._queries = 0
        self.model_hash = model_hash
        self.embed_dim = net.spec.embed_dim
        self.n_params = net.n_params()
        self.frontend = frontend

    @property
    def forward_queries(self) -> int:
        return self._queries

    @property
    def frontend_inside(self) -> bool:
        return self.frontend is not None

    def inner_gradient_count(self) -> int:
        """Number of inner parameters holding a gradient; stays zero by construction."""
        return self._audit()

    def forward(self, inputs) -> Tensor:
        """One counted batch forward. Inputs are FBank features, or waveforms
        when the frontend lives inside the black box."""
        arr = inputs.data if isinstance(inputs, Tensor) else np.asarray(inputs, dtype=np.float64)
        out = self._forward(arr)
        with self._lock:
            self._queries += 1
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("black-box output is not finite")
        return Tensor(out)

    __call__ = forward


def wrap_blackbox(net: Embedder, model_hash: str = "", frontend_in_blackbox: FbankConfig | None = None) -> BlackBoxHandle:
    return BlackBoxHandle(net, model_hash, frontend_in_blackbox)


# ----------------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class AdaptationMethod:
    kind: str = "grad_reprog"
    backend: BackendSpec | None = field(default_factory=BackendSpec)
    reprog_n: int = 0
    estimator: EmbedderSpec | None = None
    zo_probes: int = 10
    zo_sigma: float = 0.01

    def __post_init__(self):
        if self.kind not in METHODS:
            raise ValueError(f"unknown method {self.kind!r}; known: {', '.join(METHODS)}")
        if self.kind == "grad_reprog" and self.estimator is None:
            raise ValueError("grad_reprog needs an estimator spec")
        if self.reprog_n < 0:
            raise ValueError("reprog_n must be non-negative")

    @property
    def blackbox_compatible(self) -> bool:
        return self.kind in BLACKBOX_COMPATIBLE

    @property
    def uses_reprog(self) -> bool:
        return self.kind in ("vanilla_reprog", "grad_reprog", "zo_reprog")

    @property
    def uses_backend(self) -> bool:
        return self.kind not in ("none", "full_finetune") and self.backend is not None

    @property
    def label(self) -> str:
        b = self.backend.label if self.uses_backend else ""
        return {
            "none": "None",
            "full_finetune": "Full-finetune",
            "backend_only": b,
            "vanilla_reprog": f"Reprog.+{b}",
            "grad_reprog": f"Grad.Reprog.+{b}",
            "zo_reprog": f"ZO.Reprog.+{b}",
        }[self.kind]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    crop_seconds: float = 2.0
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lr_drop_epochs: tuple[int, ...] = (10, 15)
    lr_drop_ratio: float = 10.0
    epochs: int = 20
    seed: int = 0
    distill_weight: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1 or self.crop_seconds <= 0 or self.lr <= 0 or self.epochs < 0:
            raise ValueError(f"invalid train config {self}")
        if self.weight_decay < 0 or self.lr_drop_ratio <= 0 or self.distill_weight < 0:
            raise ValueError(f"invalid train config {self}")
        drops = tuple(self.lr_drop_epochs)
        if any(b <= a for a, b in zip(drops, drops[1:])) or any(d >= self.epochs for d in drops):
            raise ValueError(f"lr_drop_epochs must be strictly increasing and < epochs, got {drops}")
        object.__setattr__(self, "lr_drop_epochs", drops)

    def lr_at(self, epoch: int) -> float:
        n_drops = sum(epoch >= d for d in self.lr_drop_epochs)
        return self.lr / self.lr_drop_ratio**n_drops


# ----------------------------------------------------------------------------
# forward composition
# ----------------------------------------------------------------------------


def bypass(y: Tensor, y_hat: Tensor) -> Tensor:
    """``detach(y - y_hat) + y_hat`` as one node.

    The value is ``y`` bitwise (the unfused sum only recovers it up to
    rounding) and the gradient passes to ``y_hat`` unchanged; ``y`` gets none.
    """
    y, y_hat = ad.as_tensor(y), ad.as_tensor(y_hat)
    if y.shape != y_hat.shape:
        raise ad.ShapeError(f"bypass: shapes {y.shape} and {y_hat.shape} differ")
    return ad._node(y.data.copy(), (y_hat,), lambda g: (g,), "bypass")


def adapt_forward(
    handle: BlackBoxHandle,
    estimator: Embedder,
    reprog: ReprogramParams,
    backend: Backend | None,
    x,
    cfg: FbankConfig,
    train: bool = False,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Returns ``(y, y_hat, y_adapt, emb)`` for waveforms ``x`` of shape ``(B, T)``."""
    x_rep = apply_concat(x, reprog)
    feats = log_fbank(x_rep, cfg)
    y = handle.forward(x_rep.data if handle.frontend_inside else feats.data)
    y_hat = estimator.forward(feats)
    if not np.all(np.isfinite(y_hat.data)):
        raise FloatingPointError("estimator output is not finite")
    y_adapt = bypass(y, y_hat)
    emb = backend.forward(y_adapt, train) if backend is not None else y_adapt
    return y, y_hat, y_adapt, emb


def zo_grad_estimate(
    loss_fn: Callable[[np.ndarray], float],
    w: np.ndarray,
    n_probes: int,
    sigma: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Two-sided random-direction gradient estimate.

    ``mean_i [L(w + s u_i) - L(w - s u_i)] / (2 s) * u_i`` with Gaussian
    directions orthogonalized in blocks and scaled to norm ``sqrt(dim)``,
    which keeps the estimate unbiased and makes each full block exact for
    linear losses. Costs exactly ``2 * n_probes`` calls of ``loss_fn``.
    """
    if n_probes < 1 or sigma <= 0:
        raise ValueError("need n_probes >= 1 and sigma > 0")
    w = np.asarray(w, dtype=np.float64)
    d = w.size
    if d == 0:
        return np.zeros_like(w)
    dirs = []
    while len(dirs) < n_probes:
        m = min(d, n_probes - len(dirs))
        q, r = np.linalg.qr(rng.standard_normal((d, m)))
        q = q * np.sign(np.diag(r))
        dirs.extend(np.sqrt(d) * q.T)
    est = np.zeros(d)
    for u in dirs:
        u = u.reshape(w.shape)
        diff = loss_fn(w + sigma * u) - loss_fn(w - sigma * u)
        est += diff / (2.0 * sigma) * u.ravel()
    return (est / n_probes).reshape(w.shape)


# ----------------------------------------------------------------------------
# adapted system
# ----------------------------------------------------------------------------


@dataclass
class AdaptedSystem:
    handle: BlackBoxHandle
    method: AdaptationMethod
    fbank: FbankConfig
    w: np.ndarray
    backend: Backend | None
    accounting: ParamAccounting
    metadata: dict = field(default_factory=dict)
    finetuned: Embedder | None = None

    def embed_batch(self, x) -> np.ndarray:
        """Adapted embeddings for equal-length waveforms ``(B, T)``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        with no_grad():
            if self.w.size:
                p = init_params(self.w.size)
                p.w.data = self.w
                x = apply_concat(x, p).data
            feats = x if self.handle.frontend_inside else log_fbank(x, self.fbank).data
            y = self.handle.forward(feats)
            if self.backend is not None:
                y = self.backend.forward(y, train=False)
        return y.data

    def embed(self, x) -> np.ndarray:
        return self.embed_batch(np.asarray(x)[None])[0]


def embed_utterance(system: AdaptedSystem, x) -> np.ndarray:
    return system.embed(x)


SYSTEM_MAGIC = b"BRAS"
W_MAGIC = b"BRRW"


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_system(system: AdaptedSystem, path) -> None:
    m = system.method
    header = {
        "method": m.kind,
        "label": m.label,
        "n": int(system.w.size),
        "backend": asdict(m.backend) if m.backend is not None else None,
        "estimator": asdict(m.estimator) if m.estimator is not None else None,
        "frontend": system.fbank.to_dict(),
        "frontend_in_blackbox": system.handle.frontend_inside,
        "model_hash": system.handle.model_hash,
        "accounting": asdict(system.accounting),
        "metadata": system.metadata,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    blob = SYSTEM_MAGIC + struct.pack("<iI", 1, len(hb)) + hb + pack(W_MAGIC, [int(system.w.size)], [system.w])
    blob += struct.pack("<B", system.backend is not None)
    if system.backend is not None:
        blob += backend_to_bytes(system.backend)
    blob += struct.pack("<B", system.finetuned is not None)
    if system.finetuned is not None:
        blob += embedder_to_bytes(system.finetuned)
    Path(path).write_bytes(blob)


def load_system(path, model: Embedder, model_hash: str = "", check_hash: bool = True) -> AdaptedSystem:
    buf = Path(path).read_bytes()
    if buf[:4] != SYSTEM_MAGIC:
        raise ValueError(f"{path}: not an adapted-system artifact")
    _, hlen = struct.unpack_from("<iI", buf, 4)
    header = json.loads(buf[12 : 12 + hlen])
    if check_hash and model_hash and header["model_hash"] and header["model_hash"] != model_hash:
        raise ValueError(f"{path}: adapts model {header['model_hash'][:12]}, got {model_hash[:12]}")
    pos = 12 + hlen
    _, w, pos = unpack(buf, W_MAGIC, pos)
    backend = finetuned = None
    if buf[pos]:
        backend, pos = backend_from_bytes(buf, pos + 1)
    else:
        pos += 1
    if buf[pos]:
        finetuned, pos = embedder_from_bytes(buf, pos + 1)
    fb = FbankConfig(**header["frontend"])
    be = BackendSpec(**header["backend"]) if header["backend"] else None
    est = EmbedderSpec(**header["estimator"]) if header["estimator"] else None
    method = AdaptationMethod(header["method"], be, header["n"], est)
    inner = finetuned if finetuned is not None else model
    handle = wrap_blackbox(inner, model_hash or header["model_hash"], fb if header["frontend_in_blackbox"] else None)
    acc = ParamAccounting(**header["accounting"])
    return AdaptedSystem(handle, method, fb, w, backend, acc, header["metadata"], finetuned)


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------


def random_crops(waves: Sequence[np.ndarray], n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """One random contiguous crop per utterance; short utterances wrap around."""
    out = np.empty((len(waves), n_samples))
    for i, w in enumerate(waves):
        if len(w) >= n_samples:
            start = rng.integers(0, len(w) - n_samples + 1)
            out[i] = w[start : start + n_samples]
        else:
            start = rng.integers(0, len(w))
            out[i] = np.take(w, np.arange(start, start + n_samples), mode="wrap")
    return out


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # BN needs at least two samples per training batch
    if len(out) > 1 and len(out[-1]) < 2:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


def _accounting(method: AdaptationMethod, base: int, n: int, est: Embedder | None, backend: Backend | None):
    return count_params(
        method.kind,
        base,
        w_params=n if method.uses_reprog else 0,
        estimator_params=est.n_params() if est is not None else 0,
        backend_params=backend.n_params() if backend is not None else 0,
    )


def train_adaptation(
    method: AdaptationMethod,
    data: Sequence[tuple[np.ndarray, int]],
    cfg: TrainConfig,
    fbank: FbankConfig,
    model: Embedder | None = None,
    handle: BlackBoxHandle | None = None,
    n_speakers: int | None = None,
    blackbox_strict: bool = False,
    on_epoch: Callable[[int, float, dict], None] | None = None,
) -> AdaptedSystem:
    """Adapt a frozen model to labelled target-domain waveforms.

    ``data`` holds ``(waveform, speaker_index)`` pairs. White-box methods need
    ``model``; black-box methods use ``handle`` (built from ``model`` if absent).
    """
    if handle is None:
        if model is None:
            raise ValueError("need a model or a black-box handle")
        handle = wrap_blackbox(model)
    if not method.blackbox_compatible and (blackbox_strict or model is None):
        raise _compat_error(method.kind)
    base = handle.n_params
    rng = np.random.default_rng(cfg.seed)
    n = method.reprog_n if method.uses_reprog else 0
    reprog = init_params(n)
    backend = Backend(method.backend, handle.embed_dim, seed=cfg.seed + 1) if method.uses_backend else None
    estimator = None
    if method.kind == "grad_reprog":
        estimator = build_embedder(method.estimator, seed=cfg.seed + 2)
    accounting = _accounting(method, base, n, estimator, backend)

    q0 = handle.forward_queries
    meta = {"epochs_run": 0, "steps": 0, "epoch_losses": [], "train_queries": 0, "zo_queries": 0}
    if method.kind == "none" or cfg.epochs == 0 or not data:
        return AdaptedSystem(handle, method, fbank, reprog.w.data.copy(), backend, accounting, meta)

    waves = [d[0] for d in data]
    labels = np.array([d[1] for d in data], dtype=np.int64)
    n_spk = n_speakers or int(labels.max()) + 1
    head = AamHead(n_spk, handle.embed_dim, seed=cfg.seed + 3)
    crop_len = int(round(cfg.crop_seconds * fbank.sample_rate))

    finetuned = None
    frozen = None
    if method.kind == "full_finetune":
        finetuned = model.copy()
        finetuned.set_requires_grad(True)
    elif method.kind == "vanilla_reprog":
        frozen = model.copy()
        frozen.set_requires_grad(False)

    params: list[Tensor] = list(head.parameters())
    if finetuned is not None:
        params += finetuned.parameters()
    if backend is not None:
        params += backend.parameters()
    if method.kind in ("vanilla_reprog", "grad_reprog") and n:
        params.append(reprog.w)
    if estimator is not None:
        params += estimator.parameters()
    opt = AdamState()
    zo_state = AdamState()
    zo_rng = np.random.default_rng(cfg.seed + 4)

    def features(x):
        return log_fbank(x, fbank)

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        losses = []
        for idx in batches(len(waves), cfg.batch_size, rng):
            x = random_crops([waves[i] for i in idx], crop_len, rng)
            lab = labels[idx]
            if method.kind == "full_finetune":
                emb = finetuned.forward(features(x))
                loss = head.loss(emb, lab)
            elif method.kind == "backend_only":
                y = handle.forward(x if handle.frontend_inside else features(x).data)
                loss = head.loss(backend.forward(y, train=True), lab)
            elif method.kind == "vanilla_reprog":
                y = frozen.forward(features(apply_concat(x, reprog)))
                loss = head.loss(backend.forward(y, train=True), lab)
            elif method.kind == "grad_reprog":
                y, y_hat, _, emb = adapt_forward(handle, estimator, reprog, backend, x, fbank, train=True)
                loss = head.loss(emb, lab)
                if cfg.distill_weight > 0:
                    gap = ad.mean(ad.sum_(ad.square(ad.sub(y_hat, y)), axis=1))
                    loss = ad.add(loss, ad.mul(gap, cfg.distill_weight))
            else:  # zo_reprog
                x_rep = apply_concat(x, reprog).data
                y = handle.forward(x_rep if handle.frontend_inside else features(x_rep).data)
                loss = head.loss(backend.forward(y, train=True), lab)
                if n:
                    g_w = _zo_step(handle, backend, head, fbank, reprog, x, lab, method, zo_rng)
                    meta["zo_queries"] += 2 * method.zo_probes
                    adam_step([reprog.w], [g_w], zo_state, lr, cfg.weight_decay)
            if not np.isfinite(loss.data).all():
                raise FloatingPointError(f"loss diverged at epoch {epoch}, step {meta['steps']}")
            grads = ad.grad(loss, params)
            adam_step(params, grads, opt, lr, cfg.weight_decay)
            losses.append(loss.item())
            meta["steps"] += 1
        ep_loss = float(np.mean(losses))
        meta["epoch_losses"].append(ep_loss)
        meta["epochs_run"] = epoch + 1
        meta["train_queries"] = handle.forward_queries - q0
        log.info("epoch %d lr %.2e loss %.4f queries %d", epoch + 1, lr, ep_loss, meta["train_queries"])
        if on_epoch is not None:
            on_epoch(epoch + 1, ep_loss, dict(meta))

    meta["final_loss"] = meta["epoch_losses"][-1]
    meta["train_queries"] = handle.forward_queries - q0
    meta["inner_gradient_count"] = handle.inner_gradient_count()
    out_handle = handle
    if finetuned is not None:
        finetuned.set_requires_grad(False)
        out_handle = wrap_blackbox(finetuned, handle.model_hash, handle.frontend)
    return AdaptedSystem(
        out_handle, method, fbank, reprog.w.data.copy(), backend, accounting, meta, finetuned
    )


def _zo_step(handle, backend, head, fbank, reprog, x, labels, method, rng) -> np.ndarray:
    saved = [b.copy() for b in backend.buffers()]

    def loss_fn(w_val: np.ndarray) -> float:
        p = init_params(w_val.size)
        p.w.data = w_val
        with no_grad():
            x_rep = apply_concat(x, p).data
            y = handle.forward(x_rep if handle.frontend_inside else log_fbank(x_rep, fbank).data)
            val = head.loss(backend.forward(y, train=True), labels).item()
        backend.set_buffers(*saved)
        return val

    return zo_grad_estimate(loss_fn, reprog.w.data.copy(), method.zo_probes, method.zo_sigma, rng)
