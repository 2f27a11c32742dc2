"""Flat ``key = value`` run configuration.

Every key has a typed default below; a config file only lists overrides.
Unknown keys are rejected so a typo never silently falls back to a default.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .blackbox import TrainConfig
from .dsp import FbankConfig
from .nets import BackendSpec, EmbedderSpec
from .reprogram import seconds_to_samples

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "sample_rate": 4000,
    "fbank.frame_length": 128,
    "fbank.hop": 64,
    "fbank.fft_size": 128,
    "fbank.n_mels": 24,
    "fbank.f_min": 0.0,
    "fbank.f_max": 2000.0,
    "fbank.log_floor": 1e-8,
    "embedder.channels": 128,
    "embedder.n_blocks": 2,
    "embedder.context": 1,
    "embedder.embed_dim": 32,
    "estimator.channels": 8,
    "reprog.seconds": 0.3,
    "reprog.n": -1,  # -1: derive from reprog.seconds
    "backend.kind": "fc_residual",
    "backend.k": 64,
    "train.batch_size": 32,
    "train.crop_seconds": 2.0,
    "train.lr": 1e-2,
    "train.weight_decay": 1e-4,
    "train.lr_drop_epochs": (20, 30),
    "train.lr_drop_ratio": 10.0,
    "train.epochs": 40,
    "train.distill_weight": 0.0,
    "pretrain.batch_size": 32,
    "pretrain.lr": 3e-3,
    "pretrain.epochs": 20,
    "pretrain.silence_seconds": 0.4,
    "data.source_speakers": 100,
    "data.source_utts": 8,
    "data.train_speakers": 40,
    "data.train_utts": 10,
    "data.eval_speakers": 20,
    "data.eval_utts": 10,
    "data.duration": 2.5,
    "data.eval_duration": 3.0,
    "data.n_target": 1000,
    "data.n_nontarget": 1000,
    "paths.work": "work",
}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str) -> Any:
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Overrides from ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: dict(DEFAULTS))

    def __post_init__(self):
        unknown = set(self.values) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown keys: {', '.join(sorted(unknown))}")
        merged = {**DEFAULTS, **self.values}
        object.__setattr__(self, "values", merged)
        n, secs, sr = merged["reprog.n"], merged["reprog.seconds"], merged["sample_rate"]
        if n >= 0 and "reprog.seconds" in self._explicit and seconds_to_samples(secs, sr) != n:
            raise ConfigError(f"reprog.n = {n} disagrees with reprog.seconds = {secs} at {sr} Hz")
        # surface invalid sub-configs at load time
        self.fbank, self.embedder, self.estimator, self.backend, self.train(), self.pretrain()

    @property
    def _explicit(self) -> set[str]:
        return {k for k, v in self.values.items() if v != DEFAULTS[k]}

    @classmethod
    def load(cls, path=None, **overrides) -> RunConfig:
        vals: dict[str, Any] = {}
        if path is not None:
            p = Path(path)
            try:
                text = p.read_text()
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {p}") from None
            vals.update(parse_config_text(text, str(p)))
        for k, v in overrides.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown key {k!r}")
            vals[k] = v
        return cls(vals)

    def with_values(self, **kw) -> RunConfig:
        vals = dict(self.values)
        for k, v in kw.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown key {k!r}")
            vals[k] = v
        if "reprog.seconds" in kw and "reprog.n" not in kw:
            vals["reprog.n"] = -1
        return RunConfig(vals)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.values.items())

    # -- typed views ---------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def reprog_n(self) -> int:
        n = self.values["reprog.n"]
        return n if n >= 0 else seconds_to_samples(self.values["reprog.seconds"], self.values["sample_rate"])

    @property
    def fbank(self) -> FbankConfig:
        v = self.values
        try:
            return FbankConfig(
                sample_rate=v["sample_rate"],
                frame_length=v["fbank.frame_length"],
                hop=v["fbank.hop"],
                fft_size=v["fbank.fft_size"],
                n_mels=v["fbank.n_mels"],
                f_min=v["fbank.f_min"],
                f_max=v["fbank.f_max"],
                log_floor=v["fbank.log_floor"],
            )
        except ValueError as e:
            raise ConfigError(f"fbank: {e}") from None

    def _embedder(self, channels: int) -> EmbedderSpec:
        v = self.values
        try:
            return EmbedderSpec(channels, v["embedder.n_blocks"], v["embedder.context"], v["embedder.embed_dim"], v["fbank.n_mels"])
        except ValueError as e:
            raise ConfigError(f"embedder: {e}") from None

    @property
    def embedder(self) -> EmbedderSpec:
        return self._embedder(self.values["embedder.channels"])

    @property
    def estimator(self) -> EmbedderSpec:
        return self._embedder(self.values["estimator.channels"])

    @property
    def backend(self) -> BackendSpec:
        try:
            return BackendSpec(self.values["backend.kind"], self.values["backend.k"])
        except ValueError as e:
            raise ConfigError(f"backend: {e}") from None

    def train(self) -> TrainConfig:
        v = self.values
        try:
            return TrainConfig(
                batch_size=v["train.batch_size"],
                crop_seconds=v["train.crop_seconds"],
                lr=v["train.lr"],
                weight_decay=v["train.weight_decay"],
                lr_drop_epochs=v["train.lr_drop_epochs"],
                lr_drop_ratio=v["train.lr_drop_ratio"],
                epochs=v["train.epochs"],
                seed=self.seed,
                distill_weight=v["train.distill_weight"],
            )
        except ValueError as e:
            raise ConfigError(f"train: {e}") from None

    def pretrain(self) -> TrainConfig:
        v = self.values
        try:
            return TrainConfig(
                batch_size=v["pretrain.batch_size"],
                crop_seconds=v["train.crop_seconds"],
                lr=v["pretrain.lr"],
                weight_decay=v["train.weight_decay"],
                lr_drop_epochs=(),
                epochs=v["pretrain.epochs"],
                seed=self.seed,
            )
        except ValueError as e:
            raise ConfigError(f"pretrain: {e}") from None


def _fmt(v: Any) -> str:
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)
