"""End-to-end workflows behind the command-line interface.

Everything lives under one work directory::

    data/{source,source_eval,target_train,target_eval}/   WAV + manifest.tsv
    data/trials.tsv, data/source_trials.tsv, data/summary.json
    model/model.bin, model/model.json
    systems/<name>.bin, systems/<name>.json
    scores/<name>.tsv, scores/<name>.json
    report.md, report.csv, sweeps/<axis>.{md,csv}
    logs/<command>.log        deterministic log
    logs/<command>.times      the same lines with wall-clock timestamps
"""
from __future__ import annotations

import json
import logging
import shutil
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import synthdata as sd
from .autodiff import no_grad
from .blackbox import (
    METHODS,
    AdaptationMethod,
    AdaptedSystem,
    file_hash,
    load_system,
    save_system,
    train_adaptation,
    wrap_blackbox,
)
from .config import RunConfig
from .dsp import log_fbank
from .evaluate import EERResult, MethodRecord, compute_eer, cosine_score, report_table, sweep_table
from .nets import Embedder, build_embedder, embedder_from_bytes, embedder_to_bytes

log = logging.getLogger("bbreprog")

SPLITS = {
    # name: (domain, speaker offset)
    "source": ("source", 0),
    "source_eval": ("source", 500),
    "target_train": ("target", 1000),
    "target_eval": ("target", 2000),
}
SWEEP_AXES = ("reprog.seconds", "estimator.channels")
SWEEP_METHOD = "grad_reprog"


class WorkflowError(RuntimeError):
    pass


@dataclass(frozen=True)
class Layout:
    root: Path

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def model(self) -> Path:
        return self.root / "model" / "model.bin"

    @property
    def model_meta(self) -> Path:
        return self.root / "model" / "model.json"

    def system(self, name: str) -> Path:
        return self.root / "systems" / f"{name}.bin"

    def scores(self, name: str) -> Path:
        return self.root / "scores" / f"{name}.tsv"

    def result(self, name: str) -> Path:
        return self.root / "scores" / f"{name}.json"

    @property
    def logs(self) -> Path:
        return self.root / "logs"


def layout(cfg: RunConfig, out=None) -> Layout:
    return Layout(Path(out if out is not None else cfg["paths.work"]))


@contextmanager
def command_log(lay: Layout, name: str):
    """Route package log records to ``<name>.log`` and ``<name>.times``."""
    lay.logs.mkdir(parents=True, exist_ok=True)
    plain = logging.FileHandler(lay.logs / f"{name}.log", mode="w")
    plain.setFormatter(logging.Formatter("%(message)s"))
    stamped = logging.FileHandler(lay.logs / f"{name}.times", mode="w")
    stamped.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
    prev = log.level
    log.setLevel(logging.INFO)
    log.addHandler(plain)
    log.addHandler(stamped)
    try:
        yield
    finally:
        for h in (plain, stamped):
            log.removeHandler(h)
            h.close()
        log.setLevel(prev)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise WorkflowError(f"missing artifact: {path}") from None


# ----------------------------------------------------------------------------
# synth
# ----------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, out=None, force: bool = False) -> dict:
    lay = layout(cfg, out)
    if lay.data.exists():
        if not force:
            raise WorkflowError(f"{lay.data} exists; pass --force to overwrite")
        shutil.rmtree(lay.data)
    lay.data.mkdir(parents=True)
    with command_log(lay, "synth"):
        sr, seed = cfg["sample_rate"], cfg.seed
        sizes = {
            "source": (cfg["data.source_speakers"], cfg["data.source_utts"], cfg["data.duration"]),
            "source_eval": (cfg["data.eval_speakers"], cfg["data.eval_utts"], cfg["data.eval_duration"]),
            "target_train": (cfg["data.train_speakers"], cfg["data.train_utts"], cfg["data.duration"]),
            "target_eval": (cfg["data.eval_speakers"], cfg["data.eval_utts"], cfg["data.eval_duration"]),
        }
        summary: dict = {"seed": seed, "sample_rate": sr, "splits": {}}
        for split, (n_spk, n_utt, dur) in sizes.items():
            domain, offset = SPLITS[split]
            rows = sd.gen_dataset(
                lay.data / split, n_spk, n_utt, sd.DOMAINS[domain], seed,
                speaker_offset=offset, duration_s=dur, sample_rate=sr,
            )
            summary["splits"][split] = {
                "files": len(rows),
                "speakers": n_spk,
                "sha256": {r.path: file_hash(lay.data / split / r.path) for r in rows},
            }
            log.info("%s: %d utterances, %d speakers, domain %s", split, len(rows), n_spk, domain)
        for split, name in (("target_eval", "trials.tsv"), ("source_eval", "source_trials.tsv")):
            rows = [sd.ManifestRow(f"{split}/{r.path}", r.speaker, r.domain) for r in sd.read_manifest(lay.data / split / "manifest.tsv")]
            trials = sd.gen_trials(rows, cfg["data.n_target"], cfg["data.n_nontarget"], seed)
            sd.write_trials(lay.data / name, trials)
            summary[name] = file_hash(lay.data / name)
            log.info("%s: %d trials", name, len(trials))
        _write_json(lay.data / "summary.json", summary)
    return summary


def load_split(data_dir: Path, split: str) -> tuple[list[np.ndarray], list[int]]:
    """Waveforms and speaker ids, in manifest order."""
    manifest = data_dir / split / "manifest.tsv"
    if not manifest.exists():
        raise WorkflowError(f"missing dataset manifest: {manifest}")
    waves, spk = [], []
    for r in sd.read_manifest(manifest):
        x, _ = sd.read_wav(data_dir / split / r.path)
        waves.append(x)
        spk.append(r.speaker)
    return waves, spk


def _labelled(waves, speakers) -> list[tuple[np.ndarray, int]]:
    index = {s: i for i, s in enumerate(sorted(set(speakers)))}
    return [(w, index[s]) for w, s in zip(waves, speakers)]


# ----------------------------------------------------------------------------
# pretrain
# ----------------------------------------------------------------------------


def pad_silence(waves: Sequence[np.ndarray], n: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Insert ``n`` zero samples per utterance, split randomly between its two ends."""
    out = []
    for w in waves:
        k = int(rng.integers(0, n + 1))
        out.append(np.concatenate([np.zeros(k), w, np.zeros(n - k)]))
    return out


def cmd_pretrain(cfg: RunConfig, out=None) -> dict:
    lay = layout(cfg, out)
    with command_log(lay, "pretrain"):
        waves, spk = load_split(lay.data, "source")
        fb = cfg.fbank
        n_sil = int(round(cfg["pretrain.silence_seconds"] * fb.sample_rate))
        waves = pad_silence(waves, n_sil, np.random.default_rng([cfg.seed, 0x511]))
        net = build_embedder(cfg.embedder, seed=cfg.seed)
        with no_grad():
            frames = np.concatenate([log_fbank(w, fb).data for w in waves])
        net.in_mean = frames.mean(axis=0)
        net.in_std = frames.std(axis=0)
        log.info("pretrain: %d utterances, %d speakers, %d params", len(waves), len(set(spk)), net.n_params())

        try:
            system = train_adaptation(
                AdaptationMethod("full_finetune", None), _labelled(waves, spk), cfg.pretrain(), fb,
                model=net,
            )
        except FloatingPointError as e:
            raise WorkflowError(f"pretraining diverged: {e}") from None
        trained = system.finetuned
        lay.model.parent.mkdir(parents=True, exist_ok=True)
        lay.model.write_bytes(embedder_to_bytes(trained))
        digest = file_hash(lay.model)
        net2 = load_model(lay, digest)
        res = eval_trials(_none_system(net2, digest, cfg), lay.data, lay.data / "source_trials.tsv")
        meta = {
            "sha256": digest,
            "spec": asdict(cfg.embedder),
            "n_params": trained.n_params(),
            "epoch_losses": system.metadata["epoch_losses"],
            "source_eer": res.eer,
        }
        _write_json(lay.model_meta, meta)
        log.info("model sha256 %s, source-domain EER %.2f%%", digest, res.eer)
    return meta


def load_model(lay: Layout, expected_hash: str | None = None) -> Embedder:
    if not lay.model.exists():
        raise WorkflowError(f"missing model artifact: {lay.model}; run pretrain first")
    digest = file_hash(lay.model)
    if expected_hash is None:
        expected_hash = _read_json(lay.model_meta)["sha256"]
    if digest != expected_hash:
        raise WorkflowError(f"{lay.model}: content hash {digest[:12]} does not match recorded {expected_hash[:12]}")
    net, _ = embedder_from_bytes(lay.model.read_bytes())
    net.set_requires_grad(False)
    return net


def _none_system(net: Embedder, digest: str, cfg: RunConfig) -> AdaptedSystem:
    return train_adaptation(AdaptationMethod("none", None), [], cfg.train(), cfg.fbank, handle=wrap_blackbox(net, digest))


# ----------------------------------------------------------------------------
# adapt / eval
# ----------------------------------------------------------------------------


def make_method(cfg: RunConfig, kind: str) -> AdaptationMethod:
    if kind not in METHODS:
        raise WorkflowError(f"unknown method {kind!r}; known: {', '.join(METHODS)}")
    backend = cfg.backend if kind not in ("none", "full_finetune") else None
    est = cfg.estimator if kind == "grad_reprog" else None
    n = cfg.reprog_n if kind in ("vanilla_reprog", "grad_reprog", "zo_reprog") else 0
    return AdaptationMethod(kind, backend, n, est)


def cmd_adapt(cfg: RunConfig, method: str, out=None, blackbox_strict: bool = False, name: str | None = None) -> dict:
    lay = layout(cfg, out)
    name = name or method
    m = make_method(cfg, method)
    with command_log(lay, f"adapt_{name}"):
        digest = _read_json(lay.model_meta)["sha256"]
        net = load_model(lay, digest)
        handle = wrap_blackbox(net, digest)
        data = [] if method == "none" else _labelled(*load_split(lay.data, "target_train"))

        # white-box methods are the only ones handed the network itself
        system = train_adaptation(
            m, data, cfg.train(), cfg.fbank,
            model=None if m.blackbox_compatible else net,
            handle=handle, blackbox_strict=blackbox_strict,
        )
        acc = system.accounting
        log.info(
            "accounting %s: bp_params %d (%.4f%%) added_params %d (%.4f%%) base %d",
            m.label, acc.bp_params, acc.bp_pct, acc.added_params, acc.add_pct, acc.base_params,
        )
        log.info("black-box forward queries %d", system.metadata["train_queries"])
        path = lay.system(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_system(system, path)
        load_system(path, net, digest)  # validity check
        info = {
            "name": name,
            "method": method,
            "label": m.label,
            "blackbox_compatible": m.blackbox_compatible,
            "accounting": asdict(acc),
            "bp_pct": acc.bp_pct,
            "add_pct": acc.add_pct,
            "reprog_n": int(system.w.size),
            "config": cfg.values | {"train.lr_drop_epochs": list(cfg["train.lr_drop_epochs"])},
            "metadata": system.metadata,
            "sha256": file_hash(path),
        }
        _write_json(path.with_suffix(".json"), info)
    return info


def embed_files(system: AdaptedSystem, data_dir: Path, paths: Sequence[str], batch: int = 64) -> dict[str, np.ndarray]:
    """Each distinct file embedded once; equal-length files share a batch."""
    uniq = sorted(set(paths))
    waves = {}
    for p in uniq:
        full = data_dir / p
        if not full.exists():
            raise WorkflowError(f"missing audio file: {full}")
        waves[p] = sd.read_wav(full)[0]
    by_len: dict[int, list[str]] = {}
    for p in uniq:
        by_len.setdefault(len(waves[p]), []).append(p)
    out = {}
    for group in by_len.values():
        for i in range(0, len(group), batch):
            chunk = group[i : i + batch]
            emb = system.embed_batch(np.stack([waves[p] for p in chunk]))
            out.update(zip(chunk, emb))
    return out


def score_trials(system: AdaptedSystem, data_dir: Path, trials_path: Path) -> tuple[list[int], list[float]]:
    if not trials_path.exists():
        raise WorkflowError(f"missing trial list: {trials_path}")
    trials = sd.read_trials(trials_path)
    emb = embed_files(system, data_dir, [p for t in trials for p in (t.enrol, t.test)])
    return [t.label for t in trials], [cosine_score(emb[t.enrol], emb[t.test]) for t in trials]


def eval_trials(system: AdaptedSystem, data_dir: Path, trials_path: Path) -> EERResult:
    labels, scores = score_trials(system, data_dir, trials_path)
    return compute_eer(scores, labels)


def cmd_eval(cfg: RunConfig, method: str, out=None, name: str | None = None) -> dict:
    lay = layout(cfg, out)
    name = name or method
    with command_log(lay, f"eval_{name}"):
        info = _read_json(lay.system(name).with_suffix(".json"))
        digest = _read_json(lay.model_meta)["sha256"]
        net = load_model(lay, digest)
        if not lay.system(name).exists():
            raise WorkflowError(f"missing system artifact: {lay.system(name)}")
        system = load_system(lay.system(name), net, digest)
        labels, scores = score_trials(system, lay.data, lay.data / "trials.tsv")
        res = compute_eer(scores, labels)
        sp = lay.scores(name)
        sp.parent.mkdir(parents=True, exist_ok=True)
        sp.write_text("".join(f"{l}\t{s:.17g}\n" for l, s in zip(labels, scores)))
        out_info = {
            "name": name,
            "method": info["method"],
            "label": info["label"],
            "eer": res.eer,
            "threshold": res.threshold,
            "n_target": res.n_target,
            "n_nontarget": res.n_nontarget,
            "bp_pct": info["bp_pct"],
            "add_pct": info["add_pct"],
            "blackbox_compatible": info["blackbox_compatible"],
        }
        _write_json(lay.result(name), out_info)
        log.info("%s: EER %.2f%% over %d trials", info["label"], res.eer, len(labels))
    return out_info


# ----------------------------------------------------------------------------
# report / sweep
# ----------------------------------------------------------------------------


def _record(r: dict) -> MethodRecord:
    return MethodRecord(r["method"], r["label"], r["eer"], r["bp_pct"], r["add_pct"], r["blackbox_compatible"])


def cmd_report(cfg: RunConfig, out=None) -> tuple[str, str]:
    lay = layout(cfg, out)
    with command_log(lay, "report"):
        if not lay.result("none").exists():
            cmd_adapt(cfg, "none", out=lay.root)
            cmd_eval(cfg, "none", out=lay.root)
        results = [
            _read_json(lay.result(m)) for m in METHODS if lay.result(m).exists()
        ]
        md, csv_text = report_table([_record(r) for r in results])
        (lay.root / "report.md").write_text(md)
        (lay.root / "report.csv").write_text(csv_text)
        log.info("report: %d systems", len(results))
    return md, csv_text


def _sweep_name(axis: str, v) -> str:
    return f"sweep_{axis.replace('.', '_')}_{v:g}"


def cmd_sweep(cfg: RunConfig, axis: str, values: Sequence[float], out=None) -> tuple[str, str]:
    if axis not in SWEEP_AXES:
        raise WorkflowError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    if not values:
        raise WorkflowError("sweep needs at least one value")
    lay = layout(cfg, out)
    eers = []
    label = None
    for v in values:
        v = int(v) if axis == "estimator.channels" else float(v)
        sub = cfg.with_values(**{axis: v})
        name = _sweep_name(axis, v)
        info = cmd_adapt(sub, SWEEP_METHOD, out=lay.root, name=name)
        label = info["label"]
        eers.append(cmd_eval(sub, SWEEP_METHOD, out=lay.root, name=name)["eer"])
    md, csv_text = sweep_table(axis, values, {label: eers})
    d = lay.root / "sweeps"
    d.mkdir(parents=True, exist_ok=True)
    stem = axis.replace(".", "_")
    (d / f"{stem}.md").write_text(md)
    (d / f"{stem}.csv").write_text(csv_text)
    return md, csv_text
