import json
import shutil

import pytest
from click.testing import CliRunner

from bbreprog.cli import main
from bbreprog.config import DEFAULTS, ConfigError, RunConfig, parse_config_text
from bbreprog.evaluate import TABLE_COLUMNS, parse_table_csv
from bbreprog.workflows import SWEEP_AXES

TINY = """\
# small enough for unit tests
data.source_speakers = 6
data.source_utts = 4
data.train_speakers = 4
data.train_utts = 4
data.eval_speakers = 4
data.eval_utts = 4
data.duration = 1.0
data.eval_duration = 1.0
data.n_target = 20
data.n_nontarget = 20
pretrain.epochs = 2
train.epochs = 2
train.lr_drop_epochs = 1
train.batch_size = 8
train.crop_seconds = 0.5
embedder.channels = 8
estimator.channels = 4
backend.k = 8
reprog.seconds = 0.05
"""


class TestConfig:
    def test_defaults(self):
        cfg = RunConfig.load()
        assert cfg.reprog_n == 1200
        assert cfg.train().epochs == DEFAULTS["train.epochs"]

    def test_comments_and_overrides(self):
        vals = parse_config_text("# full line\n\ntrain.epochs = 3  # trailing\n")
        assert vals == {"train.epochs": 3}

    @pytest.mark.parametrize(
        "text", ["train.epoch = 3", "train.epochs 3", "train.epochs = three", "seed = 1\nseed = 2"]
    )
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_config_text(text)

    def test_seconds_to_samples(self):
        cfg = RunConfig.load(**{"sample_rate": 16000, "fbank.f_max": 8000.0, "reprog.seconds": 0.3})
        assert cfg.reprog_n == 4800

    def test_explicit_n(self):
        assert RunConfig.load(**{"reprog.n": 77}).reprog_n == 77
        with pytest.raises(ConfigError):
            RunConfig.load(**{"reprog.n": 77, "reprog.seconds": 0.5})

    def test_invalid_subconfig(self):
        with pytest.raises(ConfigError):
            RunConfig.load(**{"fbank.fft_size": 100})

    def test_text_roundtrip(self, tmp_path):
        cfg = RunConfig.load(**{"train.lr_drop_epochs": (3, 5), "backend.kind": "bn_only", "train.lr": 0.5})
        (tmp_path / "c.cfg").write_text(cfg.to_text())
        assert RunConfig.load(tmp_path / "c.cfg").values == cfg.values

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig.load(tmp_path / "none.cfg")


def _invoke(*args):
    res = CliRunner().invoke(main, [str(a) for a in args])
    return res


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    out = root / "w"
    for args in (["synth"], ["pretrain"]):
        res = _invoke(*args, "--config", cfg, "--out", out)
        assert res.exit_code == 0, res.output
    return cfg, out


def test_synth_refuses_existing_then_force(work):
    cfg, out = work
    before = json.loads((out / "data" / "summary.json").read_text())
    res = _invoke("synth", "--config", cfg, "--out", out)
    assert res.exit_code != 0 and "--force" in res.output
    res = _invoke("synth", "--config", cfg, "--out", out, "--force")
    assert res.exit_code == 0, res.output
    assert json.loads((out / "data" / "summary.json").read_text()) == before


def test_synth_default_sizes(work):
    _, out = work
    summary = json.loads((out / "data" / "summary.json").read_text())
    assert summary["splits"]["target_train"]["files"] == 16
    assert (out / "data" / "trials.tsv").exists()
    assert RunConfig.load()["data.train_speakers"] * RunConfig.load()["data.train_utts"] == 400


def test_pretrain_log_and_artifact(work):
    _, out = work
    lines = (out / "logs" / "pretrain.log").read_text().splitlines()
    assert sum(l.startswith("epoch ") for l in lines) == 2
    meta = json.loads((out / "model" / "model.json").read_text())
    assert len(meta["sha256"]) == 64
    assert 0.0 <= meta["source_eer"] <= 100.0


def test_adapt_none_is_immediate(work):
    cfg, out = work
    res = _invoke("adapt", "--config", cfg, "--out", out, "--method", "none")
    assert res.exit_code == 0, res.output
    info = json.loads((out / "systems" / "none.json").read_text())
    assert info["metadata"]["train_queries"] == 0


def test_adapt_grad_reprog_accounting(work):
    cfg, out = work
    res = _invoke("adapt", "--config", cfg, "--out", out, "--method", "grad_reprog")
    assert res.exit_code == 0, res.output
    info = json.loads((out / "systems" / "grad_reprog.json").read_text())
    rc = RunConfig.load(cfg)
    n_w, n_est, n_be = rc.reprog_n, rc.estimator.param_count(), rc.backend.param_count(rc.embedder.embed_dim)
    assert info["accounting"]["bp_params"] == n_w + n_est + n_be
    assert info["accounting"]["added_params"] == n_w + n_be
    assert info["metadata"]["train_queries"] == info["metadata"]["steps"]
    log = (out / "logs" / "adapt_grad_reprog.log").read_text()
    assert f"bp_params {n_w + n_est + n_be}" in log


def test_strict_refuses_whitebox(work):
    cfg, out = work
    res = _invoke("adapt", "--config", cfg, "--out", out, "--method", "full_finetune", "--blackbox-strict")
    assert res.exit_code == 1
    assert "Black-box training allow" in res.output
    assert not (out / "systems" / "full_finetune.bin").exists()


def test_eval_scores_and_determinism(work):
    cfg, out = work
    _invoke("adapt", "--config", cfg, "--out", out, "--method", "none")
    res = _invoke("eval", "--config", cfg, "--out", out, "--method", "none")
    assert res.exit_code == 0, res.output
    first = json.loads((out / "scores" / "none.json").read_text())
    scores = (out / "scores" / "none.tsv").read_text().splitlines()
    assert len(scores) == len((out / "data" / "trials.tsv").read_text().splitlines())
    log1 = (out / "logs" / "eval_none.log").read_text()
    _invoke("eval", "--config", cfg, "--out", out, "--method", "none")
    assert json.loads((out / "scores" / "none.json").read_text()) == first
    assert (out / "logs" / "eval_none.log").read_text() == log1
    meta = json.loads((out / "model" / "model.json").read_text())
    assert meta["sha256"]


def test_eval_missing_audio(work, tmp_path):
    cfg, out = work
    copy = tmp_path / "w"
    shutil.copytree(out, copy)
    _invoke("adapt", "--config", cfg, "--out", copy, "--method", "none")
    victim = sorted((copy / "data" / "target_eval").glob("*.wav"))[0]
    victim.unlink()
    res = _invoke("eval", "--config", cfg, "--out", copy, "--method", "none")
    assert res.exit_code == 1
    assert victim.name in res.output


def test_report(work):
    cfg, out = work
    for m in ("backend_only", "grad_reprog"):
        assert _invoke("adapt", "--config", cfg, "--out", out, "--method", m).exit_code == 0
        assert _invoke("eval", "--config", cfg, "--out", out, "--method", m).exit_code == 0
    res = _invoke("report", "--config", cfg, "--out", out)
    assert res.exit_code == 0, res.output
    rows = parse_table_csv((out / "report.csv").read_text())
    assert tuple(rows[0]) == TABLE_COLUMNS
    labels = [r[0] for r in rows[1:]]
    assert labels[0] == "None" and len(labels) >= 3


@pytest.mark.parametrize("axis,values,n_cols", [("reprog.seconds", "0.02,0.03,0.05", 3), ("estimator.channels", "2,3,4,5,6", 5)])
def test_sweep_shapes(work, axis, values, n_cols):
    cfg, out = work
    res = _invoke("sweep", "--config", cfg, "--out", out, "--axis", axis, "--values", values)
    assert res.exit_code == 0, res.output
    header = parse_table_csv((out / "sweeps" / f"{axis.replace('.', '_')}.csv").read_text())[0]
    assert len(header) == n_cols + 1
    assert axis in SWEEP_AXES


def test_sweep_empty_values(work):
    cfg, out = work
    res = _invoke("sweep", "--config", cfg, "--out", out, "--axis", "reprog.seconds", "--values", ",")
    assert res.exit_code == 1


def test_unknown_config_key(tmp_path):
    (tmp_path / "bad.cfg").write_text("train.epoch = 3\n")
    res = _invoke("synth", "--config", tmp_path / "bad.cfg", "--out", tmp_path / "w")
    assert res.exit_code == 1 and "unknown key" in res.output
