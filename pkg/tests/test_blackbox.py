import numpy as np
import pytest

from bbreprog import autodiff as ad
from bbreprog.autodiff import Tensor, parameter
from bbreprog.blackbox import (
    BLACKBOX_COMPATIBLE,
    METHODS,
    AdaptationMethod,
    BlackBoxViolation,
    TrainConfig,
    adapt_forward,
    batches,
    bypass,
    load_system,
    random_crops,
    save_system,
    train_adaptation,
    wrap_blackbox,
    zo_grad_estimate,
)
from bbreprog.dsp import FbankConfig, log_fbank
from bbreprog.nets import AamHead, Backend, BackendSpec, EmbedderSpec, build_embedder
from bbreprog.reprogram import apply_concat, init_params

from oracles import rel_err

FB = FbankConfig(sample_rate=4000, frame_length=32, hop=16, fft_size=32, n_mels=6, f_max=2000.0)
SPEC = EmbedderSpec(channels=6, n_blocks=2, context=1, embed_dim=5, in_dim=6)
EST = EmbedderSpec(channels=3, n_blocks=2, context=1, embed_dim=5, in_dim=6)


def _net(seed=0):
    net = build_embedder(SPEC, seed)
    net.in_mean = np.full(6, -3.0)
    net.in_std = np.full(6, 4.0)
    net.set_requires_grad(False)
    return net


def _data(n=12, n_spk=3, length=900, seed=0):
    rng = np.random.default_rng(seed)
    return [(rng.normal(size=length) * 0.3, i % n_spk) for i in range(n)]


def _cfg(**kw):
    base = dict(batch_size=4, crop_seconds=0.15, lr=1e-2, epochs=2, lr_drop_epochs=(1,), seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestHandle:
    def test_no_model_attribute(self):
        h = wrap_blackbox(_net())
        assert not hasattr(h, "net")
        assert not hasattr(h, "__dict__")
        with pytest.raises(AttributeError):
            h.params = 1

    def test_forward_counts_and_is_parentless(self):
        net = _net()
        h = wrap_blackbox(net)
        feats = np.random.default_rng(0).normal(size=(2, 9, 6))
        y = h.forward(parameter(feats))
        assert h.forward_queries == 1
        assert not y.requires_grad and y._parents == ()
        np.testing.assert_array_equal(y.data, net.forward(feats).data)
        h(feats)
        assert h.forward_queries == 2

    def test_frontend_inside(self):
        net = _net()
        h = wrap_blackbox(net, frontend_in_blackbox=FB)
        x = np.random.default_rng(1).normal(size=(2, 300))
        np.testing.assert_array_equal(h.forward(x).data, net.forward(log_fbank(x, FB)).data)


class TestBypass:
    def test_value_is_y_gradient_is_yhat(self):
        rng = np.random.default_rng(0)
        y = Tensor(rng.normal(size=(3, 4)))
        yh = parameter(rng.normal(size=(3, 4)))
        out = bypass(y, yh)
        assert np.max(np.abs(out.data - y.data)) < 1e-12
        c = rng.normal(size=(3, 4))
        (g,) = ad.grad(ad.sum_(ad.mul(out, c)), [yh])
        np.testing.assert_array_equal(g, c)

    def test_matches_unfused_formula(self):
        rng = np.random.default_rng(1)
        y = parameter(rng.normal(size=(4, 3)) * 1e3)
        yh = parameter(rng.normal(size=(4, 3)))
        c = rng.normal(size=(4, 3))
        ref = ad.add(ad.detach(ad.sub(y, yh)), yh)
        g_ref = ad.grad(ad.sum_(ad.mul(ref, c)), [y, yh])
        out = bypass(y, yh)
        np.testing.assert_array_equal(out.data, y.data)
        assert np.max(np.abs(out.data - ref.data)) < 1e-12 * 1e3
        g = ad.grad(ad.sum_(ad.mul(out, c)), [y, yh])
        np.testing.assert_array_equal(g[0], g_ref[0])
        np.testing.assert_array_equal(g[1], g_ref[1])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            bypass(Tensor(np.zeros(3)), parameter(np.zeros(4)))

    @pytest.mark.parametrize("seed", range(5))
    def test_exact_copy_matches_whitebox(self, seed):
        rng = np.random.default_rng(seed)
        net = _net(seed)
        est = net.copy()
        est.set_requires_grad(True)
        x = rng.normal(size=(3, 500)) * 0.3
        be = Backend(BackendSpec("fc_residual", 4), 5, seed=seed)
        be.fc2_w.data = rng.normal(size=be.fc2_w.shape) * 0.3
        head = AamHead(3, 5, seed=seed)
        lab = np.array([0, 1, 2])

        p = init_params(64)
        p.w.data = rng.normal(size=64) * 0.1
        _, _, _, emb = adapt_forward(wrap_blackbox(net), est, p, be, x, FB, train=True)
        (g_bb,) = ad.grad(head.loss(emb, lab), [p.w])

        white = net.copy()
        q = init_params(64)
        q.w.data = p.w.data.copy()
        be.set_buffers(np.zeros(4), np.ones(4))
        emb_w = be.forward(white.forward(log_fbank(apply_concat(x, q), FB)), train=True)
        (g_wb,) = ad.grad(head.loss(emb_w, lab), [q.w])
        assert rel_err(g_bb, g_wb) < 1e-9


class TestTrainConfig:
    def test_schedule(self):
        cfg = TrainConfig()
        assert [cfg.lr_at(e) for e in (0, 9, 10, 14, 15, 19)] == pytest.approx([1e-3, 1e-3, 1e-4, 1e-4, 1e-5, 1e-5])

    @pytest.mark.parametrize("kw", [dict(lr_drop_epochs=(15, 10)), dict(lr_drop_epochs=(20,)), dict(batch_size=0), dict(lr=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestMethods:
    def test_registry(self):
        assert set(BLACKBOX_COMPATIBLE) == {"none", "backend_only", "grad_reprog", "zo_reprog"}
        assert METHODS[0] == "none"

    def test_grad_reprog_needs_estimator(self):
        with pytest.raises(ValueError):
            AdaptationMethod("grad_reprog", BackendSpec(), 10, None)

    def test_unknown(self):
        with pytest.raises(ValueError):
            AdaptationMethod("magic")

    def test_labels(self):
        assert AdaptationMethod("none", None).label == "None"
        assert AdaptationMethod("grad_reprog", BackendSpec("fc_residual", 64), 10, EST).label == "Grad.Reprog.+Back_FC-64"
        assert AdaptationMethod("backend_only", BackendSpec("bn_only")).label == "Back_BN"


class TestTraining:
    def test_grad_reprog_is_blackbox_pure(self):
        net = _net()
        h = wrap_blackbox(net)
        m = AdaptationMethod("grad_reprog", BackendSpec("fc_residual", 4), 80, EST)
        sys_ = train_adaptation(m, _data(), _cfg(), FB, handle=h)
        meta = sys_.metadata
        assert meta["steps"] == 6
        assert meta["train_queries"] == meta["steps"] == h.forward_queries
        assert meta["inner_gradient_count"] == 0
        assert all(p.grad is None for p in net.parameters())
        assert np.any(sys_.w != 0)

    @pytest.mark.parametrize("kind", ["full_finetune", "vanilla_reprog"])
    def test_whitebox_refused(self, kind):
        m = AdaptationMethod(kind, BackendSpec("fc_residual", 4), 40)
        with pytest.raises(BlackBoxViolation, match="Black-box training allow"):
            train_adaptation(m, _data(), _cfg(), FB, model=_net(), blackbox_strict=True)
        with pytest.raises(BlackBoxViolation):
            train_adaptation(m, _data(), _cfg(), FB, handle=wrap_blackbox(_net()))

    def test_none_is_immediate(self):
        h = wrap_blackbox(_net())
        s = train_adaptation(AdaptationMethod("none", None), _data(), _cfg(), FB, handle=h)
        assert h.forward_queries == 0 and s.w.size == 0 and s.backend is None
        assert s.accounting.bp_params == 0

    @pytest.mark.parametrize("kind", ["backend_only", "full_finetune", "vanilla_reprog", "zo_reprog"])
    def test_methods_run_and_reduce_loss(self, kind):
        net = _net()
        m = AdaptationMethod(kind, BackendSpec("fc_residual", 4), 40, zo_probes=3)
        s = train_adaptation(m, _data(), _cfg(epochs=6, lr_drop_epochs=()), FB, model=net)
        losses = s.metadata["epoch_losses"]
        assert len(losses) == 6 and all(np.isfinite(losses))
        if kind == "zo_reprog":
            assert s.metadata["zo_queries"] == s.metadata["steps"] * 6
        if kind == "full_finetune":
            assert s.finetuned is not None
            assert not np.array_equal(s.finetuned.parameters()[0].data, net.parameters()[0].data)

    def test_deterministic(self):
        m = AdaptationMethod("grad_reprog", BackendSpec("fc_residual", 4), 40, EST)
        a = train_adaptation(m, _data(), _cfg(), FB, handle=wrap_blackbox(_net()))
        b = train_adaptation(m, _data(), _cfg(), FB, handle=wrap_blackbox(_net()))
        np.testing.assert_array_equal(a.w, b.w)
        assert a.metadata["epoch_losses"] == b.metadata["epoch_losses"]

    def test_init_system_scores_zero_padded_input(self):
        net = _net()
        m = AdaptationMethod("grad_reprog", BackendSpec("fc_residual", 4), 64, EST)
        s = train_adaptation(m, _data(), _cfg(epochs=0, lr_drop_epochs=()), FB, handle=wrap_blackbox(net))
        x = np.random.default_rng(3).normal(size=(2, 400))
        padded = np.concatenate([np.zeros((2, 32)), x, np.zeros((2, 32))], axis=1)
        np.testing.assert_allclose(s.embed_batch(x), net.forward(log_fbank(padded, FB)).data, rtol=0, atol=1e-15)

    def test_save_load_roundtrip(self, tmp_path):
        net = _net()
        m = AdaptationMethod("grad_reprog", BackendSpec("fc_residual", 4), 40, EST)
        s = train_adaptation(m, _data(), _cfg(), FB, handle=wrap_blackbox(net, "abc"))
        path = tmp_path / "sys.bin"
        save_system(s, path)
        back = load_system(path, net, "abc")
        x = np.random.default_rng(0).normal(size=(3, 600))
        np.testing.assert_array_equal(back.embed_batch(x), s.embed_batch(x))
        assert back.accounting == s.accounting
        with pytest.raises(ValueError):
            load_system(path, net, "other")


class TestZerothOrder:
    def test_exact_for_linear_with_full_block(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=7)
        calls = []

        def f(w):
            calls.append(1)
            return float(a @ w)

        g = zo_grad_estimate(f, np.zeros(7), n_probes=7, sigma=0.1, rng=rng)
        np.testing.assert_allclose(g, a, atol=1e-12)
        assert len(calls) == 14

    def test_unbiased_on_average(self):
        rng = np.random.default_rng(1)
        A = rng.normal(size=(5, 5))
        A = A @ A.T
        w0 = rng.normal(size=5)

        def f(w):
            return 0.5 * w @ A @ w

        est = np.mean([zo_grad_estimate(f, w0, 2, 1e-3, rng) for _ in range(3000)], axis=0)
        assert rel_err(est, A @ w0) < 0.1

    def test_bad_args(self):
        with pytest.raises(ValueError):
            zo_grad_estimate(lambda w: 0.0, np.zeros(3), 0, 0.1, np.random.default_rng(0))


def test_random_crops_wrap_and_determinism():
    waves = [np.arange(10.0), np.arange(3.0)]
    a = random_crops(waves, 5, np.random.default_rng(0))
    b = random_crops(waves, 5, np.random.default_rng(0))
    np.testing.assert_array_equal(a, b)
    assert np.all(np.diff(a[0]) == 1)
    assert set(a[1]) <= {0.0, 1.0, 2.0}


def test_batches_never_leave_singletons():
    for n in range(2, 40):
        for bs in (2, 3, 4, 8):
            out = batches(n, bs, np.random.default_rng(n))
            assert sorted(np.concatenate(out).tolist()) == list(range(n))
            assert min(len(b) for b in out) >= 2
