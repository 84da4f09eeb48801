import numpy as np
import pytest

from blindeq import autodiff as ad
from blindeq import channel as ch
from blindeq import nonlinear as nl
from blindeq import vae_loss as vl
from blindeq.channel import BPSK, Observation


def identity_net(params):
    """Make the per-sample net compute a -> a (first unit relays positives,
    second relays negatives through the relu pair)."""
    for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
        params.values[name][:] = 0.0
    params.values["w1"][0] = 1.0    # h1_0 = relu(a)
    params.values["w1"][1] = -1.0   # h1_1 = relu(-a)
    params.values["w2"][0] = 1.0    # h2_0 = relu(h1_0)
    params.values["w2"][HID + 1] = 1.0  # h2_1 = relu(h1_1)
    params.values["w3"][0] = 1.0
    params.values["w3"][1] = -1.0   # out = relu(a) - relu(-a) = a
    return params


HID = nl.HIDDEN


class TestDecoder:
    def test_identity_net_gives_convolution(self):
        rng = np.random.default_rng(0)
        params = identity_net(nl.init_decoder(3, rng))
        params.values["h"][:] = [0.2, 0.9, 0.3]
        x = rng.normal(size=20)
        out = nl.decoder_forward(x, params)
        want = np.convolve(x, [0.2, 0.9, 0.3])[:20]
        assert np.allclose(out, want, atol=1e-12)

    def test_inference_deterministic(self):
        rng = np.random.default_rng(1)
        params = nl.init_decoder(3, rng)
        x = rng.normal(size=16)
        a = nl.decoder_forward(x, params, train_mode=False)
        b = nl.decoder_forward(x, params, train_mode=False)
        assert np.array_equal(a, b)

    def test_matches_layer_oracle(self):
        rng = np.random.default_rng(2)
        params = nl.init_decoder(4, rng)
        x = rng.normal(size=12)
        got = nl.decoder_forward(x, params, mode="causal")
        v = params.values
        a = np.convolve(x, v["h"])[:12]
        h1 = np.maximum(np.outer(v["w1"], a) + v["b1"][:, None], 0.0)
        w2 = v["w2"].reshape(HID, HID)
        h2 = np.maximum(w2 @ h1 + v["b2"][:, None], 0.0)
        want = v["w3"] @ h2 + v["b3"][0]
        assert np.allclose(got, want, atol=1e-12)

    def test_dropout_expectation_close_to_inference(self):
        rng = np.random.default_rng(3)
        params = nl.init_decoder(3, rng)
        x = rng.normal(size=6)
        base = nl.decoder_forward(x, params, train_mode=False)
        draws = np.stack([
            nl.decoder_forward(x, params, train_mode=True, rng=rng)
            for _ in range(10_000)
        ])
        # inverted dropout makes the train-time mean track inference output;
        # relu nonlinearity leaves a small systematic gap
        assert np.allclose(draws.mean(axis=0), base, atol=0.3, rtol=0.3)


class TestGumbel:
    def test_symmetric_case(self):
        c = 1.0 / (1.0 + np.exp(-(np.log(0.5) - np.log(0.5) + 0.0) / 3.0))
        assert c == pytest.approx(0.5)

    def test_tau_limit_is_hard_threshold(self):
        rng = np.random.default_rng(4)
        q = np.full(200, 0.3)
        gd = nl.gumbel_noise(200, rng)
        logits = np.log(q) - np.log1p(-q)
        tape = ad.Tape()
        qv = tape.leaf(q)
        tau_raw = tape.leaf(np.array([np.log(1e-6)]))
        c = (nl.gumbel_softmax_on_tape(qv, ad.exp(ad.getitem(tau_raw, 0)), gd).value + 1) / 2
        want = (logits + gd > 0).astype(float)
        assert np.allclose(c, want, atol=1e-6)

    def test_empirical_mean_matches_q(self):
        rng = np.random.default_rng(5)
        q = np.full(10_000, 0.3)
        s = nl.gumbel_softmax_sample(q, tau=0.1, rng=rng)
        hard = (s.c_hat > 0.5).mean()
        sd = 3 * np.sqrt(0.3 * 0.7 / 10_000)
        assert abs(hard - 0.3) < sd

    def test_shift_invariance(self):
        # adding a common constant to both unnormalized log-probs cancels
        rng = np.random.default_rng(6)
        q = rng.uniform(0.1, 0.9, size=50)
        gd = nl.gumbel_noise(50, rng)
        logits = np.log(q) - np.log1p(-q)
        a = 1 / (1 + np.exp(-(logits + gd) / 2.0))
        shifted = 1 / (1 + np.exp(-((logits + 7.0) + gd - 7.0) / 2.0))
        assert np.allclose(a, shifted)

    @pytest.mark.parametrize("qval", [0.1, 0.3, 0.5, 0.9])
    def test_tv_distance_small_at_low_tau(self, qval):
        rng = np.random.default_rng(7)
        n = 10_000
        s = nl.gumbel_softmax_sample(np.full(n, qval), tau=0.05, rng=rng)
        p_hat = (s.c_hat > 0.5).mean()
        tv = abs(p_hat - qval)  # binary distribution: TV = |p_hat - q|
        assert tv < 0.02

    def test_invalid_tau(self):
        with pytest.raises(ValueError):
            nl.gumbel_softmax_sample(np.array([0.5]), tau=0.0,
                                     rng=np.random.default_rng(0))


class TestBernoulli:
    def test_all_ones(self):
        rng = np.random.default_rng(8)
        assert np.all(nl.bernoulli_sample(np.ones(50), rng) == 1.0)

    def test_all_minus_ones(self):
        rng = np.random.default_rng(9)
        assert np.all(nl.bernoulli_sample(np.zeros(50), rng) == -1.0)

    def test_mean_near_zero_at_half(self):
        rng = np.random.default_rng(10)
        x = nl.bernoulli_sample(np.full(10_000, 0.5), rng)
        assert abs(x.mean()) < 3 / np.sqrt(10_000)


class TestLossAndGrads:
    def _setup(self, n=16, seed=11):
        rng = np.random.default_rng(seed)
        x = ch.random_symbols(n, BPSK, rng)
        spec = ch.ChannelSpec(h=ch.builtin("ht1"), nonlinearity="g1")
        clean = ch.clean_output(x, spec)
        spec.sigma_w2 = ch.sigma_for_snr(clean, 15.0)
        y = ch.apply_channel(x, spec, rng)
        params = nl.init_decoder(3, rng)
        from blindeq import encoder as enc
        ep = enc.init_encoder(BPSK, rng=rng)
        for name, v in ep.kernels.items():
            params.add(name, v)
        return y, params, rng

    def test_entropy_gradient_matches_fd(self):
        # the analytic -grad H component, isolated at fixed samples
        rng = np.random.default_rng(12)
        from blindeq import encoder as enc

        yv = rng.normal(size=16)
        params = ad.ParamStore()
        ep = enc.init_encoder(BPSK, rng=rng)
        for name, v in ep.kernels.items():
            params.add(name, v)

        def entropy_at():
            tape = ad.Tape()
            leaves = params.leaves(tape)
            q = enc.encode_bpsk_on_tape(yv, leaves)
            return vl.entropy_on_tape(q), leaves

        h_var, leaves = entropy_at()
        grads = ad.record_and_backward(h_var, leaves)
        step = 1e-5
        for name in params.names():
            v0 = params.values[name].copy()
            for i in range(v0.size):
                params.values[name][i] = v0[i] + step
                hi = float(entropy_at()[0].value)
                params.values[name][i] = v0[i] - step
                lo = float(entropy_at()[0].value)
                params.values[name][i] = v0[i]
                assert grads[name][i] == pytest.approx((hi - lo) / (2 * step),
                                                       rel=1e-4, abs=1e-7)

    def test_zero_residual_guarded(self):
        # deterministic truth + identity net + exact taps: residual 0, the
        # floored log keeps everything finite
        rng = np.random.default_rng(13)
        x = ch.random_symbols(12, BPSK, rng)
        y = ch.apply_channel(x, ch.ChannelSpec(h=ch.builtin("ht1")), rng)
        params = identity_net(nl.init_decoder(3, rng))
        params.values["h"][:] = ch.builtin("ht1")
        tape = ad.Tape()
        leaves = params.leaves(tape)
        out = nl.decoder_on_tape(x.i, leaves, "causal", False, None)
        val = nl._log_residual(y.i, out)
        assert np.isfinite(float(val.value))

    def test_theta_gradient_concentrates(self):
        # identity-net decoder with offset taps: every tap gradient is well
        # away from zero, so relative standard errors are meaningful
        rng = np.random.default_rng(11)
        x = ch.random_symbols(32, BPSK, rng)
        spec = ch.ChannelSpec(h=ch.builtin("ht1"))
        clean = ch.clean_output(x, spec)
        spec.sigma_w2 = ch.sigma_for_snr(clean, 15.0)
        y = ch.apply_channel(x, spec, rng)
        params = identity_net(nl.init_decoder(3, rng))
        from blindeq import encoder as enc
        ep = enc.init_encoder(BPSK, rng=rng)
        for name, v in ep.kernels.items():
            params.add(name, np.zeros_like(v))
        params.values["h"][:] = ch.builtin("ht1") * 1.6

        draws = []
        for k in range(1000):
            _, grads = nl.loss_and_grads_nl(y, params, np.random.default_rng(k))
            draws.append(grads["h"])
        draws = np.array(draws)
        mean = draws.mean(axis=0)
        sem = draws.std(axis=0) / np.sqrt(len(draws))
        assert np.all(sem < 0.1 * np.abs(mean))

    def test_grad_map_covers_all_params(self):
        y, params, rng = self._setup()
        _, grads = nl.loss_and_grads_nl(y, params, rng)
        assert set(grads) == set(params.names())


def resolved_ser(hard, true, maxd=8):
    best = 1.0
    n = len(true)
    for s in (1.0, -1.0):
        for d in range(-maxd, maxd + 1):
            a, b = (s * hard[d:], true[:n - d]) if d >= 0 else (s * hard[:n + d], true[-d:])
            best = min(best, np.mean(a != b))
    return best


class TestTraining:
    def test_identity_channel_matches_linear(self):
        rng = np.random.default_rng(14)
        x = ch.random_symbols(300, BPSK, rng)
        spec = ch.ChannelSpec(h=np.array([1.0]))
        clean = ch.clean_output(x, spec)
        spec.sigma_w2 = ch.sigma_for_snr(clean, 14.0)
        y = ch.apply_channel(x, spec, rng)

        lin = vl.train_vaee_linear(y, BPSK, 1, vl.TrainConfig(iters=300, mode="causal"),
                                   np.random.default_rng(50))
        cfg = nl.NlTrainConfig(iters=200, anneal_iters=100, warmup_iters=300, batch_len=300)
        nlr = nl.train_vaee_nl(y, 1, cfg, np.random.default_rng(51))

        def ser(post):
            hard, _ = post.hard_symbols()
            return min(np.mean(hard != x.i), np.mean(-hard != x.i))

        s_lin, s_nl = ser(lin.posterior), ser(nlr.posterior)
        assert s_nl <= max(2 * s_lin, 2 / 300)

    def test_g1_high_snr_reaches_zero_ser(self):
        rng = np.random.default_rng(0)
        x = ch.random_symbols(576, BPSK, rng)
        spec = ch.ChannelSpec(h=ch.builtin("ht3"), nonlinearity="g1")
        clean = ch.clean_output(x, spec)
        spec.sigma_w2 = ch.sigma_for_snr(clean, 20.0)
        y = ch.apply_channel(x, spec, rng)
        cfg = nl.NlTrainConfig(iters=600, anneal_iters=300, batch_len=576,
                               samples=4, k1=31, k2=11)
        res = nl.train_vaee_nl(y, 6, cfg, np.random.default_rng(9000))
        hard, _ = res.posterior.hard_symbols()
        assert resolved_ser(hard, x.i) == 0.0

    def test_tau_stays_positive(self):
        rng = np.random.default_rng(16)
        x = ch.random_symbols(128, BPSK, rng)
        spec = ch.ChannelSpec(h=ch.builtin("ht1"), nonlinearity="g2")
        clean = ch.clean_output(x, spec)
        spec.sigma_w2 = ch.sigma_for_snr(clean, 10.0)
        y = ch.apply_channel(x, spec, rng)
        cfg = nl.NlTrainConfig(iters=60, anneal_iters=20, warmup_iters=100,
                               batch_len=128, polish=False)
        res = nl.train_vaee_nl(y, 3, cfg, np.random.default_rng(61))
        assert res.tau > 0.0
