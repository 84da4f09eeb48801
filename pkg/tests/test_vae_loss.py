import numpy as np
import pytest

from blindeq import autodiff as ad
from blindeq import channel as ch
from blindeq import encoder as enc
from blindeq import vae_loss as vl
from blindeq.ldpc import LdpcCode


def conv_matrix(h, n, mode):
    """A[n, k] = h_{n-k} with the mode's indexing, zero outside."""
    m = len(h)
    off = (m - 1) // 2 if mode == "centered" else 0
    a = np.zeros((n, n), dtype=np.asarray(h).dtype)
    for i in range(n):
        for k in range(n):
            j = i + off - k
            if 0 <= j < m:
                a[i, k] = h[j]
    return a


def mc_c_bpsk(y, h, q, mode, n_samples=100_000, seed=0):
    rng = np.random.default_rng(seed)
    n = len(y)
    a = conv_matrix(h, n, mode)
    x = np.where(rng.uniform(size=(n_samples, n)) < q, 1.0, -1.0)
    resid = y[None, :] - x @ a.T
    return float(np.mean(np.sum(resid**2, axis=1)))


def mc_c_qpsk(yc, hc, qi, qq, mode, n_samples=100_000, seed=0):
    rng = np.random.default_rng(seed)
    n = len(yc)
    a = conv_matrix(hc, n, mode)
    xi = np.where(rng.uniform(size=(n_samples, n)) < qi, 1.0, -1.0)
    xq = np.where(rng.uniform(size=(n_samples, n)) < qq, 1.0, -1.0)
    resid = yc[None, :] - (xi + 1j * xq) @ a.T
    return float(np.mean(np.sum(np.abs(resid) ** 2, axis=1)))


class TestEntropy:
    def test_uniform_max(self):
        n = 17
        assert vl.entropy_bernoulli(np.full(n, 0.5)) == pytest.approx(n * np.log(2))

    def test_extremes_near_zero(self):
        q = np.array([1e-7, 1 - 1e-7, 1e-7])
        assert vl.entropy_bernoulli(q) == pytest.approx(0.0, abs=1e-5)

    def test_known_value(self):
        assert vl.entropy_bernoulli(np.array([0.25])) == pytest.approx(0.562335, abs=1e-6)

    def test_qpsk_posterior_sums_both_rails(self):
        p = enc.Posterior(ch.QPSK, np.full(4, 0.5), np.full(4, 0.5))
        assert vl.entropy_bernoulli(p) == pytest.approx(8 * np.log(2))


class TestCTermBpsk:
    def test_zero_residual(self):
        rng = np.random.default_rng(0)
        x = ch.random_symbols(12, ch.BPSK, rng)
        h = ch.builtin("ht1")
        y = ch.clean_output(x, ch.ChannelSpec(h=h, mode="causal")).real
        q = (x.i + 1) / 2  # deterministic at the truth
        assert vl.c_term_bpsk(y, h, q, "causal") == pytest.approx(0.0, abs=1e-12)

    def test_uniform_q_formula(self):
        rng = np.random.default_rng(1)
        y = rng.normal(size=10)
        h = np.array([0.4, -0.8, 0.2])
        q = np.full(10, 0.5)
        a = conv_matrix(h, 10, "causal")
        want = np.sum(y**2) + np.sum(a**2)
        assert vl.c_term_bpsk(y, h, q, "causal") == pytest.approx(want, abs=1e-10)

    @pytest.mark.parametrize("mode", ["causal", "centered"])
    def test_matches_monte_carlo(self, mode):
        rng = np.random.default_rng(2)
        n = 16
        y = rng.normal(size=n)
        h = rng.normal(size=3)
        q = rng.uniform(0.05, 0.95, size=n)
        got = vl.c_term_bpsk(y, h, q, mode)
        want = mc_c_bpsk(y, h, q, mode)
        assert got == pytest.approx(want, rel=0.01)

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(4, 20))
            y = rng.normal(size=n) * 3
            h = rng.normal(size=int(rng.integers(1, 5)))
            q = rng.uniform(0, 1, size=n)
            assert vl.c_term_bpsk(y, h, q, "causal") >= -1e-9


class TestCTermQpsk:
    def test_zero_residual(self):
        rng = np.random.default_rng(4)
        x = ch.random_symbols(10, ch.QPSK, rng)
        h = ch.builtin("h1")
        y = ch.clean_output(x, ch.ChannelSpec(h=h, mode="centered"))
        qi, qq = (x.i + 1) / 2, (x.q + 1) / 2
        got = vl.c_term_qpsk((y.real, y.imag), (h.real, h.imag), (qi, qq), "centered")
        assert got == pytest.approx(0.0, abs=1e-12)

    def test_posterior_mean_symbol(self):
        # E{x} = (2qI-1) + j(2qQ-1): qI=1,qQ=0 gives 1-j, so a deterministic
        # posterior at x=1-j through h=[1] leaves zero residual
        y = np.array([1.0 - 1.0j])
        got = vl.c_term_qpsk((y.real, y.imag), ([1.0], [0.0]),
                             ([1.0 - 1e-12], [1e-12]), "causal")
        assert got == pytest.approx(0.0, abs=1e-9)

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(5)
        n = 12
        yc = rng.normal(size=n) + 1j * rng.normal(size=n)
        hc = rng.normal(size=3) + 1j * rng.normal(size=3)
        qi = rng.uniform(0.05, 0.95, size=n)
        qq = rng.uniform(0.05, 0.95, size=n)
        got = vl.c_term_qpsk((yc.real, yc.imag), (hc.real, hc.imag), (qi, qq), "centered")
        want = mc_c_qpsk(yc, hc, qi, qq, "centered")
        assert got == pytest.approx(want, rel=0.01)

    def test_matches_printed_expansion(self):
        # second oracle: the term-by-term expansion with explicit loops
        rng = np.random.default_rng(6)
        n = 8
        yc = rng.normal(size=n) + 1j * rng.normal(size=n)
        hc = rng.normal(size=3) + 1j * rng.normal(size=3)
        qi = rng.uniform(0.1, 0.9, size=n)
        qq = rng.uniform(0.1, 0.9, size=n)
        a = conv_matrix(hc, n, "causal")
        hi, hq = a.real, a.imag
        si, sq = 2 * qi - 1, 2 * qq - 1
        total = 0.0
        for i in range(n):
            alpha = np.sum(yc.real[i] * (hi[i] * si - hq[i] * sq)
                           + yc.imag[i] * (hq[i] * si + hi[i] * sq))
            beta = (np.sum(hi[i] * si - hq[i] * sq) ** 2
                    + np.sum(hq[i] * si + hi[i] * sq) ** 2
                    + np.sum((hi[i] ** 2 + hq[i] ** 2)
                             * (4 * qq + 4 * qi - 4 * qi**2 - 4 * qq**2)))
            total += np.abs(yc[i]) ** 2 - 2 * alpha + beta
        got = vl.c_term_qpsk((yc.real, yc.imag), (hc.real, hc.imag), (qi, qq), "causal")
        assert got == pytest.approx(total, rel=1e-10)


class TestLossLinear:
    def _bpsk_setup(self, n=10, seed=7):
        rng = np.random.default_rng(seed)
        y = ch.Observation(ch.BPSK, rng.normal(size=n))
        params = ad.ParamStore()
        ep = enc.init_encoder(ch.BPSK, rng=rng)
        for name, v in ep.kernels.items():
            params.add(name, v)
        params.add("h", vl.impulse_taps(3, "causal"))
        return y, params

    def test_composition_matches_pieces(self):
        y, params = self._bpsk_setup()
        tape, leaves, q, bd = vl.build_loss(y, params, ch.BPSK, mode="causal")
        n = len(y)
        want = 0.5 * n * np.log(float(bd.c_term.value)) - float(bd.entropy.value)
        assert float(bd.total.value) == pytest.approx(want, rel=1e-12)

    def test_sigma2_is_c_over_n(self):
        y, params = self._bpsk_setup()
        _, _, _, bd = vl.build_loss(y, params, ch.BPSK, mode="causal")
        assert float(bd.sigma2_opt.value) == pytest.approx(float(bd.c_term.value) / len(y))

    def test_uniform_prior_term_absent(self):
        y, params = self._bpsk_setup()
        _, _, _, bd = vl.build_loss(y, params, ch.BPSK, mode="causal")
        assert bd.prior_term is None

    def test_lambda_zero_with_code_rejected(self):
        y, params = self._bpsk_setup(n=6)
        code = LdpcCode(6, [[0, 1, 2], [3, 4, 5]])
        with pytest.raises(ValueError):
            vl.build_loss(y, params, ch.BPSK, mode="causal", code=code, lam=0.0)

    def test_prior_changes_loss(self):
        y, params = self._bpsk_setup()
        prior = vl.PriorVector(np.full(len(y), 0.8))
        _, _, _, bd = vl.build_loss(y, params, ch.BPSK, mode="causal", prior=prior)
        assert bd.prior_term is not None
        assert float(bd.prior_term.value) > 0

    @pytest.mark.parametrize("scheme", [ch.BPSK, ch.QPSK])
    def test_gradients_match_fd(self, scheme):
        rng = np.random.default_rng(11)
        n = 16
        if scheme == ch.BPSK:
            y = ch.Observation(ch.BPSK, rng.normal(size=n))
        else:
            y = ch.Observation(ch.QPSK, rng.normal(size=n), rng.normal(size=n))
        params = ad.ParamStore()
        ep = enc.init_encoder(scheme, rng=rng)
        for name, v in ep.kernels.items():
            params.add(name, v)
        if scheme == ch.BPSK:
            params.add("h", rng.normal(size=3) * 0.5)
        else:
            params.add("h_i", rng.normal(size=3) * 0.5)
            params.add("h_q", rng.normal(size=3) * 0.5)
        mode = "causal" if scheme == ch.BPSK else "centered"

        _, leaves, _, bd = vl.build_loss(y, params, scheme, mode=mode)
        grads = ad.record_and_backward(bd.total, leaves)

        def loss_at(name, vec):
            saved = params.values[name].copy()
            params.values[name][:] = vec
            _, _, _, bd2 = vl.build_loss(y, params, scheme, mode=mode)
            params.values[name][:] = saved
            return float(bd2.total.value)

        step = 1e-5
        for name in params.names():
            v0 = params.values[name].copy()
            for i in range(v0.size):
                hi, lo = v0.copy(), v0.copy()
                hi[i] += step
                lo[i] -= step
                fd = (loss_at(name, hi) - loss_at(name, lo)) / (2 * step)
                assert grads[name][i] == pytest.approx(fd, rel=1e-4, abs=1e-6), name


class TestTraining:
    def test_noiseless_identity_channel(self):
        rng = np.random.default_rng(21)
        x = ch.random_symbols(400, ch.BPSK, rng)
        y = ch.apply_channel(x, ch.ChannelSpec(h=np.array([1.0])), rng)
        cfg = vl.TrainConfig(iters=200, mode="causal")
        res = vl.train_vaee_linear(y, ch.BPSK, m=1, cfg=cfg, rng=np.random.default_rng(99))
        hard, _ = res.posterior.hard_symbols()
        ser = min(np.mean(hard != x.i), np.mean(-hard != x.i))
        assert ser == 0.0

    def test_recovers_ht1_at_20db(self):
        rng = np.random.default_rng(5)
        h = ch.builtin("ht1")
        x = ch.random_symbols(2000, ch.BPSK, rng)
        spec = ch.ChannelSpec(h=h, mode="centered")
        clean = ch.clean_output(x, spec)
        spec.sigma_w2 = ch.sigma_for_snr(clean, 20.0)
        y = ch.apply_channel(x, spec, rng)
        # full-block steps keep the true block edges in every gradient
        cfg = vl.TrainConfig(iters=600, batch_len=2000, mode="centered")
        res = vl.train_vaee_linear(y, ch.BPSK, m=3, cfg=cfg, rng=np.random.default_rng(1005))
        h_est = res.h["h"]
        assert min(np.linalg.norm(h_est - h), np.linalg.norm(h_est + h)) < 0.05

    def test_trace_finite_and_monotone_trend(self):
        rng = np.random.default_rng(33)
        x = ch.random_symbols(600, ch.BPSK, rng)
        spec = ch.ChannelSpec(h=ch.builtin("ht1"), mode="causal")
        clean = ch.clean_output(x, spec)
        spec.sigma_w2 = ch.sigma_for_snr(clean, 8.0)
        y = ch.apply_channel(x, spec, rng)
        res = vl.train_vaee_linear(y, ch.BPSK, m=3,
                                   cfg=vl.TrainConfig(iters=300, mode="causal"), rng=rng)
        totals = [t["total"] for t in res.trace]
        assert np.all(np.isfinite(totals))
        assert np.median(totals[:10]) > np.median(totals[-10:])

    def test_trace_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        x = ch.random_symbols(200, ch.BPSK, rng)
        y = ch.apply_channel(x, ch.ChannelSpec(h=np.array([1.0])), rng)
        res = vl.train_vaee_linear(y, ch.BPSK, 1,
                                   vl.TrainConfig(iters=5, mode="causal"), rng)
        path = tmp_path / "trace.csv"
        vl.write_trace_csv(res.trace, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,total,entropy,c_term,sigma2_opt"
        assert len(lines) == 6
