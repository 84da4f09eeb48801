"""Comparison algorithms: CMA and LMS-MMSE adaptive equalizers, exact
(non)linear BCJR symbol detection, channel-informed turbo equalization, and
blind turbo-EM channel estimation with the 6-candidate genie search.

The adaptive baselines are on-line algorithms re-run over the block for
several epochs. BCJR works on the random-prefix framing: the trellis start
state is uniform, matching a block that begins mid-stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .channel import BPSK, Observation
from .ldpc import LLR_CLIP, LdpcCode, bp_decode

MAX_BCJR_MEMORY = 12


@dataclass
class FirEqualizer:
    taps: np.ndarray
    mu: float
    diverged: bool = False
    cost_per_epoch: list = field(default_factory=list)


@dataclass
class TrellisSpec:
    """Branch metric parameters for the 2^(M-1)-state BPSK trellis."""

    h: np.ndarray
    sigma_w2: float
    nonlinearity: Optional[Callable] = None
    priors: Optional[np.ndarray] = None   # per-symbol P(x=+1)

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float)
        if self.h.shape[0] > MAX_BCJR_MEMORY:
            raise ValueError(f"channel memory {self.h.shape[0]} exceeds "
                             f"trellis guard {MAX_BCJR_MEMORY}")


def constant_modulus_radius(scheme: str) -> float:
    """R2 = E|x|^4 / E|x|^2 over the constellation."""
    if scheme == BPSK:
        return 1.0
    return 2.0  # QPSK points +/-1 +/- j: |x|^2 = 2 always


def cma_equalize(y: Observation, taps_len: int = 11, mu: float = 1e-3,
                 epochs: int = 40,
                 rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, FirEqualizer]:
    """Godard p=2 blind equalizer, center-spike init, multi-epoch re-runs
    over the block. Returns (equalized symbols, equalizer state)."""
    if taps_len % 2 == 0:
        raise ValueError("taps_len must be odd for a center-spike init")
    yc = y.as_complex()
    n = yc.shape[0]
    r2 = constant_modulus_radius(y.scheme)
    # normalize so the center-spike output power starts near the modulus
    scale = np.sqrt(np.mean(np.abs(yc) ** 2) / r2)
    yn = yc / scale
    half = taps_len // 2
    padded = np.concatenate([np.zeros(half, complex), yn, np.zeros(half, complex)])
    w = np.zeros(taps_len, dtype=complex)
    w[half] = 1.0
    eq = FirEqualizer(taps=w, mu=mu)
    for _ in range(epochs):
        cost = 0.0
        for k in range(n):
            window = padded[k:k + taps_len][::-1]
            z = np.dot(w, window)
            err = np.abs(z) ** 2 - r2
            cost += err ** 2
            if np.abs(z) > 1e3:
                eq.diverged = True
                eq.taps = w
                eq.cost_per_epoch.append(cost / (k + 1))
                return _cma_output(padded, w, n, taps_len), eq
            w = w - mu * err * z * np.conj(window)
        eq.cost_per_epoch.append(cost / n)
    eq.taps = w
    return _cma_output(padded, w, n, taps_len), eq


def _cma_output(padded, w, n, taps_len):
    out = np.empty(n, dtype=complex)
    for k in range(n):
        out[k] = np.dot(w, padded[k:k + taps_len][::-1])
    return out


def lms_mmse_equalize(y: Observation, x_known: np.ndarray, taps_len: int = 11,
                      mu: float = 1e-3, epochs: int = 40) -> tuple[np.ndarray, np.ndarray, int]:
    """Non-blind LMS toward the MMSE solution; the decision delay is chosen
    by training MSE. Returns (equalized symbols, taps, delay)."""
    yc = y.as_complex()
    x_known = np.asarray(x_known, dtype=complex)
    n = yc.shape[0]
    half = taps_len // 2
    padded = np.concatenate([np.zeros(half, complex), yc, np.zeros(half, complex)])
    best = None
    for delay in range(taps_len):
        w = np.zeros(taps_len, dtype=complex)
        mse = 0.0
        for _ in range(epochs):
            mse = 0.0
            for k in range(n):
                window = padded[k:k + taps_len][::-1]
                # window[j] = y[k + half - j]; equalizer output estimates
                # x[k + half - delay]
                target_idx = k + half - delay
                if not 0 <= target_idx < n:
                    continue
                z = np.dot(w, window)
                e = x_known[target_idx] - z
                mse += np.abs(e) ** 2
                w = w + mu * e * np.conj(window)
        cand = (mse / n, delay, w)
        if best is None or cand[0] < best[0]:
            best = cand
    _, delay, w = best
    out = np.empty(n, dtype=complex)
    shifted = np.concatenate([np.zeros(half, complex), yc, np.zeros(half, complex)])
    for k in range(n):
        out[k] = np.dot(w, shifted[k:k + taps_len][::-1])
    # out[k] estimates x[k + half - delay]; realign to symbol indices
    shift = half - delay
    aligned = np.zeros(n, dtype=complex)
    src = np.arange(n) + shift
    ok = (src >= 0) & (src < n)
    aligned[src[ok]] = out[np.arange(n)[ok]]
    return aligned, w, delay


def _trellis_tables(h: np.ndarray, g: Optional[Callable]):
    m = h.shape[0]
    ns = 2 ** (m - 1)
    states = np.arange(ns)
    mu = np.zeros((ns, 2))
    nxt = np.zeros((ns, 2), dtype=int)
    for s in range(ns):
        prev = np.array([(s >> k) & 1 for k in range(m - 1)], dtype=float)
        prev_sym = 2.0 * prev - 1.0
        for b in (0, 1):
            x_vec = np.concatenate([[2.0 * b - 1.0], prev_sym])
            a = float(np.dot(h, x_vec[:m]))
            mu[s, b] = g(a) if g is not None else a
            nxt[s, b] = ((s << 1) | b) & (ns - 1)
    return states, mu, nxt


def bcjr(y, trellis: TrellisSpec) -> np.ndarray:
    """Exact per-symbol posteriors P(X_n = +1 | y) by log-domain
    forward-backward over the channel trellis (uniform start/end states)."""
    yv = np.asarray(y.i if isinstance(y, Observation) else y, dtype=float)
    n = yv.shape[0]
    h = trellis.h
    m = h.shape[0]
    ns = 2 ** (m - 1)
    _, mu, nxt = _trellis_tables(h, trellis.nonlinearity)
    inv2s2 = 1.0 / (2.0 * trellis.sigma_w2)
    # branch log-metrics: lg[t, s, b]
    lg = -(yv[:, None, None] - mu[None, :, :]) ** 2 * inv2s2
    if trellis.priors is not None:
        p = np.clip(np.asarray(trellis.priors, dtype=float), 1e-12, 1 - 1e-12)
        prior_term = np.stack([np.log(1.0 - p), np.log(p)], axis=-1)  # (n, 2)
        lg = lg + prior_term[:, None, :]

    flat_next = nxt.reshape(-1)
    alphas = np.empty((n + 1, ns))
    alphas[0] = -np.log(ns)
    for t in range(n):
        v = (alphas[t][:, None] + lg[t]).reshape(-1)
        vmax = v.max()
        acc = np.bincount(flat_next, weights=np.exp(v - vmax), minlength=ns)
        with np.errstate(divide="ignore"):
            na = np.log(acc) + vmax
        alphas[t + 1] = na - na.max()
    betas = np.empty((n + 1, ns))
    betas[n] = -np.log(ns)
    for t in range(n - 1, -1, -1):
        v = lg[t] + betas[t + 1][nxt]
        vmax = v.max()
        with np.errstate(divide="ignore"):
            nb = np.log(np.sum(np.exp(v - vmax), axis=1)) + vmax
        betas[t] = nb - nb.max()

    post = np.empty(n)
    for t in range(n):
        v = alphas[t][:, None] + lg[t] + betas[t + 1][nxt]
        vmax = v.max()
        w = np.exp(v - vmax)
        post[t] = w[:, 1].sum() / w.sum()
    return post


def bcjr_llr(y, trellis: TrellisSpec) -> np.ndarray:
    p = np.clip(bcjr(y, trellis), 1e-300, 1.0 - 1e-16)
    return np.clip(np.log(p) - np.log1p(-p), -LLR_CLIP, LLR_CLIP)


def turbo_equalize(y: Observation, h: np.ndarray, sigma_w2: float,
                   code: LdpcCode, outer_iters: int = 10, bp_iters: int = 15,
                   nonlinearity: Optional[Callable] = None) -> np.ndarray:
    """Channel-informed turbo equalization: BCJR and BP exchange extrinsic
    information; returns hard bit decisions c in {0, 1}."""
    n = len(y)
    priors = np.full(n, 0.5)
    prior_llr = np.zeros(n)
    ext_from_bcjr = bcjr_llr(y, TrellisSpec(h, sigma_w2, nonlinearity))
    if bp_iters <= 0 or outer_iters <= 0:
        return (ext_from_bcjr < 0).astype(int)
    hard = (ext_from_bcjr < 0).astype(int)
    for it in range(outer_iters):
        if it > 0:
            post_llr = bcjr_llr(y, TrellisSpec(h, sigma_w2, nonlinearity, priors))
            ext_from_bcjr = np.clip(post_llr - prior_llr, -LLR_CLIP, LLR_CLIP)
        res = bp_decode(code, ext_from_bcjr, bp_iters)
        hard = res.hard_bits
        if res.syndrome_ok:
            break
        prior_llr = np.clip(res.extrinsic_llr, -LLR_CLIP, LLR_CLIP)
        priors = 1.0 / (1.0 + np.exp(-prior_llr))
    return hard


@dataclass
class EmResult:
    h: np.ndarray
    sigma2: float
    posteriors: np.ndarray
    loglik_trace: list = field(default_factory=list)
    ridge_used: bool = False


def _em_m_step(yv: np.ndarray, s: np.ndarray, m: int):
    """Maximize the Gaussian EM surrogate under the factorized-moments
    approximation: off-diagonal second moments are products of the means,
    diagonals are 1."""
    n = yv.shape[0]
    u = np.zeros((n, m))
    for k in range(m):
        u[k:, k] = s[:n - k]
    big_v = u.T @ u
    np.fill_diagonal(big_v, n)
    rhs = u.T @ yv
    ridge_used = False
    try:
        h_new = np.linalg.solve(big_v, rhs)
    except np.linalg.LinAlgError:
        ridge_used = True
        h_new = np.linalg.solve(big_v + 1e-8 * np.eye(m), rhs)
    sigma2 = float(np.sum(yv ** 2) - 2.0 * rhs @ h_new + h_new @ big_v @ h_new) / n
    return h_new, max(sigma2, 1e-12), ridge_used


def em_estimate(y: Observation, m: int, iters: int = 10,
                h_init: Optional[np.ndarray] = None,
                sigma2_init: Optional[float] = None,
                priors: Optional[np.ndarray] = None) -> EmResult:
    """Blind channel estimation: BCJR posteriors as the E-step, closed-form
    Gaussian M-step for the taps and noise variance."""
    yv = np.asarray(y.i, dtype=float)
    h = np.zeros(m) if h_init is None else np.asarray(h_init, dtype=float).copy()
    if h_init is None:
        h[0] = 1.0
    sigma2 = float(np.var(yv)) if sigma2_init is None else float(sigma2_init)
    post = np.full(yv.shape[0], 0.5)
    trace = []
    ridge = False
    for _ in range(iters):
        post = bcjr(yv, TrellisSpec(h, sigma2, priors=priors))
        s = 2.0 * post - 1.0
        h, sigma2, r = _em_m_step(yv, s, m)
        ridge = ridge or r
        trace.append(_gaussian_loglik(yv, s, h, sigma2))
    return EmResult(h=h, sigma2=sigma2, posteriors=post, loglik_trace=trace,
                    ridge_used=ridge)


def _gaussian_loglik(yv, s, h, sigma2):
    n = yv.shape[0]
    m = h.shape[0]
    u = np.zeros((n, m))
    for k in range(m):
        u[k:, k] = s[:n - k]
    big_v = u.T @ u
    np.fill_diagonal(big_v, n)
    quad = np.sum(yv ** 2) - 2.0 * (u.T @ yv) @ h + h @ big_v @ h
    return float(-0.5 * n * np.log(2 * np.pi * sigma2) - quad / (2 * sigma2))


def _shift_taps(h: np.ndarray, shift: int) -> np.ndarray:
    out = np.zeros_like(h)
    if shift == 0:
        out[:] = h
    elif shift > 0:
        out[shift:] = h[:-shift]
    else:
        out[:shift] = h[-shift:]
    return out


@dataclass
class TurboEmResult:
    bits: np.ndarray
    h: np.ndarray
    sigma2: float
    candidate: tuple          # (sign, shift)
    genie: bool
    ber: Optional[float] = None


def turbo_em(y: Observation, code: LdpcCode, m: int,
             stage1_iters: int = 10, outer_iters: int = 30, bp_iters: int = 15,
             mode: str = "genie", true_bits: Optional[np.ndarray] = None) -> TurboEmResult:
    """Two-stage blind turbo-EM.

    Stage 1 runs EM without code information; its sign/delay ambiguity is
    then resolved by trying all 6 candidates (both polarities x shifts
    -1/0/+1), running EM with BP incorporated for each, and selecting either
    by true-bit BER (genie) or by syndrome weight.
    """
    if mode not in ("genie", "syndrome"):
        raise ValueError(f"unknown selection mode {mode!r}")
    if mode == "genie" and true_bits is None:
        raise ValueError("genie selection requires the true bits")
    stage1 = em_estimate(y, m, iters=stage1_iters)
    yv = np.asarray(y.i, dtype=float)
    n = yv.shape[0]
    candidates = [(sign, shift) for sign in (1.0, -1.0) for shift in (-1, 0, 1)]
    best = None
    for sign, shift in candidates:
        h = sign * _shift_taps(stage1.h, shift)
        sigma2 = stage1.sigma2
        priors = None
        prior_llr = np.zeros(n)
        hard = np.zeros(n, dtype=int)
        for _ in range(outer_iters):
            post_llr = bcjr_llr(yv, TrellisSpec(h, sigma2, priors=priors))
            ext = np.clip(post_llr - prior_llr, -LLR_CLIP, LLR_CLIP)
            res = bp_decode(code, ext, bp_iters)
            hard = res.hard_bits
            prior_llr = np.clip(res.extrinsic_llr, -LLR_CLIP, LLR_CLIP)
            priors = 1.0 / (1.0 + np.exp(-prior_llr))
            post = bcjr(yv, TrellisSpec(h, sigma2, priors=priors))
            h, sigma2, _ = _em_m_step(yv, 2.0 * post - 1.0, m)
            if res.syndrome_ok:
                break
        if mode == "genie":
            score = float(np.mean(hard != np.asarray(true_bits)))
        else:
            score = float(np.sum(_syndrome_weight(code, hard)))
        cand = (score, (sign, shift), hard, h, sigma2)
        if best is None or cand[0] < best[0]:
            best = cand
    score, key, hard, h, sigma2 = best
    return TurboEmResult(bits=hard, h=h, sigma2=sigma2, candidate=key,
                         genie=(mode == "genie"),
                         ber=score if mode == "genie" else None)


def _syndrome_weight(code: LdpcCode, bits: np.ndarray) -> np.ndarray:
    from .ldpc import syndrome

    return syndrome(code, bits)
