"""Closed-form losses for the linear-channel blind equalizer, and the
training loop that fits the channel taps and equalizer kernels jointly.

The loss combines an autoencoder distortion term (the expected squared
reconstruction residual C under the independent Bernoulli posterior, with the
noise variance eliminated analytically at its optimum sigma^2 = C/N) against
the posterior entropy. Natural logarithms throughout; additive constants that
do not move gradients are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from .channel import BPSK, QPSK, Observation
from .ldpc import LdpcCode, gallager_loss_on_tape


class TrainingError(Exception):
    pass


@dataclass
class PriorVector:
    """Per-symbol prior P(X_i = +1); complements are implied."""

    p_plus: np.ndarray

    def __post_init__(self):
        self.p_plus = np.asarray(self.p_plus, dtype=float)
        if np.any(self.p_plus <= 0) or np.any(self.p_plus >= 1):
            raise ValueError("prior entries must lie strictly inside (0, 1)")

    def __len__(self):
        return self.p_plus.shape[0]


@dataclass
class LossBreakdown:
    """Loss components as tape nodes; float() them for logging."""

    total: ad.Var
    entropy: ad.Var
    c_term: ad.Var
    sigma2_opt: ad.Var
    gallager: Optional[ad.Var] = None
    prior_term: Optional[ad.Var] = None

    def snapshot(self, step: int = 0) -> dict:
        row = {
            "step": step,
            "total": float(self.total.value),
            "entropy": float(self.entropy.value),
            "c_term": float(self.c_term.value),
            "sigma2_opt": float(self.sigma2_opt.value),
        }
        if self.gallager is not None:
            row["gallager"] = float(self.gallager.value)
        if self.prior_term is not None:
            row["prior_term"] = float(self.prior_term.value)
        return row


def entropy_on_tape(*qs: ad.Var) -> ad.Var:
    """Sum of binary entropies over all supplied probability vectors."""
    total = None
    for q in qs:
        h = -ad.vsum(q * ad.log(q) + (1.0 - q) * ad.log(1.0 - q))
        total = h if total is None else total + h
    return total


def entropy_bernoulli(q) -> float:
    """Entropy of an independent Bernoulli posterior (nats); QPSK posteriors
    contribute both I and Q components."""
    if isinstance(q, enc.Posterior):
        parts = [q.qi] if q.scheme == BPSK else [q.qi, q.qq]
    else:
        parts = [np.asarray(q, dtype=float)]
    tape = ad.Tape()
    return float(entropy_on_tape(*[tape.leaf(p) for p in parts]).value)


def c_term_bpsk_on_tape(y: np.ndarray, h: ad.Var, q: ad.Var, mode: str) -> ad.Var:
    """E_q ||y - x*h||^2 for BPSK: residual of the posterior-mean symbols
    through the channel plus the propagated per-symbol variance."""
    s = 2.0 * q - 1.0
    m = ad.conv1d_same(s, h, mode)
    resid = y - m
    var = 4.0 * (q - q * q)
    spread = ad.conv1d_same(var, h * h, mode)
    return ad.vsum(resid * resid) + ad.vsum(spread)


def c_term_qpsk_on_tape(yi, yq, hi: ad.Var, hq: ad.Var, qi: ad.Var, qq: ad.Var,
                        mode: str) -> ad.Var:
    si = 2.0 * qi - 1.0
    sq = 2.0 * qq - 1.0
    mi = ad.conv1d_same(si, hi, mode) - ad.conv1d_same(sq, hq, mode)
    mq = ad.conv1d_same(si, hq, mode) + ad.conv1d_same(sq, hi, mode)
    ri = yi - mi
    rq = yq - mq
    var = 4.0 * (qi - qi * qi) + 4.0 * (qq - qq * qq)
    habs2 = hi * hi + hq * hq
    spread = ad.conv1d_same(var, habs2, mode)
    return ad.vsum(ri * ri) + ad.vsum(rq * rq) + ad.vsum(spread)


def c_term_bpsk(y, h, q, mode: str = "causal") -> float:
    tape = ad.Tape()
    return float(c_term_bpsk_on_tape(np.asarray(y, float), tape.leaf(h),
                                     tape.leaf(q), mode).value)


def c_term_qpsk(y_pair, h_pair, q_pair, mode: str = "centered") -> float:
    tape = ad.Tape()
    yi, yq = (np.asarray(v, float) for v in y_pair)
    return float(c_term_qpsk_on_tape(
        yi, yq, tape.leaf(h_pair[0]), tape.leaf(h_pair[1]),
        tape.leaf(q_pair[0]), tape.leaf(q_pair[1]), mode).value)


def prior_term_on_tape(q: ad.Var, prior: PriorVector) -> ad.Var:
    """-(sum_i sum_x q_i(x) log p_i(x)); BPSK-shaped posteriors only."""
    lp = np.log(prior.p_plus)
    lm = np.log(1.0 - prior.p_plus)
    return -(ad.vsum(q * lp) + ad.vsum((1.0 - q) * lm))


def loss_linear(y: Observation, h_leaves: dict, q_vars, scheme: str,
                mode: str = "causal", prior: Optional[PriorVector] = None,
                code: Optional[LdpcCode] = None, lam: float = 1.0) -> LossBreakdown:
    """Assemble the blind-equalization loss on the tape the inputs live on.

    BPSK: (N/2) log C - H; QPSK: N log C - H. A non-uniform prior adds the
    cross term; a code adds the Gallager loss with blend weight 1-lam.
    Uniform priors contribute only a constant and are dropped.
    """
    if code is not None and not (0.0 < lam <= 1.0):
        raise ValueError("lambda must be in (0, 1] when a code term is present")
    n = len(y)
    if scheme == BPSK:
        q = q_vars
        c = c_term_bpsk_on_tape(np.asarray(y.i, float), h_leaves["h"], q, mode)
        entropy = entropy_on_tape(q)
        weight = 0.5 * n
    elif scheme == QPSK:
        qi, qq = q_vars
        c = c_term_qpsk_on_tape(np.asarray(y.i, float), np.asarray(y.q, float),
                                h_leaves["h_i"], h_leaves["h_q"], qi, qq, mode)
        entropy = entropy_on_tape(qi, qq)
        weight = float(n)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")

    base = weight * ad.log(c) - entropy
    prior_var = None
    if prior is not None:
        if scheme != BPSK:
            raise ValueError("non-uniform priors are only supported for BPSK")
        if len(prior) != n:
            raise ValueError("prior length does not match block")
        prior_var = prior_term_on_tape(q_vars, prior)
        base = base + prior_var

    gall = None
    if code is not None:
        if scheme != BPSK:
            raise ValueError("coded loss is BPSK-only")
        gall = gallager_loss_on_tape(code, q_vars)
        total = lam * base + (1.0 - lam) * gall
    else:
        total = base
    return LossBreakdown(total=total, entropy=entropy, c_term=c,
                         sigma2_opt=c / float(n), gallager=gall, prior_term=prior_var)


def build_loss(y: Observation, params: ad.ParamStore, scheme: str,
               mode: str = "causal", prior: Optional[PriorVector] = None,
               code: Optional[LdpcCode] = None, lam: float = 1.0):
    """Fresh tape: encoder forward + loss. Returns (tape, leaves, q, breakdown)."""
    tape = ad.Tape()
    leaves = params.leaves(tape)
    if scheme == BPSK:
        q = enc.encode_bpsk_on_tape(np.asarray(y.i, float), leaves)
    else:
        q = enc.encode_qpsk_on_tape(np.asarray(y.i, float), np.asarray(y.q, float), leaves)
    breakdown = loss_linear(y, leaves, q, scheme, mode=mode, prior=prior,
                            code=code, lam=lam)
    return tape, leaves, q, breakdown


def impulse_taps(m: int, mode: str) -> np.ndarray:
    """Unit impulse at the kernel's zero-delay index; a well-conditioned
    starting channel estimate."""
    h = np.zeros(m)
    h[(m - 1) // 2 if mode == "centered" else 0] = 1.0
    return h


@dataclass
class TrainConfig:
    iters: int = 1500
    lr: float = 0.1
    batch_len: int = 128
    k1: Optional[int] = None
    k2: Optional[int] = None
    mode: str = "centered"
    stop: str = "fixed"           # "fixed" | "plateau"
    plateau_window: int = 100
    plateau_tol: float = 1e-3
    min_iters: int = 200


@dataclass
class TrainResult:
    h: dict                       # "h" or "h_i"/"h_q"
    sigma2: float
    posterior: enc.Posterior
    kernels: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)

    def h_complex(self) -> np.ndarray:
        if "h" in self.h:
            return self.h["h"].astype(complex)
        return self.h["h_i"] + 1j * self.h["h_q"]

    def encoder_params(self, scheme: str) -> enc.EncoderParams:
        return enc.EncoderParams(scheme, {k: v.copy() for k, v in self.kernels.items()})


def _subwindow(y: Observation, n: int, rng: np.random.Generator) -> Observation:
    total = len(y)
    if n >= total:
        return y
    start = int(rng.integers(0, total - n + 1))
    if y.scheme == BPSK:
        return Observation(BPSK, y.i[start:start + n])
    return Observation(QPSK, y.i[start:start + n], y.q[start:start + n])


def train_vaee_linear(y: Observation, scheme: str, m: int, cfg: TrainConfig,
                      rng: np.random.Generator) -> TrainResult:
    """AMSGrad on channel taps and equalizer kernels jointly; each step
    samples one contiguous subsequence of length min(batch_len, L)."""
    if cfg.mode == "centered" and m % 2 == 0:
        raise TrainingError("centered mode requires odd estimated channel length")
    params = ad.ParamStore()
    ep = enc.init_encoder(scheme, cfg.k1, cfg.k2, rng)
    for name, v in ep.kernels.items():
        params.add(name, v)
    if scheme == BPSK:
        params.add("h", impulse_taps(m, cfg.mode))
        h_names = ["h"]
    else:
        params.add("h_i", impulse_taps(m, cfg.mode))
        params.add("h_q", np.zeros(m))
        h_names = ["h_i", "h_q"]

    trace = []
    for step in range(1, cfg.iters + 1):
        window = _subwindow(y, cfg.batch_len, rng)
        tape, leaves, q, bd = build_loss(window, params, scheme, mode=cfg.mode)
        total = float(bd.total.value)
        if not np.isfinite(total):
            raise TrainingError(f"non-finite loss at step {step}: {bd.snapshot(step)}")
        grads = ad.record_and_backward(bd.total, leaves)
        params.amsgrad_step(grads, cfg.lr)
        trace.append(bd.snapshot(step))
        if cfg.stop == "plateau" and step >= max(cfg.min_iters, 2 * cfg.plateau_window):
            recent = [t["total"] for t in trace[-cfg.plateau_window:]]
            older = [t["total"] for t in trace[-2 * cfg.plateau_window:-cfg.plateau_window]]
            if np.median(older) - np.median(recent) < cfg.plateau_tol:
                break

    # full-sequence posterior and the analytic noise-variance optimum
    _, _, _, bd = build_loss(y, params, scheme, mode=cfg.mode)
    post = _posterior_from(params, y, scheme)
    h_est = {name: params.values[name].copy() for name in h_names}
    kernels = {k: v.copy() for k, v in params.values.items() if k.startswith("k")}
    return TrainResult(h=h_est, sigma2=float(bd.sigma2_opt.value), posterior=post,
                       kernels=kernels, trace=trace)


def _posterior_from(params: ad.ParamStore, y: Observation, scheme: str) -> enc.Posterior:
    kernels = {k: v.copy() for k, v in params.values.items()
               if k.startswith("k")}
    return enc.encode(y, enc.EncoderParams(scheme, kernels))


def write_trace_csv(trace: list, path) -> None:
    import csv

    cols = ["step", "total", "entropy", "c_term", "sigma2_opt"]
    extra = [c for c in ("gallager", "prior_term") if trace and c in trace[0]]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols + extra, extrasaction="ignore")
        w.writeheader()
        w.writerows(trace)
