"""Iterative equalization and decoding: standalone parity-augmented training
first, then alternating single equalizer updates with batches of BP
iterations, exchanging extrinsic soft information both ways.

The equalizer-to-decoder LLRs are attenuated (loopy BP overestimates
reliabilities) and the decoder-to-equalizer priors are pulled back toward
uniform before entering the prior-corrected loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import nonlinear as nl
from .channel import BPSK, Observation
from .ldpc import LLR_CLIP, LdpcCode, bp_decode, syndrome
from .vae_loss import PriorVector, TrainingError, impulse_taps, loss_linear


@dataclass
class TurboConfig:
    T: int = 80        # total equalizer training iterations
    I: int = 50        # standalone iterations before turbo mode
    B: int = 15        # BP iterations per turbo round
    lr: float = 0.1
    lam: float = 0.7   # weight of the reconstruction loss vs the parity loss
    eta: float = 0.1   # attenuation on LLRs handed to BP
    alpha: float = 0.2 # prior mixing toward uniform
    m: int = 3         # estimated channel length
    k1: Optional[int] = None
    k2: Optional[int] = None
    mode: str = "causal"
    nl_samples: int = 1
    nl_lr: float = 0.02
    nl_warmup: int = 0  # linear warm-up steps before phase 1 (nonlinear only)

    def __post_init__(self):
        if not (0 < self.alpha <= 1 and 0 < self.eta <= 1 and 0 < self.lam <= 1):
            raise ValueError("alpha, eta, lambda must be in (0, 1]")
        if self.I > self.T:
            raise ValueError("standalone iterations I cannot exceed total T")


@dataclass
class TurboResult:
    bits: np.ndarray
    h: np.ndarray
    posterior: enc.Posterior
    diagnostics: list = field(default_factory=list)
    bp_rounds: list = field(default_factory=list)
    early_round: Optional[int] = None
    syndrome_ok: bool = False


def llr_from_posterior(q, eta: float) -> np.ndarray:
    """Attenuated uncoded LLRs eta * log(q / (1-q)), clipped."""
    q = np.asarray(q, dtype=float)
    return np.clip(eta * (np.log(q) - np.log1p(-q)), -LLR_CLIP, LLR_CLIP)


def prior_update(p_bar, alpha: float) -> np.ndarray:
    """Weaken extrinsic probabilities toward uniform: alpha*p + (1-alpha)/2."""
    return alpha * np.asarray(p_bar, dtype=float) + (1.0 - alpha) * 0.5


def turbo_vaee(y: Observation, code: LdpcCode, cfg: TurboConfig,
               rng: np.random.Generator, channel_kind: str = "linear",
               genie_bits: Optional[np.ndarray] = None) -> TurboResult:
    """Phase 1: cfg.I AMSGrad steps on the parity-blended loss with uniform
    priors. Phase 2: for each remaining iteration, one step on the
    prior-corrected blended loss, then cfg.B BP iterations on the attenuated
    LLRs; the BP extrinsic output (mixed toward uniform) becomes the next
    prior. Decodes the final BP full posterior; stops early on a zero
    syndrome. One iteration always covers the whole block: the parity loss
    needs the full codeword.
    """
    if channel_kind not in ("linear", "nonlinear"):
        raise ValueError(f"unknown channel kind {channel_kind!r}")
    if y.scheme != BPSK:
        raise ValueError("coded mode is BPSK-only")
    nonlinear = channel_kind == "nonlinear"

    if nonlinear:
        params = nl.init_decoder(cfg.m, rng, cfg.mode)
    else:
        params = ad.ParamStore()
        params.add("h", impulse_taps(cfg.m, cfg.mode))
    ep = enc.init_encoder(BPSK, cfg.k1, cfg.k2, rng)
    for name, v in ep.kernels.items():
        params.add(name, v)
    kernel_names = [k for k in params.names() if k.startswith("k")]

    def blended_loss(leaves, q, prior, with_code=True):
        return loss_linear(y, leaves, q, BPSK, mode=cfg.mode, prior=prior,
                           code=code if with_code else None, lam=cfg.lam)

    def linear_step(prior, lr):
        tape = ad.Tape()
        leaves = params.leaves(tape)
        q = enc.encode_bpsk_on_tape(np.asarray(y.i, float), leaves)
        bd = blended_loss(leaves, q, prior)
        total = float(bd.total.value)
        if not np.isfinite(total):
            raise TrainingError("non-finite loss in turbo training")
        grads = ad.record_and_backward(bd.total, leaves)
        params.amsgrad_step(grads, lr)
        return bd.snapshot()

    def nonlinear_step(prior, lr):
        snap, grads = nl.loss_and_grads_nl(y, params, rng, mode=cfg.mode,
                                           prior=prior, code=code, lam=cfg.lam,
                                           samples=cfg.nl_samples, dropout=False)
        if not np.isfinite(snap["total"]):
            raise TrainingError("non-finite loss in turbo training")
        params.amsgrad_step(grads, lr)
        return snap

    if nonlinear and cfg.nl_warmup > 0:
        warm = kernel_names + ["h"]
        for _ in range(cfg.nl_warmup):
            tape = ad.Tape()
            leaves = params.leaves(tape)
            q = enc.encode_bpsk_on_tape(np.asarray(y.i, float), leaves)
            bd = blended_loss(leaves, q, None, with_code=False)
            grads = ad.record_and_backward(bd.total, leaves)
            params.amsgrad_step({k: grads[k] for k in warm}, cfg.lr)

    def current_posterior() -> enc.Posterior:
        kernels = {k: params.values[k].copy() for k in kernel_names}
        return enc.encode(y, enc.EncoderParams(BPSK, kernels))

    lr = cfg.nl_lr if nonlinear else cfg.lr
    diagnostics = []
    bp_rounds = []
    prior: Optional[PriorVector] = None
    result_bits = None
    early_round = None
    synd_ok = False

    for t in range(1, cfg.T + 1):
        if nonlinear:
            snap = nonlinear_step(prior, lr)
        else:
            snap = linear_step(prior, lr)
        snap["round"] = t
        diagnostics.append(snap)
        if t <= cfg.I:
            continue

        post = current_posterior()
        llr = llr_from_posterior(post.qi, cfg.eta)
        res = bp_decode(code, llr, cfg.B)
        result_bits = res.hard_bits
        weight = int(np.sum(syndrome(code, res.hard_bits)))
        row = {"round": t, "syndrome_weight": weight}
        if genie_bits is not None:
            row["ber_genie"] = float(np.mean(res.hard_bits != genie_bits))
        bp_rounds.append(row)
        if res.syndrome_ok:
            early_round = t
            synd_ok = True
            break
        prior = PriorVector(prior_update(res.extrinsic_prob, cfg.alpha))

    post = current_posterior()
    if result_bits is None:
        # no BP round ran (I == T): fall back to equalizer hard decisions
        result_bits = post.hard_bits()
    h_est = params.values["h"].copy()
    return TurboResult(bits=result_bits, h=h_est, posterior=post,
                       diagnostics=diagnostics, bp_rounds=bp_rounds,
                       early_round=early_round, syndrome_ok=synd_ok)


def write_rounds_csv(result: TurboResult, path) -> None:
    """Per-round diagnostics: loss rows, then BP rows (syndrome weight and,
    when genie bits were supplied, BER per round)."""
    import csv

    loss_cols = ["round", "total", "entropy", "c_term", "sigma2_opt",
                 "gallager", "prior_term"]
    bp_cols = ["round", "syndrome_weight", "ber_genie"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(loss_cols)
        for row in result.diagnostics:
            w.writerow([row.get(c, "") for c in loss_cols])
        w.writerow([])
        w.writerow(bp_cols)
        for row in result.bp_rounds:
            w.writerow([row.get(c, "") for c in bp_cols])
