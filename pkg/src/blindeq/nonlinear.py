"""Blind equalization when the channel nonlinearity is unknown.

A small decoder network reconstructs the observations from candidate
symbols: convolution with trainable taps, then a per-sample fully connected
net (1 -> 5 relu -> dropout -> 5 relu -> dropout -> 1 linear) standing in for
the nonlinearity. The distortion term can no longer be computed in closed
form, so gradients are estimated stochastically: the decoder side from a hard
Bernoulli sample of the posterior, the encoder side pathwise through a
Gumbel-softmax relaxation plus the analytic entropy gradient. Both estimators
are single-sample and biased (the log sits outside the expectation); the
temperature is trained through exp-parameterization to stay positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from .channel import BPSK, Observation
from .ldpc import LdpcCode, gallager_loss_on_tape
from .vae_loss import (PriorVector, TrainingError, entropy_on_tape, impulse_taps,
                       prior_term_on_tape)

HIDDEN = 5
DROPOUT_P = 0.3
TAU_INIT = 5.0
RESIDUAL_FLOOR = 1e-12


@dataclass
class SoftSample:
    c_hat: np.ndarray   # soft bits in (0, 1)
    x_hat: np.ndarray   # 2*c_hat - 1


def init_decoder(m: int, rng: np.random.Generator, mode: str = "causal") -> ad.ParamStore:
    """Channel taps (unit impulse), the per-sample net, and the trainable
    temperature (tau = exp(tau_raw), starting at 5).

    The net starts at the identity map (a relu relay pair for each sign plus
    small noise), so the initial decoder is the linear channel x*h and the
    net only has to learn the deviation. A small random init leaves the
    distortion term insensitive to the posterior early on; the entropy term
    then drags the posterior to the uniform fixed point and training dies.
    """
    ps = ad.ParamStore()
    ps.add("h", impulse_taps(m, mode))
    eps = 0.01
    w1 = rng.uniform(-eps, eps, size=HIDDEN)
    w1[0], w1[1] = 1.0, -1.0
    w2 = rng.uniform(-eps, eps, size=HIDDEN * HIDDEN)
    w2[0], w2[HIDDEN + 1] = 1.0, 1.0       # relay units 0 and 1
    w3 = rng.uniform(-eps, eps, size=HIDDEN)
    w3[0], w3[1] = 1.0, -1.0               # out = relu(a) - relu(-a) = a
    ps.add("w1", w1)
    ps.add("b1", np.zeros(HIDDEN))
    ps.add("w2", w2)
    ps.add("b2", np.zeros(HIDDEN))
    ps.add("w3", w3)
    ps.add("b3", np.zeros(1))
    ps.add("tau_raw", np.array([np.log(TAU_INIT)]))
    return ps


def _mlp_on_tape(a, leaves: dict, n: int, train_mode: bool,
                 rng: Optional[np.random.Generator]):
    """Apply the per-sample net to a length-n vector node. Inverted dropout:
    train-time masks are scaled by 1/(1-p) so inference needs no rescaling."""

    def mask():
        if not train_mode:
            return None
        return (rng.uniform(size=n) < (1.0 - DROPOUT_P)) / (1.0 - DROPOUT_P)

    h1 = []
    for i in range(HIDDEN):
        z = ad.relu(a * ad.getitem(leaves["w1"], i) + ad.getitem(leaves["b1"], i))
        mk = mask()
        h1.append(z if mk is None else z * mk)
    h2 = []
    for i in range(HIDDEN):
        z = None
        for j in range(HIDDEN):
            term = h1[j] * ad.getitem(leaves["w2"], i * HIDDEN + j)
            z = term if z is None else z + term
        z = ad.relu(z + ad.getitem(leaves["b2"], i))
        mk = mask()
        h2.append(z if mk is None else z * mk)
    out = None
    for j in range(HIDDEN):
        term = h2[j] * ad.getitem(leaves["w3"], j)
        out = term if out is None else out + term
    return out + ad.getitem(leaves["b3"], 0)


def decoder_on_tape(x, leaves: dict, mode: str, train_mode: bool,
                    rng: Optional[np.random.Generator]):
    """conv1d(x, h) followed by the nonlinearity net, component-wise."""
    n = x.value.shape[0] if isinstance(x, ad.Var) else np.asarray(x).shape[0]
    a = ad.conv1d_same(x, leaves["h"], mode)
    return _mlp_on_tape(a, leaves, n, train_mode, rng)


def decoder_forward(x: np.ndarray, params: ad.ParamStore, train_mode: bool = False,
                    rng: Optional[np.random.Generator] = None,
                    mode: str = "causal") -> np.ndarray:
    if train_mode and rng is None:
        raise ValueError("train mode requires an rng for dropout")
    tape = ad.Tape()
    leaves = params.leaves(tape)
    return decoder_on_tape(np.asarray(x, float), leaves, mode, train_mode, rng).value.copy()


def bernoulli_sample(q: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Hard symbols: +1 with probability q, else -1."""
    q = np.asarray(q, dtype=float)
    return np.where(rng.uniform(size=q.shape) < q, 1.0, -1.0)


def gumbel_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """g1 - g2 for two independent Gumbel(0,1) draws per position."""
    u = rng.uniform(size=(2, n))
    g = -np.log(-np.log(u))
    return g[0] - g[1]


def gumbel_softmax_sample(q: np.ndarray, tau: float,
                          rng: np.random.Generator) -> SoftSample:
    """Relaxed Bernoulli draw: sigmoid((logit(q) + g1 - g2) / tau), which is
    the two-class softmax over Gumbel-perturbed log-probabilities."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    q = np.asarray(q, dtype=float)
    logits = np.log(q) - np.log1p(-q)
    c = 1.0 / (1.0 + np.exp(-(logits + gumbel_noise(q.shape[0], rng)) / tau))
    return SoftSample(c_hat=c, x_hat=2.0 * c - 1.0)


def gumbel_softmax_on_tape(q: ad.Var, tau: ad.Var, gdiff: np.ndarray) -> ad.Var:
    """Soft symbols on tape; the Gumbel draws enter as constants."""
    logits = ad.log(q) - ad.log(1.0 - q)
    c = ad.sigmoid((logits + gdiff) / tau)
    return 2.0 * c - 1.0


def _log_residual(y: np.ndarray, g_out: ad.Var) -> ad.Var:
    r = y - g_out
    return ad.log(ad.clip(ad.vsum(r * r), RESIDUAL_FLOOR, None))


def loss_and_grads_nl(y: Observation, params: ad.ParamStore,
                      rng: np.random.Generator, mode: str = "causal",
                      prior: Optional[PriorVector] = None,
                      code: Optional[LdpcCode] = None, lam: float = 1.0,
                      samples: int = 1, dropout: bool = True):
    """One stochastic step: decoder-side gradients from hard Bernoulli
    samples (no gradient into the encoder), encoder-side gradients from
    independent Gumbel soft samples through the decoder plus the analytic
    entropy (and prior/parity) terms. Returns (snapshot dict, gradient map).

    `samples` averages that many independent draws on each side (1 is the
    single-sample default); `dropout=False` runs the decoder passes
    deterministically, which the trainer uses to cut estimator noise.
    """
    if code is not None and not (0.0 < lam <= 1.0):
        raise ValueError("lambda must be in (0, 1] when a code term is present")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    yv = np.asarray(y.i, dtype=float)
    n = yv.shape[0]
    tape = ad.Tape()
    leaves = params.leaves(tape)
    theta_names = [k for k in ("h", "w1", "b1", "w2", "b2", "w3", "b3") if k in leaves]
    phi_names = [k for k in leaves if k.startswith("k")] + ["tau_raw"]
    drop_rng = rng if dropout else None

    q = enc.encode_bpsk_on_tape(yv, leaves)

    # decoder passes A: hard samples, train theta
    loss_theta = None
    hard_resid = 0.0
    for _ in range(samples):
        x_hard = bernoulli_sample(q.value, rng)
        g_a = decoder_on_tape(x_hard, leaves, mode, dropout, drop_rng)
        hard_resid += float(np.sum((yv - g_a.value) ** 2))
        term = (0.5 * n) * _log_residual(yv, g_a)
        loss_theta = term if loss_theta is None else loss_theta + term
    loss_theta = loss_theta * (1.0 / samples)
    hard_resid /= samples

    # decoder passes B: fresh Gumbel soft samples, train phi (and tau)
    tau = ad.exp(ad.getitem(leaves["tau_raw"], 0))
    loss_gum = None
    for _ in range(samples):
        x_soft = gumbel_softmax_on_tape(q, tau, gumbel_noise(n, rng))
        g_b = decoder_on_tape(x_soft, leaves, mode, dropout, drop_rng)
        term = (0.5 * n) * _log_residual(yv, g_b)
        loss_gum = term if loss_gum is None else loss_gum + term
    entropy = entropy_on_tape(q)
    loss_phi = loss_gum * (1.0 / samples) - entropy
    if prior is not None:
        loss_phi = loss_phi + prior_term_on_tape(q, prior)
    gall = None
    if code is not None:
        gall = gallager_loss_on_tape(code, q)
        loss_phi = lam * loss_phi + (1.0 - lam) * gall
        loss_theta = lam * loss_theta

    grads_theta = ad.record_and_backward(loss_theta, leaves)
    grads_phi = ad.record_and_backward(loss_phi, leaves)
    grads = {name: grads_theta[name] for name in theta_names}
    grads.update({name: grads_phi[name] for name in phi_names})

    snapshot = {
        "total": float(loss_theta.value) - float(entropy.value),
        "entropy": float(entropy.value),
        "c_term": hard_resid,
        "sigma2_opt": hard_resid / n,
        "tau": float(tau.value),
    }
    if gall is not None:
        snapshot["gallager"] = float(gall.value)
    return snapshot, grads


@dataclass
class NlTrainConfig:
    iters: int = 600              # joint stochastic steps at `lr`
    anneal_iters: int = 300       # extra joint steps at lr/5
    lr: float = 0.01
    batch_len: int = 576
    k1: Optional[int] = None
    k2: Optional[int] = None
    mode: str = "causal"
    samples: int = 1              # estimator draws averaged per step
    dropout_in_loss: bool = False
    # closed-form warm-up steps treating the channel as linear before the
    # stochastic estimators take over (0 disables)
    warmup_iters: int = 800
    warmup_lr: float = 0.1
    # decision-directed finish: flip search on the learned reconstruction
    # error, then refit the equalizer kernels on the corrected decisions
    polish: bool = True
    icm_passes: int = 4
    icm_width: int = 3
    finetune_iters: int = 200
    finetune_lr: float = 0.03


@dataclass
class NlTrainResult:
    params: ad.ParamStore
    posterior: enc.Posterior
    trace: list = field(default_factory=list)

    @property
    def h(self) -> np.ndarray:
        return self.params.values["h"].copy()

    @property
    def tau(self) -> float:
        return float(np.exp(self.params.values["tau_raw"][0]))


def icm_flip_search(y: Observation, params: ad.ParamStore, hard: np.ndarray,
                    mode: str = "causal", passes: int = 4, width: int = 3) -> np.ndarray:
    """Coordinate descent on the reconstruction error: flip runs of up to
    `width` symbols wherever that lowers ||y - G(x)||^2 under the learned
    decoder. Rescues confident decisions the saturated gradients cannot move.
    """
    yv = np.asarray(y.i, float)
    cur = hard.copy()
    best = float(np.sum((yv - decoder_forward(cur, params, mode=mode)) ** 2))
    n = cur.shape[0]
    for _ in range(passes):
        improved = False
        for j in range(n):
            for w in range(1, width + 1):
                if j + w > n:
                    break
                cand = cur.copy()
                cand[j:j + w] *= -1.0
                r = float(np.sum((yv - decoder_forward(cand, params, mode=mode)) ** 2))
                if r < best - 1e-9:
                    cur, best = cand, r
                    improved = True
        if not improved:
            break
    return cur


def train_vaee_nl(y: Observation, m: int, cfg: NlTrainConfig,
                  rng: np.random.Generator) -> NlTrainResult:
    """Joint AMSGrad over encoder kernels, decoder weights, channel taps and
    temperature; otherwise mirrors the linear trainer.

    Training is staged. Closed-form linear-loss steps on the taps and
    encoder kernels come first (the nonlinearity net sits at the identity,
    so this is the linear special case of the decoder): cold-starting the
    sampled estimators lets the decoder collapse to a constant fit of
    corrupted symbol draws, after which the entropy term drags the posterior
    to uniform and no gradient path remains. The joint stochastic phase then
    learns the nonlinearity. A final decision-directed polish (flip search
    plus a short kernel refit on the corrected decisions) fixes the few
    confidently-wrong symbols whose gradients the sigmoid has saturated away.
    """
    from . import vae_loss as vl

    params = init_decoder(m, rng, cfg.mode)
    ep = enc.init_encoder(BPSK, cfg.k1, cfg.k2, rng)
    for name, v in ep.kernels.items():
        params.add(name, v)
    kernel_names = [k for k in params.names() if k.startswith("k")]

    trace = []
    total_len = len(y)

    def window():
        if cfg.batch_len >= total_len:
            return y
        start = int(rng.integers(0, total_len - cfg.batch_len + 1))
        return Observation(BPSK, y.i[start:start + cfg.batch_len])

    warm_names = kernel_names + ["h"]
    for step in range(1, cfg.warmup_iters + 1):
        tape = ad.Tape()
        leaves = params.leaves(tape)
        w = window()
        q = enc.encode_bpsk_on_tape(np.asarray(w.i, float), leaves)
        bd = vl.loss_linear(w, leaves, q, BPSK, mode=cfg.mode)
        if not np.isfinite(float(bd.total.value)):
            raise TrainingError(f"non-finite warm-up loss at step {step}")
        grads = ad.record_and_backward(bd.total, leaves)
        params.amsgrad_step({k: grads[k] for k in warm_names}, cfg.warmup_lr)
        snap = bd.snapshot(step)
        snap["phase"] = "warmup"
        trace.append(snap)

    schedule = [(cfg.lr, cfg.iters), (cfg.lr / 5.0, cfg.anneal_iters)]
    step_no = cfg.warmup_iters
    for lr, iters in schedule:
        for _ in range(iters):
            step_no += 1
            snap, grads = loss_and_grads_nl(window(), params, rng, mode=cfg.mode,
                                            samples=cfg.samples,
                                            dropout=cfg.dropout_in_loss)
            if not np.isfinite(snap["total"]):
                raise TrainingError(f"non-finite loss at step {step_no}: {snap}")
            params.amsgrad_step(grads, lr)
            snap["step"] = step_no
            snap["phase"] = "joint"
            trace.append(snap)

    def current_posterior():
        kernels = {k: params.values[k].copy() for k in kernel_names}
        return enc.encode(y, enc.EncoderParams(BPSK, kernels))

    if cfg.polish:
        hard, _ = current_posterior().hard_symbols()
        fixed = icm_flip_search(y, params, hard, cfg.mode, cfg.icm_passes, cfg.icm_width)
        targets = (fixed + 1.0) / 2.0
        yv = np.asarray(y.i, float)
        for _ in range(cfg.finetune_iters):
            tape = ad.Tape()
            leaves = params.leaves(tape)
            q = enc.encode_bpsk_on_tape(yv, leaves)
            ce = -(ad.vsum(targets * ad.log(q)) + ad.vsum((1.0 - targets) * ad.log(1.0 - q)))
            grads = ad.record_and_backward(ce, leaves)
            params.amsgrad_step({k: grads[k] for k in kernel_names}, cfg.finetune_lr)

    return NlTrainResult(params=params, posterior=current_posterior(), trace=trace)
