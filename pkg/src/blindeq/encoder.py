"""Equalizer networks producing per-symbol Bernoulli probabilities.

Two-layer 1D convolutional residual nets: real convs with a tanh between for
BPSK, complex convs with a softsign for QPSK; a sigmoid on the residual sum
yields probabilities. Each conv layer uses a single filter and no bias, so
the default parameter counts are 15 (BPSK, 10+5 taps) and 14 (QPSK, 2x(5+2)).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .channel import BPSK, QPSK, Observation

# probability clipping keeps entropy/log terms finite
PROB_EPS = 1e-7

DEFAULT_KERNELS = {BPSK: (10, 5), QPSK: (5, 2)}


@dataclass
class EncoderParams:
    """Trainable equalizer kernels; QPSK kernels are I/Q pairs."""

    scheme: str
    kernels: dict  # name -> ndarray

    def names(self):
        return list(self.kernels)

    def n_params(self) -> int:
        return sum(v.size for v in self.kernels.values())


@dataclass
class Posterior:
    """Per-symbol P(X=+1 | y); entries clipped into [eps, 1-eps]."""

    scheme: str
    qi: np.ndarray
    qq: Optional[np.ndarray] = None

    def __len__(self):
        return self.qi.shape[0]

    def hard_symbols(self):
        i = np.where(self.qi > 0.5, 1.0, -1.0)
        if self.scheme == BPSK:
            return i, None
        return i, np.where(self.qq > 0.5, 1.0, -1.0)

    def hard_bits(self) -> np.ndarray:
        """Bit decisions c = (x == -1); QPSK interleaves I/Q per symbol."""
        bi = (self.qi <= 0.5).astype(int)
        if self.scheme == BPSK:
            return bi
        bits = np.empty(2 * len(self), dtype=int)
        bits[0::2] = bi
        bits[1::2] = (self.qq <= 0.5).astype(int)
        return bits


def init_encoder(scheme: str, k1: Optional[int] = None, k2: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None) -> EncoderParams:
    """Kernels drawn iid uniform on [-0.1, 0.1]."""
    d1, d2 = DEFAULT_KERNELS[scheme]
    k1 = d1 if k1 is None else k1
    k2 = d2 if k2 is None else k2
    if k1 < 1 or k2 < 1:
        raise ValueError("kernel sizes must be >= 1")
    rng = np.random.default_rng() if rng is None else rng

    def draw(n):
        return rng.uniform(-0.1, 0.1, size=n)

    if scheme == BPSK:
        kernels = {"k1": draw(k1), "k2": draw(k2)}
    elif scheme == QPSK:
        kernels = {"k1_i": draw(k1), "k1_q": draw(k1),
                   "k2_i": draw(k2), "k2_q": draw(k2)}
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return EncoderParams(scheme, kernels)


def _same_offset(m: int) -> int:
    return (m - 1) // 2


def encode_bpsk_on_tape(y: np.ndarray, leaves: dict, eps: float = PROB_EPS):
    """q = sigmoid(conv2(tanh(conv1(y))) + y), clipped; differentiable in
    the kernel leaves. A looser training-time `eps` keeps gradients alive
    through the sigmoid at confident symbols."""
    k1, k2 = leaves["k1"], leaves["k2"]
    h1 = ad.tanh(ad.conv1d_offset(y, k1, _same_offset(k1.value.shape[0])))
    h2 = ad.conv1d_offset(h1, k2, _same_offset(k2.value.shape[0]))
    q = ad.sigmoid(h2 + y)
    return ad.clip(q, eps, 1.0 - eps)


def encode_qpsk_on_tape(yi: np.ndarray, yq: np.ndarray, leaves: dict):
    k1 = (leaves["k1_i"], leaves["k1_q"])
    k2 = (leaves["k2_i"], leaves["k2_q"])
    m1 = _same_offset(k1[0].value.shape[0])
    m2 = _same_offset(k2[0].value.shape[0])

    def cconv(pair, k, off):
        ui, uq = pair
        oi = ad.conv1d_offset(ui, k[0], off) - ad.conv1d_offset(uq, k[1], off)
        oq = ad.conv1d_offset(ui, k[1], off) + ad.conv1d_offset(uq, k[0], off)
        return oi, oq

    a_i, a_q = cconv((yi, yq), k1, m1)
    s_i, s_q = ad.softsign(a_i), ad.softsign(a_q)
    b_i, b_q = cconv((s_i, s_q), k2, m2)
    qi = ad.clip(ad.sigmoid(b_i + yi), PROB_EPS, 1.0 - PROB_EPS)
    qq = ad.clip(ad.sigmoid(b_q + yq), PROB_EPS, 1.0 - PROB_EPS)
    return qi, qq


def _leaves_for(tape: ad.Tape, params: EncoderParams) -> dict:
    return {name: tape.leaf(v) for name, v in params.kernels.items()}


def encode(y: Observation, params: EncoderParams) -> Posterior:
    """Forward pass without gradients."""
    tape = ad.Tape()
    leaves = _leaves_for(tape, params)
    if params.scheme == BPSK:
        q = encode_bpsk_on_tape(np.asarray(y.i, dtype=float), leaves)
        return Posterior(BPSK, q.value.copy())
    qi, qq = encode_qpsk_on_tape(np.asarray(y.i, dtype=float),
                                 np.asarray(y.q, dtype=float), leaves)
    return Posterior(QPSK, qi.value.copy(), qq.value.copy())


def encode_bpsk(y: Observation, params: EncoderParams) -> Posterior:
    if params.scheme != BPSK:
        raise ValueError("params are not BPSK")
    return encode(y, params)


def encode_qpsk(y: Observation, params: EncoderParams) -> Posterior:
    if params.scheme != QPSK:
        raise ValueError("params are not QPSK")
    return encode(y, params)
