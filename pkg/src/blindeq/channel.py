"""Symbol generation and the noisy linear/nonlinear ISI channel simulator.

All randomness flows through explicitly passed numpy Generators, so trials
are reproducible from their seeds and safe to run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

BPSK = "bpsk"
QPSK = "qpsk"


class ChannelError(Exception):
    pass


@dataclass
class SymbolSequence:
    """Transmitted symbols: real +/-1 vector (BPSK) or I/Q pair (QPSK)."""

    scheme: str
    i: np.ndarray
    q: Optional[np.ndarray] = None

    def __post_init__(self):
        self.i = np.asarray(self.i, dtype=np.float64)
        if self.scheme == QPSK:
            self.q = np.asarray(self.q, dtype=np.float64)
            if self.q.shape != self.i.shape:
                raise ChannelError("I/Q length mismatch")
        elif self.q is not None:
            raise ChannelError("BPSK sequence has no Q component")

    def __len__(self):
        return self.i.shape[0]

    def as_complex(self) -> np.ndarray:
        if self.scheme == BPSK:
            return self.i.astype(np.complex128)
        return self.i + 1j * self.q


@dataclass
class Observation:
    """Channel output window, same layout as the transmitted sequence."""

    scheme: str
    i: np.ndarray
    q: Optional[np.ndarray] = None

    def __len__(self):
        return self.i.shape[0]

    def as_complex(self) -> np.ndarray:
        if self.scheme == BPSK:
            return self.i.astype(np.complex128)
        return self.i + 1j * self.q


def _identity(a):
    return a


def _g1(a):
    return np.tanh(a)


def _g2(a):
    return a + 0.2 * a**2 - 0.1 * a**3


def _g3(a):
    return a + 0.2 * a**2 - 0.1 * a**3 + 0.5 * np.cos(np.pi * a)


_NONLINEARITIES: dict[str, Callable] = {
    "identity": _identity,
    "g1": _g1,
    "g2": _g2,
    "g3": _g3,
}

# non-minimum phase test channels; ht* are causal, h1/h2 complex
_CHANNELS = {
    "h1": np.array([0.0545 + 0.05j, 0.2832 - 0.11971j, -0.7676 + 0.2788j,
                    -0.0641 - 0.0576j, 0.0466 - 0.02275j]),
    "h2": np.array([0.0554 + 0.0165j, -1.3449 - 0.4523j,
                    1.0067 + 1.1524j, 0.3476 + 0.3153j]),
    "ht1": np.array([0.2, 0.9, 0.3]),
    "ht2": np.array([0.2, 0.9, 0.3, 1.0]),
    "ht3": np.array([0.16, 0.545, -0.672, 0.256, 0.095, -0.389]),
}


def builtin(name: str):
    """Named channel taps (ndarray, possibly complex) or nonlinearity callable."""
    if name in _CHANNELS:
        return _CHANNELS[name].copy()
    if name in _NONLINEARITIES:
        return _NONLINEARITIES[name]
    raise ChannelError(f"unknown builtin {name!r}")


@dataclass
class ChannelSpec:
    """Generative truth: impulse response, nonlinearity, noise variance.

    `mode` fixes the kernel indexing (causal h_0..h_{M-1} or centered around
    h_0); `pad` chooses the boundary convention: "zeros" pads the symbol
    sequence with zeros, "random" draws unknown constellation symbols (the
    coded-transmission convention where the block starts mid-stream).
    """

    h: np.ndarray
    mode: str = "causal"
    nonlinearity: str = "identity"
    sigma_w2: float = 0.0
    pad: str = "zeros"

    def __post_init__(self):
        self.h = np.asarray(self.h)
        if self.h.ndim != 1 or self.h.size == 0 or not np.any(self.h != 0):
            raise ChannelError("impulse response must be a nonzero vector")
        if self.mode == "centered" and self.h.size % 2 == 0:
            raise ChannelError("centered mode requires odd tap count")
        if self.mode not in ("causal", "centered"):
            raise ChannelError(f"unknown mode {self.mode!r}")
        if self.nonlinearity not in _NONLINEARITIES:
            raise ChannelError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.pad not in ("zeros", "random"):
            raise ChannelError(f"unknown pad {self.pad!r}")
        if self.sigma_w2 < 0:
            raise ChannelError("sigma_w2 must be >= 0")

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.h)

    def g(self) -> Callable:
        return _NONLINEARITIES[self.nonlinearity]


def modulate(bits, scheme: str) -> SymbolSequence:
    """Map bits c in {0,1} to symbols x = (-1)^c; QPSK pairs map (even, odd)
    bit indices to (I, Q)."""
    bits = np.asarray(bits)
    if not np.all((bits == 0) | (bits == 1)):
        raise ChannelError("bits must be 0/1")
    sym = 1.0 - 2.0 * bits.astype(np.float64)
    if scheme == BPSK:
        return SymbolSequence(BPSK, sym)
    if scheme == QPSK:
        if bits.size % 2 != 0:
            raise ChannelError("QPSK requires an even number of bits")
        return SymbolSequence(QPSK, sym[0::2], sym[1::2])
    raise ChannelError(f"unknown scheme {scheme!r}")


def random_symbols(n: int, scheme: str, rng: np.random.Generator) -> SymbolSequence:
    nbits = n if scheme == BPSK else 2 * n
    return modulate(rng.integers(0, 2, size=nbits), scheme)


def clean_output(x: SymbolSequence, spec: ChannelSpec) -> np.ndarray:
    """Noiseless g(x * h) as a complex vector; padding per spec (zeros only)."""
    xc = x.as_complex()
    n, m = xc.shape[0], spec.h.shape[0]
    offset = (m - 1) // 2 if spec.mode == "centered" else 0
    out = np.convolve(xc, spec.h.astype(np.complex128))[offset:offset + n]
    if spec.nonlinearity != "identity":
        out = spec.g()(out.real).astype(np.complex128)
    return out


def apply_channel(x: SymbolSequence, spec: ChannelSpec,
                  rng: Optional[np.random.Generator] = None) -> Observation:
    """y = g(x * h) + w.

    BPSK noise is real with variance sigma_w2 per sample; QPSK noise is
    complex with variance sigma_w2/2 per component. Nonlinearities are only
    supported for BPSK (real) signals.
    """
    if spec.nonlinearity != "identity" and x.scheme == QPSK:
        raise ChannelError("nonlinearity is unsupported with QPSK")
    m = spec.h.shape[0]
    n = len(x)
    if spec.pad == "random":
        if rng is None:
            raise ChannelError("random padding requires an rng")
        left = random_symbols(m - 1, x.scheme, rng)
        right = random_symbols(m - 1, x.scheme, rng)
        xc = np.concatenate([left.as_complex(), x.as_complex(), right.as_complex()])
        offset = (m - 1) // 2 if spec.mode == "centered" else 0
        full = np.convolve(xc, spec.h.astype(np.complex128))
        # outputs aligned with the block: block sample 0 sits at index m-1
        clean = full[m - 1 + offset:m - 1 + offset + n]
        if spec.nonlinearity != "identity":
            clean = spec.g()(clean.real).astype(np.complex128)
    else:
        clean = clean_output(x, spec)
    if x.scheme == BPSK:
        y = clean.real.copy()
        if spec.sigma_w2 > 0:
            y += rng.normal(0.0, np.sqrt(spec.sigma_w2), size=n)
        return Observation(BPSK, y)
    yi = clean.real.copy()
    yq = clean.imag.copy()
    if spec.sigma_w2 > 0:
        s = np.sqrt(spec.sigma_w2 / 2.0)
        yi += rng.normal(0.0, s, size=n)
        yq += rng.normal(0.0, s, size=n)
    return Observation(QPSK, yi, yq)


def sigma_for_snr(clean: np.ndarray, snr_db: float) -> float:
    """Noise variance such that E||w||^2 = ||clean||^2 * 10^(-snr/10).

    `clean` is the noiseless channel output g(x * h) (complex for QPSK, where
    the returned value is the total per-symbol complex variance).
    """
    clean = np.asarray(clean)
    energy = float(np.sum(np.abs(clean) ** 2))
    if energy == 0.0:
        raise ChannelError("clean signal is zero; SNR undefined")
    return energy * 10.0 ** (-snr_db / 10.0) / clean.shape[0]
