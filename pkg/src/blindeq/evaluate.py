"""Error-rate metrics with rotation/delay ambiguity resolution, and Shannon
threshold SNRs for the ISI channel via water-filling capacity."""

from __future__ import annotations

import numpy as np

from .channel import BPSK, QPSK, SymbolSequence


class EvalError(Exception):
    pass


def _rotate_qpsk(i, q, r):
    """Multiply by j^r: (I, Q) -> (-Q, I) once per step."""
    for _ in range(r % 4):
        i, q = -q, i
    return i, q


def ser_resolved(x_hat: SymbolSequence, x_true: SymbolSequence,
                 max_delay: int) -> tuple[float, int, int]:
    """Minimum symbol error rate over constellation rotations (sign for
    BPSK, four quarter-turns for QPSK) and integer delays in
    [-max_delay, max_delay], comparing the overlapping window.

    Delay d means x_hat[n] estimates x_true[n-d]. Ties prefer the smallest
    |delay|, then the smallest rotation index. Returns (ser, rotation, delay).
    """
    if x_hat.scheme != x_true.scheme:
        raise EvalError("scheme mismatch")
    n = len(x_true)
    if len(x_hat) != n:
        raise EvalError("length mismatch")
    if max_delay >= n:
        raise EvalError("max_delay leaves an empty comparison window")
    scheme = x_true.scheme
    n_rot = 2 if scheme == BPSK else 4

    delays = sorted(range(-max_delay, max_delay + 1), key=lambda d: (abs(d), d < 0))
    best = None
    for r in range(n_rot):
        if scheme == BPSK:
            hi = x_hat.i if r == 0 else -x_hat.i
            hq = None
        else:
            hi, hq = _rotate_qpsk(x_hat.i, x_hat.q, r)
        for d in delays:
            if d >= 0:
                a_i, b_i = hi[d:], x_true.i[:n - d]
                a_q = hq[d:] if hq is not None else None
                b_q = x_true.q[:n - d] if hq is not None else None
            else:
                a_i, b_i = hi[:n + d], x_true.i[-d:]
                a_q = hq[:n + d] if hq is not None else None
                b_q = x_true.q[-d:] if hq is not None else None
            err = a_i != b_i
            if a_q is not None:
                err = err | (a_q != b_q)
            ser = float(np.mean(err))
            if best is None or ser < best[0]:
                best = (ser, r, d)
    return best


def ber_coded(decoded_bits, true_bits) -> float:
    """Plain fraction of bit errors; coded decisions carry no ambiguity."""
    decoded_bits = np.asarray(decoded_bits)
    true_bits = np.asarray(true_bits)
    if decoded_bits.shape != true_bits.shape:
        raise EvalError("length mismatch")
    return float(np.mean(decoded_bits != true_bits))


def capacity_bits(h, snr_db: float, grid: int = 8192) -> float:
    """Water-filling capacity (bits per channel use) of the real
    discrete-time Gaussian ISI channel at unit transmit power.

    The SNR convention matches the simulator: SNR = ||h||^2 * P / sigma^2 in
    expectation, so a flat channel reduces to 0.5*log2(1 + SNR).
    """
    h = np.asarray(h, dtype=float)
    if not np.any(h != 0):
        raise EvalError("impulse response is zero")
    power = 1.0
    sigma2 = float(np.sum(h ** 2)) * power / (10.0 ** (snr_db / 10.0))
    f = (np.arange(grid) + 0.5) / grid - 0.5
    gain = np.abs(np.exp(-2j * np.pi * np.outer(f, np.arange(h.size))) @ h) ** 2
    inv = sigma2 / np.maximum(gain, 1e-300)

    # water level by bisection on total allocated power
    lo, hi = inv.min(), inv.min() + power + sigma2 * grid
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        alloc = np.mean(np.maximum(mid - inv, 0.0))
        if alloc > power:
            hi = mid
        else:
            lo = mid
    level = 0.5 * (lo + hi)
    s = np.maximum(level - inv, 0.0)
    return float(np.mean(0.5 * np.log2(1.0 + s / inv)))


def shannon_threshold(h, rate_bits_per_use: float, grid: int = 8192,
                      lo_db: float = -20.0, hi_db: float = 40.0) -> float:
    """SNR (dB) at which the water-filling capacity equals the code rate."""
    if rate_bits_per_use <= 0:
        raise EvalError("rate must be positive")
    if capacity_bits(h, hi_db, grid) < rate_bits_per_use:
        raise EvalError("rate unattainable inside the bisection bracket")
    if capacity_bits(h, lo_db, grid) > rate_bits_per_use:
        raise EvalError("bracket does not enclose the threshold")
    lo, hi = lo_db, hi_db
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if capacity_bits(h, mid, grid) < rate_bits_per_use:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
