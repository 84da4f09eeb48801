"""Monte-Carlo experiment harness: per-trial algorithm runners, the sweep
scheduler with its worker pool, and result serialization.

Seed discipline: every trial derives its generators from
SeedSequence([master, snr_key, trial, stream]) where snr_key is the SNR in
milli-dB and stream 0 is the data draw (shared by all algorithms at that
grid point) while each algorithm's internal randomness uses stream
1 + crc32(algorithm name). Results are therefore bit-reproducible for a
given master seed regardless of scheduling order.
"""

from __future__ import annotations

import csv
import json
import os
import time
import zlib
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Optional

import numpy as np

from . import baselines as bl
from . import channel as ch
from . import nonlinear as nl
from . import vae_loss as vl
from .channel import BPSK, QPSK, Observation
from .encoder import Posterior
from .evaluate import ber_coded, ser_resolved
from .ldpc import LdpcCode, parse_alist, syndrome
from .turbo import TurboConfig, turbo_vaee


class ConfigError(Exception):
    pass


MODES = ("uncoded-linear", "uncoded-nonlinear-smoke", "coded-linear", "coded-nonlinear")
UNCODED_ALGOS = ("vaee", "vaee-nl", "cma", "lms-mmse")
CODED_ALGOS = ("turbo-vaee", "vaee-gallager", "vaee", "turbo-eq",
               "turbo-em-genie", "turbo-em-syndrome")

RESULT_COLUMNS = ["algorithm", "channel", "nonlinearity", "snr_db", "trial",
                  "seed", "ser", "ber", "delay", "rotation", "genie", "wall_ms"]


@dataclass
class ExperimentConfig:
    mode: str = "uncoded-linear"
    modulation: str = QPSK
    channel: str = "h1"
    channel_taps: Optional[np.ndarray] = None
    nonlinearity: str = "identity"
    snr_db: tuple = (0.0, 2.0, 4.0, 6.0, 8.0, 10.0)
    train_len: int = 2000          # L
    test_len: int = 10000          # K
    batch_len: int = 128           # N (training subsequence)
    m_est: Optional[int] = None    # estimated channel length (default: true M)
    iters: int = 1500
    k1: Optional[int] = None
    k2: Optional[int] = None
    nl_samples: int = 4
    code_path: Optional[str] = None
    algos: tuple = ()
    trials: int = 20
    seed: int = 0
    out: str = "results"
    workers: int = 1
    timing: bool = True
    plot: bool = True
    turbo: TurboConfig = field(default_factory=TurboConfig)

    def resolved_taps(self) -> np.ndarray:
        if self.channel_taps is not None:
            return np.asarray(self.channel_taps)
        return ch.builtin(self.channel)

    def conv_mode(self) -> str:
        if self.mode.startswith("coded"):
            return "causal"
        taps = self.resolved_taps()
        return "centered" if taps.size % 2 == 1 else "causal"

    def validate(self) -> "ExperimentConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.modulation not in (BPSK, QPSK):
            raise ConfigError(f"unknown modulation {self.modulation!r}")
        if self.mode != "uncoded-linear" and self.modulation == QPSK:
            raise ConfigError(f"{self.mode} requires BPSK modulation")
        if self.nonlinearity != "identity":
            if self.modulation == QPSK:
                raise ConfigError("nonlinearity with QPSK is unsupported")
            if self.mode in ("uncoded-linear", "coded-linear"):
                raise ConfigError(f"{self.mode} cannot carry a nonlinearity")
        if self.mode in ("uncoded-nonlinear-smoke", "coded-nonlinear") \
                and self.nonlinearity == "identity":
            raise ConfigError(f"{self.mode} requires a nonlinearity (g1/g2/g3)")
        allowed = UNCODED_ALGOS if self.mode.startswith("uncoded") else CODED_ALGOS
        if not self.algos:
            raise ConfigError("no algorithms selected")
        for a in self.algos:
            if a not in allowed:
                raise ConfigError(f"algorithm {a!r} not valid for mode {self.mode}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        self.resolved_taps()  # raises on unknown channel names
        return self


def default_algos(mode: str) -> tuple:
    return {
        "uncoded-linear": ("vaee", "cma", "lms-mmse"),
        "uncoded-nonlinear-smoke": ("vaee-nl",),
        "coded-linear": ("turbo-vaee", "vaee-gallager", "turbo-eq"),
        "coded-nonlinear": ("turbo-vaee", "turbo-eq"),
    }[mode]


@dataclass
class TrialResult:
    algorithm: str
    channel: str
    nonlinearity: str
    snr_db: float
    trial: int
    seed: int
    ser: float = float("nan")
    ber: float = float("nan")
    delay: int = 0
    rotation: int = 0
    genie: bool = False
    wall_ms: float = 0.0
    error: str = ""
    extra: dict = field(default_factory=dict)


def packaged_code_path() -> str:
    return str(resources.files("blindeq").joinpath("codes/ldpc_n576_r34.alist"))


def load_code(path: Optional[str] = None) -> LdpcCode:
    path = packaged_code_path() if path is None else path
    with open(path) as f:
        return parse_alist(f.read())


def staircase_columns(code: LdpcCode) -> bool:
    """True when the last J columns form the dual-diagonal accumulator."""
    k = code.n_vars - code.n_checks
    j = code.n_checks
    for t in range(j):
        want = [t] if t == j - 1 else [t, t + 1]
        if list(code.var_neighbors[k + t]) != want:
            return False
    return True


def encode_staircase(code: LdpcCode, info_bits) -> np.ndarray:
    """Systematic encoding by parity back-substitution; requires the
    bundled dual-diagonal parity structure."""
    info_bits = np.asarray(info_bits, dtype=int)
    k = code.n_vars - code.n_checks
    if info_bits.shape[0] != k:
        raise ValueError(f"expected {k} info bits")
    if not staircase_columns(code):
        raise ValueError("code lacks the dual-diagonal parity structure")
    word = np.zeros(code.n_vars, dtype=int)
    word[:k] = info_bits
    acc = 0
    for t in range(code.n_checks):
        nb = code.check_neighbors[t]
        s = int(np.sum(word[nb[nb < k]])) % 2
        acc = (acc + s) % 2
        word[k + t] = acc
    if np.any(syndrome(code, word)):
        raise AssertionError("staircase encoding produced an invalid word")
    return word


def _slice_symbols(z: np.ndarray, scheme: str) -> ch.SymbolSequence:
    if scheme == BPSK:
        return ch.SymbolSequence(BPSK, np.where(z.real >= 0, 1.0, -1.0))
    return ch.SymbolSequence(QPSK, np.where(z.real >= 0, 1.0, -1.0),
                             np.where(z.imag >= 0, 1.0, -1.0))


def _posterior_symbols(post: Posterior) -> ch.SymbolSequence:
    i, q = post.hard_symbols()
    if post.scheme == BPSK:
        return ch.SymbolSequence(BPSK, i)
    return ch.SymbolSequence(QPSK, i, q)


def _rngs(cfg: ExperimentConfig, snr_db: float, trial: int, algo: str):
    snr_key = int(round(snr_db * 1000))
    data = np.random.default_rng(np.random.SeedSequence(
        [cfg.seed, snr_key, trial, 0]))
    algo_key = 1 + zlib.crc32(algo.encode())
    inner = np.random.default_rng(np.random.SeedSequence(
        [cfg.seed, snr_key, trial, algo_key]))
    return data, inner


def _make_uncoded_data(cfg: ExperimentConfig, snr_db: float, rng):
    taps = cfg.resolved_taps()
    mode = cfg.conv_mode()
    spec = ch.ChannelSpec(h=taps, mode=mode, nonlinearity=cfg.nonlinearity)
    x_train = ch.random_symbols(cfg.train_len, cfg.modulation, rng)
    clean = ch.clean_output(x_train, spec)
    spec.sigma_w2 = ch.sigma_for_snr(clean, snr_db)
    y_train = ch.apply_channel(x_train, spec, rng)
    x_test = ch.random_symbols(cfg.test_len, cfg.modulation, rng)
    y_test = ch.apply_channel(x_test, spec, rng)
    return spec, x_train, y_train, x_test, y_test


def _make_coded_data(cfg: ExperimentConfig, snr_db: float, rng, code: LdpcCode):
    taps = cfg.resolved_taps()
    spec = ch.ChannelSpec(h=taps, mode="causal", nonlinearity=cfg.nonlinearity,
                          pad="random")
    info = rng.integers(0, 2, size=code.n_vars - code.n_checks)
    bits = encode_staircase(code, info)
    x = ch.modulate(bits, BPSK)
    clean = ch.clean_output(x, ch.ChannelSpec(h=taps, mode="causal",
                                              nonlinearity=cfg.nonlinearity))
    spec.sigma_w2 = ch.sigma_for_snr(clean, snr_db)
    y = ch.apply_channel(x, spec, rng)
    return spec, bits, x, y


def run_trial(cfg: ExperimentConfig, algo: str, snr_db: float, trial: int,
              code: Optional[LdpcCode] = None) -> TrialResult:
    data_rng, inner_rng = _rngs(cfg, snr_db, trial, algo)
    seed32 = int(np.random.SeedSequence(
        [cfg.seed, int(round(snr_db * 1000)), trial]).entropy[-1]) & 0x7FFFFFFF
    result = TrialResult(algorithm=algo, channel=cfg.channel,
                         nonlinearity=cfg.nonlinearity, snr_db=snr_db,
                         trial=trial, seed=seed32)
    t0 = time.perf_counter()
    try:
        if cfg.mode.startswith("uncoded"):
            _run_uncoded(cfg, algo, snr_db, data_rng, inner_rng, result)
        else:
            _run_coded(cfg, algo, snr_db, data_rng, inner_rng, result, code)
    except Exception as exc:  # recorded, not fatal to the sweep
        result.error = f"{type(exc).__name__}: {exc}"
    if cfg.timing:
        result.wall_ms = (time.perf_counter() - t0) * 1000.0
    return result


def _run_uncoded(cfg, algo, snr_db, data_rng, inner_rng, result):
    spec, x_train, y_train, x_test, y_test = _make_uncoded_data(cfg, snr_db, data_rng)
    m = cfg.m_est or spec.h.size
    max_delay = spec.h.size

    if algo == "vaee":
        from .encoder import encode

        tc = vl.TrainConfig(iters=cfg.iters, batch_len=cfg.batch_len,
                            mode=spec.mode, k1=cfg.k1, k2=cfg.k2)
        res = vl.train_vaee_linear(y_train, cfg.modulation, m, tc, inner_rng)
        post = encode(y_test, res.encoder_params(cfg.modulation))
        x_hat = _posterior_symbols(post)
        result.extra["h_est"] = [str(v) for v in res.h_complex()]
        result.extra["sigma2_est"] = res.sigma2
    elif algo == "vaee-nl":
        if cfg.modulation != BPSK:
            raise ConfigError("vaee-nl is BPSK-only")
        nc = nl.NlTrainConfig(batch_len=min(cfg.batch_len, cfg.train_len),
                              k1=cfg.k1, k2=cfg.k2, mode=spec.mode,
                              samples=cfg.nl_samples)
        res = nl.train_vaee_nl(y_train, m, nc, inner_rng)
        # smoke mode scores the training block itself
        x_hat = _posterior_symbols(res.posterior)
        x_test, y_test = x_train, y_train
        result.extra["h_est"] = res.h.tolist()
        result.extra["tau"] = res.tau
    elif algo == "cma":
        _, eq = bl.cma_equalize(y_train, rng=inner_rng)
        z = _apply_fir(y_test, eq.taps)
        x_hat = _slice_symbols(z, cfg.modulation)
        result.extra["diverged"] = eq.diverged
    elif algo == "lms-mmse":
        _, taps, delay = bl.lms_mmse_equalize(y_train, x_train.as_complex())
        z = _apply_fir(y_test, taps, delay)
        x_hat = _slice_symbols(z, cfg.modulation)
    else:
        raise ConfigError(f"unknown uncoded algorithm {algo!r}")

    ser, rot, delay = ser_resolved(x_hat, x_test, max_delay)
    result.ser = ser
    result.rotation = rot
    result.delay = delay
    result.ber = _bit_rate_from_resolution(x_hat, x_test, rot, delay)


def _kernels_of(train_result) -> dict:
    # encoder kernels live alongside taps in the trainer's store snapshot
    return train_result.kernels if hasattr(train_result, "kernels") else \
        {k: v for k, v in train_result.posterior_kernels.items()}


def _apply_fir(y: Observation, taps: np.ndarray, delay: Optional[int] = None):
    yc = y.as_complex()
    n = yc.shape[0]
    taps_len = taps.shape[0]
    half = taps_len // 2
    padded = np.concatenate([np.zeros(half, complex), yc, np.zeros(half, complex)])
    out = np.empty(n, dtype=complex)
    for k in range(n):
        out[k] = np.dot(taps, padded[k:k + taps_len][::-1])
    if delay is not None:
        shift = half - delay
        aligned = np.zeros(n, dtype=complex)
        src = np.arange(n) + shift
        ok = (src >= 0) & (src < n)
        aligned[src[ok]] = out[np.arange(n)[ok]]
        return aligned
    return out


def _bit_rate_from_resolution(x_hat, x_true, rot, delay) -> float:
    """Bit error rate implied by the resolved alignment (components count
    as bits)."""
    from .evaluate import _rotate_qpsk

    n = len(x_true)
    if x_true.scheme == BPSK:
        hi = x_hat.i if rot == 0 else -x_hat.i
        comps = [(hi, x_true.i)]
    else:
        hi, hq = _rotate_qpsk(x_hat.i, x_hat.q, rot)
        comps = [(hi, x_true.i), (hq, x_true.q)]
    errs, total = 0, 0
    for a, b in comps:
        if delay >= 0:
            aa, bb = a[delay:], b[:n - delay]
        else:
            aa, bb = a[:n + delay], b[-delay:]
        errs += int(np.sum(aa != bb))
        total += aa.shape[0]
    return errs / total


def _run_coded(cfg, algo, snr_db, data_rng, inner_rng, result, code):
    if code is None:
        code = load_code(cfg.code_path)
    spec, bits, x, y = _make_coded_data(cfg, snr_db, data_rng, code)
    m = cfg.m_est or spec.h.size
    kind = "nonlinear" if cfg.mode == "coded-nonlinear" else "linear"
    tcfg = cfg.turbo
    tcfg.m = m
    tcfg.k1, tcfg.k2 = cfg.k1, cfg.k2

    if algo == "turbo-vaee":
        res = turbo_vaee(y, code, tcfg, inner_rng, channel_kind=kind)
        result.ber = ber_coded(res.bits, bits)
        result.ser = result.ber
        result.extra["h_est"] = res.h.tolist()
        result.extra["early_round"] = res.early_round
        result.extra["syndrome_ok"] = res.syndrome_ok
    elif algo in ("vaee", "vaee-gallager"):
        with_code = algo == "vaee-gallager"
        res = _standalone_coded(y, code, tcfg, inner_rng, kind, with_code)
        hard = res  # bits
        if with_code:
            result.ber = ber_coded(hard, bits)
        else:
            # no code anchor: resolve sign/delay like the uncoded metric
            xh = ch.modulate(hard, BPSK)
            ser, rot, delay = ser_resolved(xh, x, spec.h.size)
            result.ber = ser
            result.rotation, result.delay = rot, delay
        result.ser = result.ber
    elif algo == "turbo-eq":
        g = spec.g() if cfg.nonlinearity != "identity" else None
        hard = bl.turbo_equalize(y, spec.h, spec.sigma_w2, code,
                                 outer_iters=tcfg.T - tcfg.I, bp_iters=tcfg.B,
                                 nonlinearity=g)
        result.ber = ber_coded(hard, bits)
        result.ser = result.ber
    elif algo in ("turbo-em-genie", "turbo-em-syndrome"):
        mode = "genie" if algo.endswith("genie") else "syndrome"
        res = bl.turbo_em(y, code, m, outer_iters=tcfg.T - tcfg.I,
                          bp_iters=tcfg.B, mode=mode,
                          true_bits=bits if mode == "genie" else None)
        result.ber = ber_coded(res.bits, bits)
        result.ser = result.ber
        result.genie = res.genie
        result.extra["candidate"] = list(res.candidate)
    else:
        raise ConfigError(f"unknown coded algorithm {algo!r}")


def _standalone_coded(y, code, tcfg, rng, kind, with_code) -> np.ndarray:
    """Equalizer trained for the full budget without BP exchange."""
    cfg2 = TurboConfig(T=tcfg.T, I=tcfg.T, B=tcfg.B, lr=tcfg.lr,
                       lam=tcfg.lam if with_code else 1.0,
                       eta=tcfg.eta, alpha=tcfg.alpha, m=tcfg.m,
                       k1=tcfg.k1, k2=tcfg.k2, mode=tcfg.mode,
                       nl_samples=tcfg.nl_samples, nl_lr=tcfg.nl_lr,
                       nl_warmup=tcfg.nl_warmup)
    code_arg = code if with_code else _NULL_CODE
    res = turbo_vaee(y, code_arg if with_code else code, cfg2, rng,
                     channel_kind=kind)
    if with_code:
        # decode once with BP at the end, as the paper's standalone curves do
        from .turbo import llr_from_posterior
        from .ldpc import bp_decode

        llr = llr_from_posterior(res.posterior.qi, 1.0)
        return bp_decode(code, llr, tcfg.B).hard_bits
    return res.posterior.hard_bits()


_NULL_CODE = None


def run_sweep(cfg: ExperimentConfig):
    """Run trials over (algorithm x snr x trial); returns (results,
    aggregates, summary). Deterministic for a fixed master seed."""
    cfg.validate()
    code = None
    if cfg.mode.startswith("coded"):
        code = load_code(cfg.code_path)
    jobs = [(algo, float(snr), trial)
            for algo in cfg.algos for snr in cfg.snr_db
            for trial in range(cfg.trials)]
    results = []
    truncated = False
    workers = max(1, int(cfg.workers))
    if workers == 1:
        try:
            for algo, snr, trial in jobs:
                results.append(run_trial(cfg, algo, snr, trial, code))
        except KeyboardInterrupt:
            truncated = True
    else:
        try:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = {pool.submit(run_trial, cfg, algo, snr, trial): None
                           for algo, snr, trial in jobs}
                pending = set(futures)
                while pending:
                    done, pending = wait(pending, return_when=FIRST_COMPLETED)
                    for f in done:
                        results.append(f.result())
        except KeyboardInterrupt:
            truncated = True
    results.sort(key=lambda r: (r.algorithm, r.snr_db, r.trial))
    aggregates = aggregate(results)
    summary = {
        "config": config_to_dict(cfg),
        "truncated": truncated,
        "n_results": len(results),
        "aggregates": aggregates,
    }
    return results, aggregates, summary


def aggregate(results) -> list:
    """Per-(algorithm, snr) mean and standard error of SER and BER."""
    groups = {}
    for r in results:
        groups.setdefault((r.algorithm, r.snr_db), []).append(r)
    rows = []
    for (algo, snr), rs in sorted(groups.items()):
        ok = [r for r in rs if not r.error]
        row = {"algorithm": algo, "snr_db": snr, "trials": len(rs),
               "failed": len(rs) - len(ok)}
        for key in ("ser", "ber"):
            vals = np.array([getattr(r, key) for r in ok], dtype=float)
            vals = vals[np.isfinite(vals)]
            if vals.size:
                row[f"mean_{key}"] = float(np.mean(vals))
                row[f"sem_{key}"] = float(np.std(vals, ddof=1) / np.sqrt(vals.size)) \
                    if vals.size > 1 else 0.0
            else:
                row[f"mean_{key}"] = float("nan")
                row[f"sem_{key}"] = float("nan")
        rows.append(row)
    return rows


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["turbo"] = asdict(cfg.turbo)
    if cfg.channel_taps is not None:
        d["channel_taps"] = [str(t) for t in np.asarray(cfg.channel_taps).tolist()]
    d["snr_db"] = list(cfg.snr_db)
    d["algos"] = list(cfg.algos)
    return d


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if np.isnan(v):
            return ""
        return repr(v)
    return str(v)


def write_results_csv(results, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RESULT_COLUMNS)
        for r in results:
            w.writerow([_fmt(getattr(r, c)) for c in RESULT_COLUMNS])


def write_aggregates_csv(rows, path) -> None:
    cols = ["algorithm", "snr_db", "trials", "failed",
            "mean_ser", "sem_ser", "mean_ber", "sem_ber"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in cols])


def write_summary_json(summary, path) -> None:
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, default=str)
        f.write("\n")


def default_workers() -> int:
    env = os.environ.get("BLINDEQ_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"BLINDEQ_WORKERS must be an integer, got {env!r}")
    return 1
