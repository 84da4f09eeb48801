"""LDPC code handling: alist parsing, syndrome checks, sum-product decoding
with extrinsic outputs, and the Gallager even-parity loss.

LLR convention throughout: LLR_i = log(P(X_i = +1) / P(X_i = -1)), which for
bits c (x = (-1)^c) equals log(P(c=0)/P(c=1)). Messages are clipped to
+/-LLR_CLIP for numerical stability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

LLR_CLIP = 30.0
_TANH_LIM = 1.0 - 1e-12


class AlistError(Exception):
    pass


class LdpcCode:
    """Tanner graph of a sparse J x N parity-check matrix.

    Immutable after construction; edge index arrays are precomputed for the
    vectorized decoder (edges grouped contiguously by check).
    """

    def __init__(self, n_vars: int, check_neighbors: list):
        self.n_vars = int(n_vars)
        self.n_checks = len(check_neighbors)
        self.check_neighbors = [np.asarray(sorted(c), dtype=np.int64) for c in check_neighbors]
        var_nb = [[] for _ in range(self.n_vars)]
        for j, nb in enumerate(self.check_neighbors):
            if nb.size != np.unique(nb).size:
                raise AlistError(f"duplicate edge at check {j}")
            if nb.size and (nb.min() < 0 or nb.max() >= self.n_vars):
                raise AlistError(f"variable index out of range at check {j}")
            for i in nb:
                var_nb[i].append(j)
        self.var_neighbors = [np.asarray(v, dtype=np.int64) for v in var_nb]
        # flat edge arrays, check-major
        self.edge_var = np.concatenate(self.check_neighbors) if self.n_checks else np.zeros(0, int)
        degs = np.array([len(c) for c in self.check_neighbors], dtype=np.int64)
        self.check_ptr = np.concatenate([[0], np.cumsum(degs)])
        self.edge_chk = np.repeat(np.arange(self.n_checks), degs)
        self.n_edges = self.edge_var.size

    def __eq__(self, other):
        return (isinstance(other, LdpcCode) and self.n_vars == other.n_vars
                and self.n_checks == other.n_checks
                and all(np.array_equal(a, b) for a, b in
                        zip(self.check_neighbors, other.check_neighbors)))


def parse_alist(text: str) -> LdpcCode:
    """Parse the standard alist layout (1-indexed, zero-padded rows)."""
    tokens_per_line = [ln.split() for ln in text.splitlines() if ln.strip()]
    if len(tokens_per_line) < 4:
        raise AlistError("truncated alist: missing header")

    def ints(lineno):
        try:
            return [int(t) for t in tokens_per_line[lineno]]
        except ValueError as e:
            raise AlistError(f"line {lineno + 1}: {e}") from None

    n, j = ints(0)[:2]
    dv_max, dc_max = ints(1)[:2]
    var_degs = ints(2)
    chk_degs = ints(3)
    if len(var_degs) != n or len(chk_degs) != j:
        raise AlistError("degree list lengths do not match header")
    if max(var_degs, default=0) > dv_max or max(chk_degs, default=0) > dc_max:
        raise AlistError("degree exceeds declared maximum")
    if len(tokens_per_line) < 4 + n + j:
        raise AlistError("truncated alist: missing adjacency rows")

    var_rows = []
    for i in range(n):
        row = [t for t in ints(4 + i) if t != 0]
        if len(row) != var_degs[i]:
            raise AlistError(f"line {4 + i + 1}: variable degree mismatch")
        if any(t < 1 or t > j for t in row):
            raise AlistError(f"line {4 + i + 1}: check index out of range")
        var_rows.append(sorted(t - 1 for t in row))
    chk_rows = []
    for jj in range(j):
        row = [t for t in ints(4 + n + jj) if t != 0]
        if len(row) != chk_degs[jj]:
            raise AlistError(f"line {4 + n + jj + 1}: check degree mismatch")
        if any(t < 1 or t > n for t in row):
            raise AlistError(f"line {4 + n + jj + 1}: variable index out of range")
        chk_rows.append(sorted(t - 1 for t in row))

    code = LdpcCode(n, chk_rows)
    # the two adjacency blocks must describe the same graph
    for i in range(n):
        if list(code.var_neighbors[i]) != var_rows[i]:
            raise AlistError(f"line {4 + i + 1}: adjacency blocks inconsistent")
    return code


def serialize_alist(code: LdpcCode) -> str:
    var_degs = [len(v) for v in code.var_neighbors]
    chk_degs = [len(c) for c in code.check_neighbors]
    dv, dc = max(var_degs, default=0), max(chk_degs, default=0)
    lines = [f"{code.n_vars} {code.n_checks}", f"{dv} {dc}",
             " ".join(map(str, var_degs)), " ".join(map(str, chk_degs))]
    for v in code.var_neighbors:
        row = [str(t + 1) for t in v] + ["0"] * (dv - len(v))
        lines.append(" ".join(row))
    for c in code.check_neighbors:
        row = [str(t + 1) for t in c] + ["0"] * (dc - len(c))
        lines.append(" ".join(row))
    return "\n".join(lines) + "\n"


def syndrome(code: LdpcCode, bits) -> np.ndarray:
    """Parity of each check over bits c in {0,1}."""
    bits = np.asarray(bits)
    if bits.shape[0] != code.n_vars:
        raise ValueError("bit vector length does not match code")
    edge_bits = bits[code.edge_var]
    return np.bincount(code.edge_chk, weights=edge_bits, minlength=code.n_checks).astype(int) % 2


def gallager_parity_prob(q) -> float:
    """P(even number of ones) for independent bits with P(x_i=+1)=q_i:
    (1 + prod(2q_i - 1)) / 2."""
    q = np.asarray(q, dtype=float)
    return float((1.0 + np.prod(2.0 * q - 1.0)) / 2.0)


def _segment_prod(v: ad.Var, code: LdpcCode) -> ad.Var:
    """Per-check product of v over each check's neighborhood (tape op)."""
    x = v.value[code.edge_var]
    ptr = code.check_ptr
    prods = np.empty(code.n_checks)
    for j in range(code.n_checks):
        prods[j] = np.prod(x[ptr[j]:ptr[j + 1]])

    def vjp(g):
        out = np.zeros(code.n_vars)
        for j in range(code.n_checks):
            seg = x[ptr[j]:ptr[j + 1]]
            # leave-one-out products via prefix/suffix (exact at zeros)
            pre = np.concatenate([[1.0], np.cumprod(seg[:-1])])
            suf = np.concatenate([np.cumprod(seg[::-1][:-1])[::-1], [1.0]])
            np.add.at(out, code.edge_var[ptr[j]:ptr[j + 1]], g[j] * pre * suf)
        return out

    return v.tape.push(prods, [(v.index, vjp)])


def gallager_loss_on_tape(code: LdpcCode, q: ad.Var) -> ad.Var:
    """-sum_j log[(1 + prod_{i in N_j}(2 q_i - 1))/2], parity prob floored."""
    s = 2.0 * q - 1.0
    prob = (1.0 + _segment_prod(s, code)) * 0.5
    return -ad.vsum(ad.log(ad.clip(prob, 1e-30, None)))


def gallager_loss(code: LdpcCode, q) -> float:
    tape = ad.Tape()
    return float(gallager_loss_on_tape(code, tape.leaf(np.asarray(q, dtype=float))).value)


@dataclass
class BpResult:
    extrinsic_prob: np.ndarray   # p_bar_i(X_i = +1), channel LLR excluded
    extrinsic_llr: np.ndarray
    full_llr: np.ndarray         # channel + extrinsic
    hard_bits: np.ndarray        # c in {0,1} from the full marginal
    syndrome_ok: bool
    iters_run: int


def bp_decode(code: LdpcCode, channel_llr, iters: int) -> BpResult:
    """Flooding sum-product in the LLR domain (tanh rule at checks).

    Exits early once the hard word has zero syndrome. The extrinsic marginal
    per variable sums incoming check messages only.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    llr = np.clip(np.asarray(channel_llr, dtype=float), -LLR_CLIP, LLR_CLIP)
    if llr.shape[0] != code.n_vars:
        raise ValueError("LLR length does not match code")
    ev, ec, ptr = code.edge_var, code.edge_chk, code.check_ptr
    r = np.zeros(code.n_edges)
    r_prev = np.zeros(code.n_edges)
    ext = np.zeros(code.n_vars)
    it = 0
    for it in range(1, iters + 1):
        q_msg = np.clip(llr[ev] + ext[ev] - r, -LLR_CLIP, LLR_CLIP)
        t = np.tanh(0.5 * q_msg)
        mag = np.abs(t)
        is_zero = mag < 1e-300
        logs = np.log(np.clip(mag, 1e-300, _TANH_LIM))
        sum_logs = np.bincount(ec, weights=logs, minlength=code.n_checks)
        neg = (t < 0).astype(float)
        n_neg = np.bincount(ec, weights=neg, minlength=code.n_checks)
        n_zero = np.bincount(ec, weights=is_zero.astype(float), minlength=code.n_checks)
        excl_zero = n_zero[ec] - is_zero
        excl_mag = np.exp(np.clip(sum_logs[ec] - logs, None, 0.0))
        excl_sign = 1.0 - 2.0 * ((n_neg[ec] - neg) % 2)
        prod = np.where(excl_zero > 0, 0.0, excl_sign * excl_mag)
        r = np.clip(2.0 * np.arctanh(np.clip(prod, -_TANH_LIM, _TANH_LIM)),
                    -LLR_CLIP, LLR_CLIP)
        ext = np.bincount(ev, weights=r, minlength=code.n_vars)
        hard = (llr + ext < 0).astype(int)
        # exit once decisions form a codeword and messages have settled
        # (stationarity keeps tree-structured marginals exact)
        if not np.any(syndrome(code, hard)) and np.max(np.abs(r - r_prev), initial=0.0) < 1e-9:
            break
        r_prev = r
    full = llr + ext
    hard = (full < 0).astype(int)
    return BpResult(
        extrinsic_prob=1.0 / (1.0 + np.exp(-ext)),
        extrinsic_llr=ext.copy(),
        full_llr=full,
        hard_bits=hard,
        syndrome_ok=not np.any(syndrome(code, hard)),
        iters_run=it,
    )
