#!/usr/bin/env python3
"""Construct the bundled rate-3/4 IRA-style LDPC code and write its alist.

Structure: H = [Hu | Hp] with a dual-diagonal (staircase) parity part, which
gives linear-time encoding by back-substitution. Info columns get degree-3
edges placed by progressive edge growth (PEG) to keep the girth high.

Usage: python3 scripts/make_ldpc_code.py [out.alist]
"""

import sys
from collections import deque
from pathlib import Path

import numpy as np

N = 576
J = 144
K = N - J
INFO_DEG = 3
SEED = 20240711


def peg_place(n_info, n_checks, deg, rng):
    """Greedy PEG: attach each edge to a check as far as possible from the
    variable in the current subgraph; break ties by lowest check degree."""
    var_nb = [[] for _ in range(n_info)]
    chk_nb = [[] for _ in range(n_checks)]
    chk_deg = np.zeros(n_checks, dtype=int)

    def bfs_depths(v):
        """Distance from variable v to every check (-1 if unreachable)."""
        depth = -np.ones(n_checks, dtype=int)
        seen_v = {v}
        frontier = list(var_nb[v])
        d = 0
        for c in frontier:
            depth[c] = 0
        while frontier:
            nxt_vars = set()
            for c in frontier:
                for u in chk_nb[c]:
                    if u not in seen_v:
                        nxt_vars.add(u)
            seen_v |= nxt_vars
            nxt = []
            d += 1
            for u in nxt_vars:
                for c in var_nb[u]:
                    if depth[c] < 0:
                        depth[c] = d
                        nxt.append(c)
            frontier = nxt
        return depth

    order = rng.permutation(n_info)
    for v in order:
        for _ in range(deg):
            depth = bfs_depths(v)
            unreachable = np.nonzero(depth < 0)[0]
            cand = unreachable if unreachable.size else np.nonzero(depth == depth.max())[0]
            cand = cand[chk_deg[cand] == chk_deg[cand].min()]
            c = int(rng.choice(cand))
            var_nb[v].append(c)
            chk_nb[c].append(v)
            chk_deg[c] += 1
    return chk_nb


def build():
    rng = np.random.default_rng(SEED)
    chk_nb = peg_place(K, J, INFO_DEG, rng)
    # staircase parity columns K..N-1: column K+t hits checks t and t+1
    for t in range(J):
        chk_nb[t].append(K + t)
        if t + 1 < J:
            chk_nb[t + 1].append(K + t)
    return [sorted(c) for c in chk_nb]


def main():
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else (
        Path(__file__).resolve().parent.parent / "src/blindeq/codes/ldpc_n576_r34.alist")
    sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))
    from blindeq.ldpc import LdpcCode, serialize_alist

    code = LdpcCode(N, build())
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(serialize_alist(code))
    degs = sorted(set(len(v) for v in code.var_neighbors))
    print(f"wrote {out} (N={code.n_vars} J={code.n_checks} var degrees {degs})")


if __name__ == "__main__":
    main()
