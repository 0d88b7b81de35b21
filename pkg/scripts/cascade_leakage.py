"""Cascade disclosure against the Shannon limit n*h2(q), over a range of error rates.

    python3 scripts/cascade_leakage.py --n 10000 --trials 20
"""

import argparse
from dataclasses import dataclass

import numpy as np

from qkdsim.amplify import binary_entropy
from qkdsim.reconcile import CascadeConfig, LocalParityOracle, cascade


@dataclass
class LeakConfig:
    n: int = 10_000
    trials: int = 20
    qbers: tuple = (0.005, 0.01, 0.02, 0.03, 0.05, 0.08, 0.10)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=LeakConfig.n)
    ap.add_argument("--trials", type=int, default=LeakConfig.trials)
    args = ap.parse_args(argv)
    cfg = LeakConfig(args.n, args.trials)

    print(f"{'qber':>6} {'leak/n':>8} {'h2(q)':>7} {'ratio':>6} {'ok':>5}")
    for q in cfg.qbers:
        leaks, ok = [], 0
        for t in range(cfg.trials):
            rng = np.random.default_rng(t)
            a = rng.integers(0, 2, cfg.n, dtype=np.uint8)
            b = a ^ (rng.random(cfg.n) < q).astype(np.uint8)
            c = CascadeConfig(shuffle_seed=t)
            res = cascade(b, q, LocalParityOracle(a, c), c)
            # the verify digest is a fixed cost, not part of the parity exchange
            leaks.append((res.leaked_bits - c.digest_bits) / cfg.n)
            ok += np.array_equal(res.corrected_key, a)
        h = binary_entropy(q)
        print(f"{q:6.3f} {np.mean(leaks):8.4f} {h:7.4f} {np.mean(leaks) / h:6.2f} {ok:>2}/{cfg.trials}")


if __name__ == "__main__":
    main()
