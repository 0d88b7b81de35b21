"""Sweep channel noise and eavesdropping; print QBER and final key yield per point.

    python3 scripts/qber_sweep.py --photons 50000 --seeds 3
"""

import argparse
import csv
import sys
from dataclasses import dataclass

from qkdsim.bb84 import QkdLink, SessionPolicy, run_link_session
from qkdsim.errors import QkdError
from qkdsim.keystore import LinkKeyStore
from qkdsim.qchannel import ChannelParams


@dataclass
class SweepConfig:
    photons: int = 50_000
    seeds: int = 3
    loss: float = 0.2
    flips: tuple = (0.0, 0.01, 0.02, 0.04, 0.06, 0.08, 0.10, 0.12)
    eves: tuple = (0.0, 0.25, 0.5, 1.0)


def run_point(cfg, flip, eve, seed):
    link = QkdLink("sweep", LinkKeyStore("sweep", "a"), LinkKeyStore("sweep", "b"), ChannelParams(cfg.loss, flip, eve))
    try:
        rep = run_link_session(link, SessionPolicy(photons=cfg.photons), seed=seed)
    except QkdError as exc:
        rep = exc.report
    return rep


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--photons", type=int, default=SweepConfig.photons)
    ap.add_argument("--seeds", type=int, default=SweepConfig.seeds)
    ap.add_argument("--loss", type=float, default=SweepConfig.loss)
    args = ap.parse_args(argv)
    cfg = SweepConfig(args.photons, args.seeds, args.loss)

    out = csv.writer(sys.stdout)
    out.writerow(["flip", "eve", "seed", "status", "sifted", "qber", "leaked", "final", "final_per_photon"])
    points = [(f, 0.0) for f in cfg.flips] + [(0.0, e) for e in cfg.eves if e]
    for flip, eve in points:
        for seed in range(cfg.seeds):
            rep = run_point(cfg, flip, eve, seed)
            out.writerow([flip, eve, seed, rep.status, rep.sifted, f"{rep.qber:.4f}", rep.leaked_bits,
                          rep.final_len, f"{rep.final_len / cfg.photons:.4f}"])


if __name__ == "__main__":
    main()
