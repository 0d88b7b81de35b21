"""Run the four-node chain scenario under several seeds and summarize each run.

    python3 scripts/fig2_relay.py --seeds 1 2 3 --out out/fig2
"""

import argparse
import os

from qkdsim.scenario import format_stats, load_scenario, run_scenario

HERE = os.path.dirname(os.path.abspath(__file__))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default=os.path.join(HERE, "..", "scenarios", "fig2.scn"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--out", default=None, help="write report-<seed>.txt files here")
    args = ap.parse_args(argv)

    scenario = load_scenario(args.scenario)
    for seed in args.seeds:
        status, report = run_scenario(scenario, seed)
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            with open(os.path.join(args.out, f"report-{seed}.txt"), "w") as fh:
                fh.write(report)
        print(f"== seed {seed} (exit {status})")
        print(format_stats(report))


if __name__ == "__main__":
    main()
