"""Quintile forecasting on the heterogeneous and the homogeneous synthetic market."""
import argparse
import logging
from pathlib import Path

from mtms.benchmarks import run_quintile, write_report
from mtms.quintile import QuintileConfig, SynthMarketConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/quintile")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    markets = {"heterogeneous": SynthMarketConfig(), "homogeneous": SynthMarketConfig.homogeneous()}
    for seed in args.seeds:
        for label, market in markets.items():
            report, _ = run_quintile(QuintileConfig(market=market), seed)
            write_report(report, Path(args.out), stem=f"quintile_{label}_seed{seed}")
            x = report.extra
            print(f"seed {seed} {label:13s} RPS {x['aggregate_rps']:.5f}  "
                  f"corr(q1, q5) {x['corr_q1_q5']:+.3f}  corr(q2, q4) {x['corr_q2_q4']:+.3f}")


if __name__ == "__main__":
    main()
